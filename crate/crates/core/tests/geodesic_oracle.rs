use eqmp_core::surface::{build_puppet_surface, ratio_within, ChartPoint, GeodesicIndex, SurfaceConfig, SurfaceMesh};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quantized(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let q = 1.0 / (1u64 << 20) as f64;
    (d / q).round() * q
}

/// Jittered grid patches, one per chart, with random diagonals and random
/// welds between neighbouring charts.
fn random_mesh(seed: u64, max_vertices: usize) -> SurfaceMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let charts = rng.gen_range(1..=3);
    let per_chart = max_vertices / charts;
    let (mut vertices, mut triangles, mut chart, mut uv, mut welds) = (vec![], vec![], vec![], vec![], vec![]);
    let mut ranges = vec![];
    for k in 1..=charts {
        let rows = rng.gen_range(2..=12usize);
        let cols = rng.gen_range(2..=(per_chart / rows).clamp(2, 20));
        let base = vertices.len();
        for i in 0..rows {
            for j in 0..cols {
                vertices.push([
                    j as f64 + rng.gen_range(-0.3..0.3) + 30.0 * k as f64,
                    i as f64 + rng.gen_range(-0.3..0.3),
                    rng.gen_range(-1.0..1.0),
                ]);
                chart.push(k);
                uv.push([j as f64 / (cols - 1) as f64, i as f64 / (rows - 1) as f64]);
            }
        }
        for i in 0..rows - 1 {
            for j in 0..cols - 1 {
                let v = |a: usize, b: usize| base + a * cols + b;
                if rng.gen_bool(0.5) {
                    triangles.push([v(i, j), v(i, j + 1), v(i + 1, j + 1)]);
                    triangles.push([v(i, j), v(i + 1, j + 1), v(i + 1, j)]);
                } else {
                    triangles.push([v(i, j), v(i, j + 1), v(i + 1, j)]);
                    triangles.push([v(i, j + 1), v(i + 1, j + 1), v(i + 1, j)]);
                }
            }
        }
        ranges.push((base, vertices.len()));
    }
    for w in ranges.windows(2) {
        for _ in 0..rng.gen_range(1..=3) {
            welds.push((rng.gen_range(w[0].0..w[0].1), rng.gen_range(w[1].0..w[1].1)));
        }
    }
    assert!(vertices.len() <= max_vertices);
    SurfaceMesh::new(vertices, triangles, chart, uv, welds, charts).unwrap()
}

fn floyd_warshall(mesh: &SurfaceMesh) -> Vec<f64> {
    let n = mesh.num_vertices();
    let mut d = vec![f64::INFINITY; n * n];
    for v in 0..n {
        d[v * n + v] = 0.0;
    }
    for (a, b) in mesh.edges() {
        let len = quantized(mesh.vertices[a], mesh.vertices[b]);
        d[a * n + b] = d[a * n + b].min(len);
        d[b * n + a] = d[b * n + a].min(len);
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d
}

fn assert_matches_oracle(mesh: &SurfaceMesh) {
    let n = mesh.num_vertices();
    let index = GeodesicIndex::new(mesh).unwrap();
    let oracle = floyd_warshall(mesh);
    for a in 0..n {
        let row = index.single_source(a);
        for b in 0..n {
            assert_eq!(index.vertex_distance(a, b), oracle[a * n + b], "vertices {a} -> {b}");
            assert_eq!(row[b], oracle[a * n + b]);
        }
    }
    // chart points placed on vertices measure the vertex distance
    for a in (0..n).step_by(7) {
        for b in (0..n).step_by(11) {
            let g = index
                .geodesic(mesh, (mesh.vertex_chart[a], mesh.vertex_uv[a]), (mesh.vertex_chart[b], mesh.vertex_uv[b]))
                .unwrap();
            assert_eq!(g, oracle[a * n + b], "chart points on {a} and {b}");
        }
    }
}

#[test]
fn geodesic_equals_floyd_warshall_on_random_meshes() {
    for seed in [1, 2, 3] {
        let mesh = random_mesh(seed, 500);
        assert!(mesh.is_connected());
        assert_matches_oracle(&mesh);
    }
}

#[test]
fn geodesic_equals_floyd_warshall_on_a_welded_cylinder() {
    let mesh = SurfaceMesh::cylinder(3.0, 0.7, 8, 12).unwrap();
    assert!(mesh.num_vertices() <= 500);
    assert_matches_oracle(&mesh);
}

#[test]
fn coarse_puppet_surface_matches_the_oracle() {
    let mesh = build_puppet_surface(&SurfaceConfig { parts: 4, segments_along: 3, segments_around: 6 }).unwrap();
    assert!(mesh.num_vertices() <= 500, "{} vertices", mesh.num_vertices());
    assert_matches_oracle(&mesh);
}

#[test]
fn disconnected_meshes_are_rejected() {
    let a = SurfaceMesh::cylinder(1.0, 0.5, 2, 4).unwrap();
    let n = a.num_vertices();
    let mut v = a.vertices.clone();
    v.extend(a.vertices.iter().map(|p| [p[0] + 10.0, p[1], p[2]]));
    let mut t = a.triangles.clone();
    t.extend(a.triangles.iter().map(|tr| [tr[0] + n, tr[1] + n, tr[2] + n]));
    let mut uv = a.vertex_uv.clone();
    uv.extend(a.vertex_uv.iter().copied());
    let mut welds = a.welds.clone();
    welds.extend(a.welds.iter().map(|&(x, y)| (x + n, y + n)));
    let mesh = SurfaceMesh::new(v, t, vec![1; 2 * n], uv, welds, 1).unwrap();
    assert!(!mesh.is_connected());
    assert!(GeodesicIndex::new(&mesh).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn geodesic_is_a_symmetric_distance(seed in any::<u64>(), pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3)) {
        let mesh = random_mesh(seed, 120);
        let index = GeodesicIndex::new(&mesh).unwrap();
        let k = mesh.vertex_chart[0];
        let p: Vec<(usize, [f64; 2])> = pts.iter().map(|&(a, b)| (k, [a, b])).collect();
        let d = |i: usize, j: usize| index.geodesic(&mesh, p[i], p[j]).unwrap();
        prop_assert_eq!(d(0, 0), 0.0);
        prop_assert_eq!(d(0, 1), d(1, 0));
        prop_assert!(d(0, 1) >= 0.0);
    }

    #[test]
    fn ratio_within_is_monotone_in_the_threshold(seed in any::<u64>(), t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
        let mesh = random_mesh(seed, 120);
        let index = GeodesicIndex::new(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = mesh.vertex_chart[0];
        let truth: Vec<ChartPoint> = (0..20).map(|_| ChartPoint::new(k, [rng.gen(), rng.gen()])).collect();
        let pred: Vec<ChartPoint> = (0..20).map(|_| ChartPoint::new(if rng.gen_bool(0.2) { 0 } else { k }, [rng.gen(), rng.gen()])).collect();
        let r = ratio_within(&mesh, &index, &pred, &truth, &[t1, t1 + dt]).unwrap();
        prop_assert!(r[0] <= r[1]);
        prop_assert!((0.0..=1.0).contains(&r[0]) && (0.0..=1.0).contains(&r[1]));
        let perfect = ratio_within(&mesh, &index, &truth, &truth, &[0.0]).unwrap();
        prop_assert_eq!(perfect[0], 1.0);
    }
}
