//! Toy body surface with a `K`-chart UV atlas, graph geodesics and the
//! ratio-within-threshold localisation metric.

mod body;
mod geodesic;
mod metric;

pub use body::{BodyPart, PartFrame, PuppetBody, DEFAULT_PARTS, MAX_PARTS};
pub use geodesic::GeodesicIndex;
pub use metric::{ratio_within, ChartPoint, DEFAULT_THRESHOLDS};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Meshing resolution of each part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    /// Number of charts / body parts `K`.
    pub parts: usize,
    /// Segments along each part axis.
    pub segments_along: usize,
    /// Segments around each part.
    pub segments_around: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig { parts: DEFAULT_PARTS, segments_along: 10, segments_around: 16 }
    }
}

/// Triangulated surface whose triangles each belong to one chart.
///
/// Charts are meshed independently; vertices shared between charts (and the
/// wrap-around seam inside a chart) are duplicated and tied together by
/// `welds`, which carry their Euclidean length in the geodesic graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Chart index per vertex, `1..=K`.
    pub vertex_chart: Vec<usize>,
    pub vertex_uv: Vec<[f64; 2]>,
    pub welds: Vec<(usize, usize)>,
    pub charts: usize,
    chart_triangles: Vec<Vec<usize>>,
    chart_vertices: Vec<Vec<usize>>,
}

/// A located chart point: 3D position and its nearest same-chart vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: [f64; 3],
    pub vertex: usize,
    pub snap: f64,
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl SurfaceMesh {
    /// Assembles a mesh and checks the chart invariants.
    pub fn new(
        vertices: Vec<[f64; 3]>,
        triangles: Vec<[usize; 3]>,
        vertex_chart: Vec<usize>,
        vertex_uv: Vec<[f64; 2]>,
        welds: Vec<(usize, usize)>,
        charts: usize,
    ) -> Result<Self> {
        let n = vertices.len();
        if vertex_chart.len() != n || vertex_uv.len() != n {
            return Err(invalid("per-vertex attribute length mismatch"));
        }
        if vertex_chart.iter().any(|&k| k == 0 || k > charts) {
            return Err(invalid("vertex chart index outside 1..=K"));
        }
        let mut chart_triangles = vec![Vec::new(); charts + 1];
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(invalid(format!("triangle {t} references a missing vertex")));
            }
            let k = vertex_chart[tri[0]];
            if tri.iter().any(|&v| vertex_chart[v] != k) {
                return Err(invalid(format!("triangle {t} spans several charts")));
            }
            chart_triangles[k].push(t);
        }
        if welds.iter().any(|&(a, b)| a >= n || b >= n) {
            return Err(invalid("weld references a missing vertex"));
        }
        let mut chart_vertices = vec![Vec::new(); charts + 1];
        for (v, &k) in vertex_chart.iter().enumerate() {
            chart_vertices[k].push(v);
        }
        Ok(SurfaceMesh { vertices, triangles, vertex_chart, vertex_uv, welds, charts, chart_triangles, chart_vertices })
    }

    /// A single open cylinder chart (`k = 1`) with `along x around` quads and
    /// its wrap seam welded.
    pub fn cylinder(length: f64, radius: f64, along: usize, around: usize) -> Result<Self> {
        let mut b = MeshBuilder::default();
        b.add_tube(1, along, around, |u| {
            let th = std::f64::consts::TAU * (u[1] - 0.5);
            [radius * th.sin(), u[0] * length, radius * th.cos()]
        })?;
        SurfaceMesh::new(b.vertices, b.triangles, b.chart, b.uv, b.welds, 1)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// All graph edges (triangle edges and welds), deduplicated, `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = Vec::with_capacity(self.triangles.len() * 3 + self.welds.len());
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                e.push((a.min(b), a.max(b)));
            }
        }
        for &(a, b) in &self.welds {
            if a != b {
                e.push((a.min(b), a.max(b)));
            }
        }
        e.sort_unstable();
        e.dedup();
        e
    }

    /// True if the edge graph has a single component.
    pub fn is_connected(&self) -> bool {
        let n = self.num_vertices();
        if n == 0 {
            return true;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (a, b) in self.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let r = find(&mut parent, 0);
        (0..n).all(|v| find(&mut parent, v) == r)
    }

    fn check_chart(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.charts {
            return Err(invalid(format!("chart index {k} outside 1..={}", self.charts)));
        }
        Ok(())
    }

    /// Surface point of chart coordinates by barycentric interpolation in the
    /// chart's UV triangulation. Coordinates outside the chart snap to the
    /// nearest point of the nearest UV triangle.
    pub fn uv_to_point(&self, k: usize, u: [f64; 2]) -> Result<[f64; 3]> {
        self.check_chart(k)?;
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for &t in &self.chart_triangles[k] {
            let tri = self.triangles[t];
            let (d2, bary) = closest_in_triangle(
                u,
                self.vertex_uv[tri[0]],
                self.vertex_uv[tri[1]],
                self.vertex_uv[tri[2]],
            );
            if d2 == 0.0 {
                return Ok(self.interpolate(tri, bary));
            }
            if best.map_or(true, |(bd, _, _)| d2 < bd) {
                best = Some((d2, t, bary));
            }
        }
        let (_, t, bary) = best.ok_or_else(|| invalid(format!("chart {k} has no triangles")))?;
        Ok(self.interpolate(self.triangles[t], bary))
    }

    fn interpolate(&self, tri: [usize; 3], bary: [f64; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (v, b) in tri.iter().zip(bary) {
            if b == 0.0 {
                continue;
            }
            for d in 0..3 {
                p[d] += b * self.vertices[*v][d];
            }
        }
        p
    }

    /// Locates a chart point and snaps it to the nearest vertex of its chart.
    pub fn locate(&self, k: usize, u: [f64; 2]) -> Result<SurfacePoint> {
        let position = self.uv_to_point(k, u)?;
        let (vertex, snap) = self.chart_vertices[k]
            .iter()
            .map(|&v| (v, dist3(position, self.vertices[v])))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        Ok(SurfacePoint { position, vertex, snap })
    }

    /// Wavefront OBJ text with per-vertex chart comments, for inspection.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# eqmp puppet surface: {} vertices, {} charts", self.num_vertices(), self.charts);
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(s, "v {} {} {} # chart {}", v[0], v[1], v[2], self.vertex_chart[i]);
        }
        for uv in &self.vertex_uv {
            let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        for (a, b) in &self.welds {
            let _ = writeln!(s, "# weld {} {}", a + 1, b + 1);
        }
        s
    }
}

/// Squared UV distance from `p` to triangle `(a, b, c)` and barycentric
/// coordinates of the closest point. Distance is exactly zero inside.
fn closest_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> (f64, [f64; 3]) {
    let v0 = [b[0] - a[0], b[1] - a[1]];
    let v1 = [c[0] - a[0], c[1] - a[1]];
    let v2 = [p[0] - a[0], p[1] - a[1]];
    let den = v0[0] * v1[1] - v1[0] * v0[1];
    if den.abs() > 0.0 {
        let l1 = (v2[0] * v1[1] - v1[0] * v2[1]) / den;
        let l2 = (v0[0] * v2[1] - v2[0] * v0[1]) / den;
        let l0 = 1.0 - l1 - l2;
        let eps = -1e-12;
        if l0 >= eps && l1 >= eps && l2 >= eps {
            let clamp = |x: f64| x.max(0.0);
            let (l0, l1, l2) = (clamp(l0), clamp(l1), clamp(l2));
            let s = l0 + l1 + l2;
            return (0.0, [l0 / s, l1 / s, l2 / s]);
        }
    }
    // outside: closest point on the three edges
    let mut best = (f64::INFINITY, [1.0, 0.0, 0.0]);
    let verts = [a, b, c];
    for (i, j) in [(0usize, 1usize), (1, 2), (2, 0)] {
        let (s, e) = (verts[i], verts[j]);
        let d = [e[0] - s[0], e[1] - s[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (((p[0] - s[0]) * d[0] + (p[1] - s[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [s[0] + t * d[0], s[1] + t * d[1]];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d2 < best.0 {
            let mut bary = [0.0; 3];
            bary[i] = 1.0 - t;
            bary[j] = t;
            best = (d2, bary);
        }
    }
    best
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    chart: Vec<usize>,
    uv: Vec<[f64; 2]>,
    welds: Vec<(usize, usize)>,
}

impl MeshBuilder {
    /// Adds a `(along+1) x (around+1)` vertex grid for one chart; returns the
    /// index of its first vertex.
    fn add_tube(
        &mut self,
        chart: usize,
        along: usize,
        around: usize,
        place: impl Fn([f64; 2]) -> [f64; 3],
    ) -> Result<usize> {
        if along < 1 || around < 3 {
            return Err(invalid("tube needs at least 1 segment along and 3 around"));
        }
        let base = self.vertices.len();
        for i in 0..=along {
            for j in 0..=around {
                let u = [i as f64 / along as f64, j as f64 / around as f64];
                self.vertices.push(place(u));
                self.chart.push(chart);
                self.uv.push(u);
            }
        }
        let id = |i: usize, j: usize| base + i * (around + 1) + j;
        for i in 0..along {
            for j in 0..around {
                self.triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                self.triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        for i in 0..=along {
            self.welds.push((id(i, 0), id(i, around)));
        }
        Ok(base)
    }
}

/// Builds the welded puppet surface in its rest pose.
pub fn build_puppet_surface(config: &SurfaceConfig) -> Result<SurfaceMesh> {
    let body = PuppetBody::humanoid(config.parts)?;
    let frames = body.rest_frames();
    let (na, nr) = (config.segments_along, config.segments_around);
    let mut b = MeshBuilder::default();
    let mut bases = Vec::with_capacity(body.num_parts());
    for (k, frame) in frames.iter().enumerate() {
        let base = b.add_tube(k + 1, na, nr, |u| body.chart_to_world(k, frame, u))?;
        bases.push(base);
    }
    let per_part = (na + 1) * (nr + 1);
    // weld each child's proximal ring to the closest vertex of its parent
    for (k, part) in body.parts.iter().enumerate() {
        let Some(parent) = part.parent else { continue };
        for j in 0..nr {
            let v = bases[k] + j;
            let pv = b.vertices[v];
            let target = (bases[parent]..bases[parent] + per_part)
                .min_by(|&x, &y| dist3(pv, b.vertices[x]).total_cmp(&dist3(pv, b.vertices[y])))
                .expect("parent chart has vertices");
            b.welds.push((v, target));
        }
    }
    SurfaceMesh::new(b.vertices, b.triangles, b.chart, b.uv, b.welds, body.num_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_part_puppet_is_connected() {
        let m = build_puppet_surface(&SurfaceConfig { parts: 2, segments_along: 2, segments_around: 6 }).unwrap();
        assert!(m.is_connected());
        let mut charts: Vec<usize> = m.vertex_chart.clone();
        charts.dedup();
        assert_eq!(charts, vec![1, 2]);
    }

    #[test]
    fn too_few_parts_rejected() {
        assert!(build_puppet_surface(&SurfaceConfig { parts: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn every_triangle_single_chart() {
        for parts in 2..=MAX_PARTS {
            let m = build_puppet_surface(&SurfaceConfig { parts, ..Default::default() }).unwrap();
            for t in &m.triangles {
                assert!(t.iter().all(|&v| m.vertex_chart[v] == m.vertex_chart[t[0]]));
            }
            assert!(m.is_connected(), "parts={parts}");
        }
    }

    #[test]
    fn default_vertex_count_in_range() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        // 10 parts x 11 x 17 grid vertices
        assert_eq!(m.num_vertices(), 1870);
        assert!((500..=2000).contains(&m.num_vertices()));
    }

    #[test]
    fn chart_coordinates_are_injective() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let mut keys: Vec<(usize, u64, u64)> = (0..m.num_vertices())
            .map(|v| (m.vertex_chart[v], m.vertex_uv[v][0].to_bits(), m.vertex_uv[v][1].to_bits()))
            .collect();
        keys.sort_unstable();
        let n = keys.len();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn uv_at_vertex_and_edge_midpoint() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        for v in [0, 17, 300, 909] {
            let p = m.uv_to_point(m.vertex_chart[v], m.vertex_uv[v]).unwrap();
            assert_eq!(p, m.vertices[v]);
        }
        let t = m.triangles[40];
        let (a, b) = (t[0], t[1]);
        let mid_uv = [(m.vertex_uv[a][0] + m.vertex_uv[b][0]) / 2.0, (m.vertex_uv[a][1] + m.vertex_uv[b][1]) / 2.0];
        let p = m.uv_to_point(m.vertex_chart[a], mid_uv).unwrap();
        for d in 0..3 {
            assert!((p[d] - (m.vertices[a][d] + m.vertices[b][d]) / 2.0).abs() < 1e-12);
        }
        assert!(m.uv_to_point(0, [0.5, 0.5]).is_err());
        assert!(m.uv_to_point(11, [0.5, 0.5]).is_err());
    }

    #[test]
    fn out_of_chart_snaps_to_nearest_triangle() {
        // exhaustive oracle: nearest point over all chart triangles
        let m = SurfaceMesh::cylinder(10.0, 2.0, 3, 4).unwrap();
        for &u in &[[1.3, 0.4], [-0.2, -0.1], [0.5, 1.7], [2.0, 2.0]] {
            let got = m.uv_to_point(1, u).unwrap();
            let clamped = [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0)];
            let want = m.uv_to_point(1, clamped).unwrap();
            for d in 0..3 {
                assert!((got[d] - want[d]).abs() < 1e-12, "{u:?}");
            }
        }
    }

    #[test]
    fn uv_to_point_is_continuous() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let step = 1.0 / 200.0;
        for k in 1..=m.charts {
            let mut prev: Option<[f64; 3]> = None;
            for i in 0..=200 {
                let p = m.uv_to_point(k, [i as f64 * step, 0.37]).unwrap();
                if let Some(q) = prev {
                    assert!(dist3(p, q) < 1.0, "jump on chart {k}");
                }
                prev = Some(p);
            }
        }
    }

    #[test]
    fn obj_export_has_all_records() {
        let m = SurfaceMesh::cylinder(1.0, 1.0, 1, 3).unwrap();
        let obj = m.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 8);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 6);
    }
}
