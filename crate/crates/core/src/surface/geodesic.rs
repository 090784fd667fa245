use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{dist3, SurfaceMesh};
use crate::error::{Error, Result};

/// Edge lengths are rounded to multiples of 2^-20 model units. Sums of such
/// values are exact in f64 at body scale, so every route through the graph
/// (Dijkstra, Floyd-Warshall, any summation order) gives identical lengths.
const LENGTH_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

/// Vertices above this count skip the all-pairs cache.
const CACHE_LIMIT: usize = 2000;

pub(crate) fn quantize(len: f64) -> f64 {
    (len / LENGTH_QUANTUM).round() * LENGTH_QUANTUM
}

/// Edge graph of a surface mesh with exact shortest-path queries.
#[derive(Clone, Debug)]
pub struct GeodesicIndex {
    offsets: Vec<usize>,
    neighbours: Vec<(usize, f64)>,
    all_pairs: Option<Vec<f64>>,
    n: usize,
}

#[derive(PartialEq)]
struct Item {
    dist: f64,
    vertex: usize,
}

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl GeodesicIndex {
    /// Builds adjacency and, for small meshes, the all-pairs distance table.
    /// Fails if the mesh is not a single connected component.
    pub fn new(mesh: &SurfaceMesh) -> Result<Self> {
        let n = mesh.num_vertices();
        let edges = mesh.edges();
        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut fill = offsets.clone();
        let mut neighbours = vec![(0usize, 0.0f64); offsets[n]];
        for &(a, b) in &edges {
            let len = quantize(dist3(mesh.vertices[a], mesh.vertices[b]));
            neighbours[fill[a]] = (b, len);
            fill[a] += 1;
            neighbours[fill[b]] = (a, len);
            fill[b] += 1;
        }
        let mut index = GeodesicIndex { offsets, neighbours, all_pairs: None, n };
        if n > 0 && index.single_source(0).iter().any(|d| !d.is_finite()) {
            return Err(Error::Internal("surface mesh is disconnected".into()));
        }
        if n <= CACHE_LIMIT {
            let mut table = Vec::with_capacity(n * n);
            for s in 0..n {
                table.extend(index.single_source(s));
            }
            index.all_pairs = Some(table);
        }
        Ok(index)
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    /// Quantised edge list `(a, b, length)` with `a < b`.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        let mut out = vec![];
        for a in 0..self.n {
            for &(b, w) in &self.neighbours[self.offsets[a]..self.offsets[a + 1]] {
                if a < b {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    /// Dijkstra from one vertex over the edge graph.
    pub fn single_source(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Item { dist: 0.0, vertex: source });
        while let Some(Item { dist: d, vertex: v }) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(w, len) in &self.neighbours[self.offsets[v]..self.offsets[v + 1]] {
                let nd = d + len;
                if nd < dist[w] {
                    dist[w] = nd;
                    heap.push(Item { dist: nd, vertex: w });
                }
            }
        }
        dist
    }

    /// Graph distance between two vertices.
    pub fn vertex_distance(&self, a: usize, b: usize) -> f64 {
        match &self.all_pairs {
            Some(t) => t[a * self.n + b],
            None => self.single_source(a)[b],
        }
    }

    /// Surface distance between two chart points: graph distance between
    /// their nearest vertices plus both snap offsets. Points snapping to the
    /// same vertex are measured by their straight-line distance.
    pub fn geodesic(&self, mesh: &SurfaceMesh, a: (usize, [f64; 2]), b: (usize, [f64; 2])) -> Result<f64> {
        let pa = mesh.locate(a.0, a.1)?;
        let pb = mesh.locate(b.0, b.1)?;
        Ok(self.between(&pa, &pb))
    }

    pub fn between(&self, pa: &super::SurfacePoint, pb: &super::SurfacePoint) -> f64 {
        if pa.vertex == pb.vertex {
            return dist3(pa.position, pb.position);
        }
        // snaps summed first so the result is symmetric in its arguments
        (pa.snap + pb.snap) + self.vertex_distance(pa.vertex, pb.vertex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{build_puppet_surface, SurfaceConfig};

    #[test]
    fn same_point_is_zero() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let g = GeodesicIndex::new(&m).unwrap();
        assert_eq!(g.geodesic(&m, (3, [0.31, 0.62]), (3, [0.31, 0.62])).unwrap(), 0.0);
    }

    #[test]
    fn adjacent_vertices_give_edge_length() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let g = GeodesicIndex::new(&m).unwrap();
        let t = m.triangles[5];
        let (a, b) = (t[0], t[1]);
        let d = g
            .geodesic(&m, (m.vertex_chart[a], m.vertex_uv[a]), (m.vertex_chart[b], m.vertex_uv[b]))
            .unwrap();
        assert!((d - dist3(m.vertices[a], m.vertices[b])).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let g = GeodesicIndex::new(&m).unwrap();
        let pts = [(1, [0.2, 0.5]), (4, [0.9, 0.3]), (10, [0.5, 0.5]), (2, [0.0, 0.0])];
        for a in pts {
            for b in pts {
                let ab = g.geodesic(&m, a, b).unwrap();
                let ba = g.geodesic(&m, b, a).unwrap();
                assert_eq!(ab, ba);
                assert!(ab >= 0.0);
            }
        }
    }

    #[test]
    fn disconnected_mesh_is_an_internal_error() {
        let a = SurfaceMesh::cylinder(1.0, 1.0, 1, 3).unwrap();
        let mut verts = a.vertices.clone();
        verts.extend(a.vertices.iter().map(|v| [v[0] + 10.0, v[1], v[2]]));
        let n = a.num_vertices();
        let mut tris = a.triangles.clone();
        tris.extend(a.triangles.iter().map(|t| [t[0] + n, t[1] + n, t[2] + n]));
        let m = SurfaceMesh::new(
            verts,
            tris,
            vec![1; 2 * n],
            [a.vertex_uv.clone(), a.vertex_uv.clone()].concat(),
            vec![],
            1,
        )
        .unwrap();
        assert!(matches!(GeodesicIndex::new(&m), Err(Error::Internal(_))));
    }
}
