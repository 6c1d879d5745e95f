//! Triangle meshes: validation, per-vertex areas, corner cotangents and
//! graph geodesics.
//!
//! A [`TriMesh`] is immutable once built. Every constructor runs the same
//! validation: indices in range, no degenerate faces, edge manifoldness and a
//! single connected component.

pub mod io;
pub mod shapes;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

/// Relative area threshold below which a face counts as degenerate,
/// measured against the squared bounding-box diagonal.
pub const DEGENERATE_AREA_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh has no vertices or no faces")]
    Empty,
    #[error("face {face} references vertex {index}, but the mesh has {n} vertices")]
    IndexOutOfRange { face: usize, index: usize, n: usize },
    #[error("face {face} is degenerate (area {area:.3e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("edge ({a}, {b}) is shared by more than two faces (third at face {face})")]
    NonManifoldEdge { a: usize, b: usize, face: usize },
    #[error("mesh is disconnected: {components} components (vertex {vertex} unreachable from vertex 0)")]
    Disconnected { components: usize, vertex: usize },
    #[error("vertex {vertex} is unreachable from source {source_vertex}")]
    Unreachable { source_vertex: usize, vertex: usize },
    #[error("vertex index {index} out of range for mesh with {n} vertices")]
    VertexOutOfRange { index: usize, n: usize },
    #[error("connectivity mismatch: {0}")]
    ConnectivityMismatch(String),
}

/// Validated triangle mesh with 0-based connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
}

/// Per-vertex sum of incident triangle areas.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexAreas(pub Vec<f64>);

impl VertexAreas {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = TriMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        if n == 0 || self.faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let diag2 = self.bbox_diagonal().powi(2);
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: v, n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace { face: fi, area: 0.0 });
            }
            let area = self.face_area(fi);
            if !(area >= DEGENERATE_AREA_TOL * diag2) {
                return Err(MeshError::DegenerateFace { face: fi, area });
            }
            for c in 0..3 {
                let key = edge_key(f[c], f[(c + 1) % 3]);
                let count = edge_count.entry(key).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(MeshError::NonManifoldEdge { a: key.0, b: key.1, face: fi });
                }
            }
        }

        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut first_unreached = None;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            if components == 2 {
                first_unreached = Some(start);
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        if let Some(vertex) = first_unreached {
            return Err(MeshError::Disconnected { components, vertex });
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<TriMesh, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::ConnectivityMismatch(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriMesh::new(vertices, self.faces.clone())
    }

    /// Applies `f` to every vertex position.
    pub fn map_vertices(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Result<TriMesh, MeshError> {
        self.with_vertices(self.vertices.iter().map(f).collect())
    }

    /// Reorders vertices so that new vertex `i` is old vertex `order[i]`.
    /// Faces are relabelled accordingly; the geometry is unchanged.
    pub fn permuted(&self, order: &[usize]) -> Result<TriMesh, MeshError> {
        let n = self.n_vertices();
        if order.len() != n {
            return Err(MeshError::ConnectivityMismatch(format!(
                "permutation has length {}, mesh has {n} vertices",
                order.len()
            )));
        }
        let mut new_index = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || new_index[old] != usize::MAX {
                return Err(MeshError::ConnectivityMismatch("not a permutation".into()));
            }
            new_index[old] = new;
        }
        let vertices = order.iter().map(|&old| self.vertices[old]).collect();
        let faces = self
            .faces
            .iter()
            .map(|f| [new_index[f[0]], new_index[f[1]], new_index[f[2]]])
            .collect();
        TriMesh::new(vertices, faces)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        (hi - lo).norm()
    }

    fn corner_edges(&self, face: usize, corner: usize) -> (Vector3<f64>, Vector3<f64>) {
        let f = self.faces[face];
        let p = self.vertices[f[corner]];
        let e1 = self.vertices[f[(corner + 1) % 3]] - p;
        let e2 = self.vertices[f[(corner + 2) % 3]] - p;
        (e1, e2)
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let (e1, e2) = self.corner_edges(face, 0);
        0.5 * e1.cross(&e2).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.n_faces()).map(|f| self.face_area(f)).sum()
    }

    /// s_i = sum of the areas of all triangles sharing vertex i.
    pub fn vertex_areas(&self) -> VertexAreas {
        let mut s = vec![0.0; self.n_vertices()];
        for (fi, f) in self.faces.iter().enumerate() {
            let a = self.face_area(fi);
            for &v in f {
                s[v] += a;
            }
        }
        VertexAreas(s)
    }

    /// Interior angles per face corner, in radians.
    pub fn corner_angles(&self) -> Vec<[f64; 3]> {
        (0..self.n_faces())
            .map(|fi| {
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let (e1, e2) = self.corner_edges(fi, c);
                    *o = e1.cross(&e2).norm().atan2(e1.dot(&e2));
                }
                out
            })
            .collect()
    }

    /// Cotangent of each corner angle, `corner_cotangents()[f][c]` belonging to
    /// vertex `faces()[f][c]` (and so to the edge opposite it).
    pub fn corner_cotangents(&self) -> Result<Vec<[f64; 3]>, MeshError> {
        let mut out = Vec::with_capacity(self.n_faces());
        for fi in 0..self.n_faces() {
            let mut cots = [0.0; 3];
            for (c, cot) in cots.iter_mut().enumerate() {
                let (e1, e2) = self.corner_edges(fi, c);
                let cross = e1.cross(&e2).norm();
                if cross <= 0.0 || !cross.is_finite() {
                    return Err(MeshError::DegenerateFace { face: fi, area: 0.5 * cross });
                }
                *cot = e1.dot(&e2) / cross;
            }
            out.push(cots);
        }
        Ok(out)
    }

    /// Sorted neighbour lists of the edge graph.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for f in &self.faces {
            for c in 0..3 {
                let (a, b) = (f[c], f[(c + 1) % 3]);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency().iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self
            .faces
            .iter()
            .flat_map(|f| (0..3).map(move |c| edge_key(f[c], f[(c + 1) % 3])))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Dijkstra distances over the edge graph, weighted by Euclidean edge length.
    pub fn graph_geodesics(&self, source: usize) -> Result<Vec<f64>, MeshError> {
        let n = self.n_vertices();
        if source >= n {
            return Err(MeshError::VertexOutOfRange { index: source, n });
        }
        let adj = self.adjacency();
        let mut dist = vec![f64::INFINITY; n];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry { dist: 0.0, vertex: source });
        while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &w in &adj[v] {
                let nd = d + (self.vertices[w] - self.vertices[v]).norm();
                if nd < dist[w] {
                    dist[w] = nd;
                    heap.push(HeapEntry { dist: nd, vertex: w });
                }
            }
        }
        if let Some(vertex) = dist.iter().position(|d| !d.is_finite()) {
            return Err(MeshError::Unreachable { source_vertex: source, vertex });
        }
        Ok(dist)
    }

    /// Largest graph distance seen from any of `sources`.
    pub fn geodesic_diameter(&self, sources: &[usize]) -> Result<f64, MeshError> {
        let mut diam: f64 = 0.0;
        for &s in sources {
            let d = self.graph_geodesics(s)?;
            diam = d.iter().copied().fold(diam, f64::max);
        }
        Ok(diam)
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // min-heap on distance, ties by vertex index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}
