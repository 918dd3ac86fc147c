//! Triangle meshes: icospheres, subdivision, hypothesis fans and OBJ I/O.

mod fan;
mod obj;

pub use fan::{fan_template, hypothesis_fan, FanTemplate, HypothesisFan, FAN_EDGES, FAN_NODES};
pub use obj::{load_obj, parse_obj, save_obj, write_obj};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, norm, scale, sub};
use crate::tensor::Graph;

/// A closed or open triangle mesh with derived edge and adjacency lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!("face {fi} {f:?} indexes past {n} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} {f:?} repeats a vertex")));
            }
        }
        let mut edge_set = std::collections::BTreeSet::new();
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<_> = edge_set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for l in &mut adjacency {
            l.sort_unstable();
        }
        Ok(Mesh { vertices, faces, edges, adjacency })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Mesh { vertices, ..self.clone() })
    }

    /// Vertex adjacency as a message-passing graph.
    pub fn graph(&self) -> Arc<Graph> {
        Arc::new(Graph::from_lists(&self.adjacency))
    }

    pub fn face_areas(&self) -> Vec<f64> {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                0.5 * norm(cross(sub(b, a), sub(c, a)))
            })
            .collect()
    }

    pub fn surface_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }
}

const PHI: f64 = 1.618_033_988_749_895;

/// The twelve level-0 icosahedron vertices in canonical order, unit length.
pub fn icosahedron_vertices() -> [[f64; 3]; 12] {
    let p = PHI;
    let raw = [
        [p, 1.0, 0.0],
        [-p, 1.0, 0.0],
        [p, -1.0, 0.0],
        [-p, -1.0, 0.0],
        [1.0, 0.0, p],
        [1.0, 0.0, -p],
        [-1.0, 0.0, p],
        [-1.0, 0.0, -p],
        [0.0, p, 1.0],
        [0.0, -p, 1.0],
        [0.0, p, -1.0],
        [0.0, -p, -1.0],
    ];
    let s = 1.0 / (1.0 + p * p).sqrt();
    raw.map(|v| scale(v, s))
}

fn icosahedron_faces(v: &[[f64; 3]; 12]) -> Vec<[usize; 3]> {
    // faces are the vertex triples that are pairwise at edge length
    let edge = norm(sub(v[0], v[2]));
    let adjacent = |a: usize, b: usize| (norm(sub(v[a], v[b])) - edge).abs() < 1e-9;
    let mut faces = Vec::with_capacity(20);
    for a in 0..12 {
        for b in a + 1..12 {
            for c in b + 1..12 {
                if adjacent(a, b) && adjacent(b, c) && adjacent(a, c) {
                    let n = cross(sub(v[b], v[a]), sub(v[c], v[a]));
                    let centroid = add(add(v[a], v[b]), v[c]);
                    faces.push(if dot(n, centroid) > 0.0 { [a, b, c] } else { [a, c, b] });
                }
            }
        }
    }
    faces
}

/// Output of one round of midpoint subdivision.
#[derive(Clone, Debug)]
pub struct Subdivision {
    pub mesh: Mesh,
    /// Endpoints of the edge each new vertex (index `n + i`) was split from.
    pub parents: Vec<(usize, usize)>,
}

fn split_edges(mesh: &Mesh, project: bool) -> Result<Subdivision> {
    let n = mesh.num_vertices();
    let index: BTreeMap<(usize, usize), usize> =
        mesh.edges.iter().enumerate().map(|(i, &e)| (e, n + i)).collect();
    let mut vertices = mesh.vertices.clone();
    for &(a, b) in &mesh.edges {
        let mid = scale(add(mesh.vertices[a], mesh.vertices[b]), 0.5);
        vertices.push(if project { scale(mid, 1.0 / norm(mid)) } else { mid });
    }
    let mid = |a: usize, b: usize| index[&(a.min(b), a.max(b))];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    Ok(Subdivision { mesh: Mesh::new(vertices, faces)?, parents: mesh.edges.clone() })
}

/// Edge-midpoint subdivision: every triangle becomes four. Midpoints are plain
/// averages of the edge endpoints.
pub fn subdivide(mesh: &Mesh) -> Result<Subdivision> {
    split_edges(mesh, false)
}

/// Unit icosphere after `level` rounds of subdivision with midpoints pushed
/// back onto the sphere.
pub fn icosahedron(level: usize) -> Result<Mesh> {
    if level > 3 {
        return Err(Error::invalid(format!("icosahedron level {level} outside 0..=3")));
    }
    let v = icosahedron_vertices();
    let mut mesh = Mesh::new(v.to_vec(), icosahedron_faces(&v))?;
    for _ in 0..level {
        mesh = split_edges(&mesh, true)?.mesh;
    }
    Ok(mesh)
}

/// Icosphere scaled per axis.
pub fn ellipsoid(radii: [f64; 3], level: usize) -> Result<Mesh> {
    if radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid(format!("ellipsoid radii must be positive, got {radii:?}")));
    }
    let sphere = icosahedron(level)?;
    let verts = sphere
        .vertices
        .iter()
        .map(|v| [v[0] * radii[0], v[1] * radii[1], v[2] * radii[2]])
        .collect();
    sphere.with_vertices(verts)
}

/// Area-weighted vertex normals, unit length.
pub fn vertex_normals(mesh: &Mesh) -> Result<Vec<[f64; 3]>> {
    let n = mesh.num_vertices();
    let mut acc = vec![[0.0; 3]; n];
    let mut fallback: Vec<Option<[f64; 3]>> = vec![None; n];
    for &f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        // |cross| is twice the face area
        let nf = cross(sub(b, a), sub(c, a));
        let len = norm(nf);
        for &i in &f {
            acc[i] = add(acc[i], nf);
            if len > 0.0 && fallback[i].is_none() {
                fallback[i] = Some(scale(nf, 1.0 / len));
            }
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let len = norm(v);
            if len > 1e-300 {
                Ok(scale(v, 1.0 / len))
            } else {
                fallback[i].ok_or_else(|| {
                    Error::invalid(format!("vertex {i} has no non-degenerate incident face"))
                })
            }
        })
        .collect()
}
