//! Surface re-sampling, Chamfer distance and the auxiliary mesh regularizers.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{add, scale};
use crate::kdtree::KdTree;
use crate::mesh::Mesh;
use crate::tensor::{Graph, ReduceKind, Tape, Tensor, Var};

/// Added under the root when Chamfer uses plain (unsquared) distances.
const DIST_EPS: f64 = 1e-12;

/// `(1-√r1)·v1 + √r1(1-r2)·v2 + √r1·r2·v3`, uniform over the triangle for uniform `r1, r2`.
pub fn sample_triangle(v1: [f64; 3], v2: [f64; 3], v3: [f64; 3], r1: f64, r2: f64) -> Result<[f64; 3]> {
    let w = barycentric(r1, r2)?;
    Ok(add(add(scale(v1, w[0]), scale(v2, w[1])), scale(v3, w[2])))
}

fn barycentric(r1: f64, r2: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&r1) || !(0.0..=1.0).contains(&r2) {
        return Err(Error::invalid(format!("sample parameters ({r1}, {r2}) outside [0, 1]")));
    }
    let s = r1.sqrt();
    Ok([1.0 - s, s * (1.0 - r2), s * r2])
}

/// Splits `n` samples across faces in proportion to `areas` (largest remainder;
/// ties go to the lower face index).
pub fn allocate_samples(areas: &[f64], n: usize) -> Result<Vec<usize>> {
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) || areas.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::invalid("cannot sample a mesh with no area"));
    }
    let exact: Vec<f64> = areas.iter().map(|a| a / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &f in order.iter().take(n.saturating_sub(assigned)) {
        counts[f] += 1;
    }
    Ok(counts)
}

/// Where each re-sampled point lies: a face and barycentric weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub faces: Vec<usize>,
    pub weights: Vec<[f64; 3]>,
}

impl SurfaceSamples {
    pub fn draw<R: Rng>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Self> {
        let counts = allocate_samples(&mesh.face_areas(), n)?;
        let mut faces = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (f, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                faces.push(f);
                weights.push(barycentric(rng.gen(), rng.gen())?);
            }
        }
        Ok(SurfaceSamples { faces, weights })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Sample positions on `mesh`, whose faces must be the ones drawn from.
    pub fn points(&self, mesh: &Mesh) -> Vec<[f64; 3]> {
        let v = mesh.vertices();
        self.faces
            .iter()
            .zip(&self.weights)
            .map(|(&f, w)| {
                let [a, b, c] = mesh.faces()[f];
                add(add(scale(v[a], w[0]), scale(v[b], w[1])), scale(v[c], w[2]))
            })
            .collect()
    }

    /// The same samples as a differentiable function of `N×3` vertices.
    pub fn on_tape(&self, tape: &mut Tape, verts: Var, faces: &[[usize; 3]]) -> Result<Var> {
        if self.is_empty() {
            return Err(Error::invalid("no surface samples"));
        }
        let mut acc = None;
        for k in 0..3 {
            let idx: Vec<usize> = self.faces.iter().map(|&f| faces[f][k]).collect();
            let corner = tape.gather_rows(verts, &idx)?;
            let w = tape.constant(Tensor::new([self.len(), 1], self.weights.iter().map(|w| w[k]).collect())?);
            let term = tape.mul(corner, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.expect("three corners"))
    }
}

/// `n` area-proportional surface samples followed by every mesh vertex.
pub fn resample_mesh<R: Rng>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let mut out = SurfaceSamples::draw(mesh, n, rng)?.points(mesh);
    out.extend_from_slice(mesh.vertices());
    Ok(out)
}

/// Differentiable [`resample_mesh`]: face allocation uses the current vertex values.
pub fn resample_on_tape<R: Rng>(tape: &mut Tape, verts: Var, mesh: &Mesh, n: usize, rng: &mut R) -> Result<Var> {
    let current = mesh.with_vertices(tape.value(verts).to_points()?)?;
    let samples = SurfaceSamples::draw(&current, n, rng)?;
    if samples.is_empty() {
        return Ok(verts);
    }
    let pts = samples.on_tape(tape, verts, mesh.faces())?;
    tape.concat(&[pts, verts], 0)
}

fn check_cloud(tape: &Tape, v: Var, op: &'static str) -> Result<Vec<[f64; 3]>> {
    let pts = tape.value(v).to_points()?;
    if pts.is_empty() {
        return Err(Error::invalid(format!("{op}: empty point cloud")));
    }
    Ok(pts)
}

/// Mean over rows of `a` of the (squared) distance to the nearest row of `b`.
fn one_way(tape: &mut Tape, a: Var, b: Var, b_tree: &KdTree, a_pts: &[[f64; 3]], squared: bool) -> Result<Var> {
    let idx: Vec<usize> = a_pts.iter().map(|&p| b_tree.nearest(p).0).collect();
    let nb = tape.gather_rows(b, &idx)?;
    let d = tape.sub(a, nb)?;
    let d = tape.square(d);
    let mut d = tape.reduce(d, ReduceKind::Sum, 1)?;
    if !squared {
        let e = tape.add_scalar(d, DIST_EPS);
        d = tape.sqrt(e)?;
    }
    tape.mean_all(d)
}

/// Symmetric Chamfer distance between two `P×3` clouds on a tape.
///
/// Nearest neighbors come from k-d trees over the current values and are held
/// fixed for the backward pass.
pub fn chamfer_on_tape(tape: &mut Tape, a: Var, b: Var, squared: bool) -> Result<Var> {
    let (pa, pb) = (check_cloud(tape, a, "chamfer")?, check_cloud(tape, b, "chamfer")?);
    let (ta, tb) = (KdTree::new(&pa)?, KdTree::new(&pb)?);
    let ab = one_way(tape, a, b, &tb, &pa, squared)?;
    let ba = one_way(tape, b, a, &ta, &pb, squared)?;
    tape.add(ab, ba)
}

/// Same quantity through the full distance matrix. Quadratic; used as an oracle.
pub fn chamfer_brute_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_cloud(tape, a, "chamfer")?;
    check_cloud(tape, b, "chamfer")?;
    let d = tape.sq_dist(a, b)?;
    let ab = tape.reduce(d, ReduceKind::Min, 1)?;
    let ab = tape.mean_all(ab)?;
    let ba = tape.reduce(d, ReduceKind::Min, 0)?;
    let ba = tape.mean_all(ba)?;
    tape.add(ab, ba)
}

/// Squared Chamfer distance between two clouds.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::from_points(a));
    let vb = tape.constant(Tensor::from_points(b));
    let c = chamfer_on_tape(&mut tape, va, vb, true)?;
    Ok(tape.value(c).item())
}

pub fn chamfer_brute(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::from_points(a));
    let vb = tape.constant(Tensor::from_points(b));
    let c = chamfer_brute_on_tape(&mut tape, va, vb)?;
    Ok(tape.value(c).item())
}

/// Ground-truth cloud with unit normals and a search tree.
#[derive(Clone, Debug)]
pub struct GtCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub tree: KdTree,
}

impl GtCloud {
    pub fn new(points: Vec<[f64; 3]>, normals: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::invalid(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        let tree = KdTree::new(&points)?;
        Ok(GtCloud { points, normals, tree })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub chamfer: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { chamfer: 1.0, edge: 0.1, laplacian: 0.5, normal: 1.6e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.chamfer > 0.0) || [self.edge, self.laplacian, self.normal].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative with a positive chamfer weight".into()));
        }
        Ok(())
    }
}

/// Edge-length, Laplacian and normal regularizers for one deformation.
#[derive(Clone, Copy, Debug)]
pub struct AuxLosses {
    pub edge: Var,
    pub laplacian: Var,
    pub normal: Var,
}

fn edge_vectors(tape: &mut Tape, verts: Var, edges: &[(usize, usize)]) -> Result<Var> {
    let a: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let b: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let va = tape.gather_rows(verts, &a)?;
    let vb = tape.gather_rows(verts, &b)?;
    tape.sub(va, vb)
}

fn laplacian(tape: &mut Tape, verts: Var, graph: &Arc<Graph>) -> Result<Var> {
    let m = tape.graph_mean(verts, graph)?;
    tape.sub(verts, m)
}

/// `before` and `after` are `N×3` vertex sets sharing `mesh`'s topology.
pub fn aux_losses(tape: &mut Tape, before: Var, after: Var, mesh: &Mesh, gt: &GtCloud) -> Result<AuxLosses> {
    let edges = mesh.edges();
    if edges.is_empty() {
        return Err(Error::invalid("mesh has no edges"));
    }
    let ev = edge_vectors(tape, after, edges)?;
    let len2 = tape.square(ev);
    let len2 = tape.reduce(len2, ReduceKind::Sum, 1)?;
    let edge = tape.mean_all(len2)?;

    let graph = mesh.graph();
    let lb = laplacian(tape, before, &graph)?;
    let la = laplacian(tape, after, &graph)?;
    let dl = tape.sub(la, lb)?;
    let dl = tape.square(dl);
    let dl = tape.reduce(dl, ReduceKind::Sum, 1)?;
    let lap = tape.mean_all(dl)?;

    let pts = tape.value(after).to_points()?;
    let normals: Vec<f64> = edges.iter().flat_map(|&(p, _)| gt.normals[gt.tree.nearest(pts[p]).0]).collect();
    let n = tape.constant(Tensor::new([edges.len(), 3], normals)?);
    let dot = tape.mul(ev, n)?;
    let dot = tape.reduce(dot, ReduceKind::Sum, 1)?;
    let dot = tape.square(dot);
    let normal = tape.mean_all(dot)?;
    Ok(AuxLosses { edge, laplacian: lap, normal })
}

/// Weighted loss terms for one predicted mesh.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub chamfer: Var,
    pub edge: Var,
    pub laplacian: Var,
    pub normal: Var,
}

/// Options that do not change between steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub samples: usize,
    pub squared: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { weights: LossWeights::default(), samples: 4000, squared: true }
    }
}

/// Chamfer on the re-sampled surface plus weighted regularizers.
pub fn total_loss<R: Rng>(
    tape: &mut Tape,
    before: Var,
    after: Var,
    mesh: &Mesh,
    gt: &GtCloud,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossTerms> {
    opts.weights.validate()?;
    let cloud = resample_on_tape(tape, after, mesh, opts.samples, rng)?;
    let target = tape.constant(Tensor::from_points(&gt.points));
    let chamfer = chamfer_on_tape(tape, cloud, target, opts.squared)?;
    let aux = aux_losses(tape, before, after, mesh, gt)?;
    let w = opts.weights;
    let mut total = tape.scale(chamfer, w.chamfer);
    for (term, wt) in [(aux.edge, w.edge), (aux.laplacian, w.laplacian), (aux.normal, w.normal)] {
        if wt != 0.0 {
            let t = tape.scale(term, wt);
            total = tape.add(total, t)?;
        }
    }
    Ok(LossTerms { total, chamfer, edge: aux.edge, laplacian: aux.laplacian, normal: aux.normal })
}
