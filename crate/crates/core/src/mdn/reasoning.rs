use std::sync::Arc;

use super::gcn::scoring_logits;
use super::RefineConfig;
use crate::error::{Error, Result};
use crate::mesh::{fan_template, HypothesisFan, Mesh, FAN_NODES};
use crate::pooling::{pool_node_features, View, ViewVars};
use crate::tensor::{BoundParams, ParamStore, ReduceKind, Tape, Tensor, Var};

/// Vertices refined per tape in [`mdn_refine`]; only bounds memory.
const REFINE_CHUNK: usize = 256;

/// `Σ s_i · h_i` over the fan's positions.
pub fn deformation_reasoning(fan: &HypothesisFan, scores: &[f64]) -> Result<[f64; 3]> {
    if scores.len() != fan.positions.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} hypotheses",
            scores.len(),
            fan.positions.len()
        )));
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("scores sum to {total}, expected 1")));
    }
    let mut v = [0.0; 3];
    for (s, h) in scores.iter().zip(&fan.positions) {
        for k in 0..3 {
            v[k] += s * h[k];
        }
    }
    Ok(v)
}

/// All fan positions for `N×3` vertices as an `(N·43)×3` block, vertex-major.
pub fn fan_positions_on_tape(tape: &mut Tape, verts: Var, scale: f64) -> Result<Var> {
    let s = tape.shape(verts).to_vec();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("fan positions", &[&s]));
    }
    let n = s[0];
    let idx: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat(v).take(FAN_NODES)).collect();
    let centers = tape.gather_rows(verts, &idx)?;
    let unit = &fan_template().offsets;
    let offsets: Vec<f64> = (0..n)
        .flat_map(|_| unit.iter().flat_map(|u| u.map(|c| c * scale)))
        .collect();
    let offsets = tape.constant(Tensor::new([n * FAN_NODES, 3], offsets)?);
    tape.add(centers, offsets)
}

/// Softmax over each fan's 43 logits, then the score-weighted sum of positions.
pub fn soft_argmax_on_tape(tape: &mut Tape, logits: Var, positions: Var) -> Result<Var> {
    let rows = tape.shape(positions)[0];
    if rows % FAN_NODES != 0 || tape.shape(logits).iter().product::<usize>() != rows {
        return Err(Error::shape("soft_argmax", &[tape.shape(logits), tape.shape(positions)]));
    }
    let n = rows / FAN_NODES;
    let logits = tape.reshape(logits, [n, FAN_NODES])?;
    let scores = tape.softmax(logits)?;
    let scores = tape.reshape(scores, [n, FAN_NODES, 1])?;
    let pos = tape.reshape(positions, [n, FAN_NODES, 3])?;
    let weighted = tape.mul(pos, scores)?;
    tape.reduce(weighted, ReduceKind::Sum, 1)
}

/// One synchronous refinement step: every vertex moves to the soft-argmax of
/// its own fan, all fans built from the same input vertices.
pub fn mdn_iteration(
    tape: &mut Tape,
    params: &BoundParams,
    verts: Var,
    views: &[ViewVars],
    scale: f64,
) -> Result<Var> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("hypothesis scale must be positive, got {scale}")));
    }
    let n = tape.shape(verts).first().copied().unwrap_or(0);
    let positions = fan_positions_on_tape(tape, verts, scale)?;
    let features = pool_node_features(tape, positions, views)?;
    let graph = Arc::new(fan_template().graph.repeat(n));
    let logits = scoring_logits(tape, params, features, &graph)?;
    soft_argmax_on_tape(tape, logits, positions)
}

/// Refined meshes after each iteration (empty for zero iterations).
pub fn mdn_refine_steps(
    mesh: &Mesh,
    views: &[View],
    params: &ParamStore,
    config: &RefineConfig,
) -> Result<Vec<Mesh>> {
    if views.is_empty() {
        return Err(Error::invalid("refinement needs at least one view"));
    }
    config.validate()?;
    let mut current = mesh.clone();
    let mut out = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let scale = config.scale(it);
        let mut next = Vec::with_capacity(current.num_vertices());
        for chunk in current.vertices().chunks(REFINE_CHUNK) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false);
            let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(&mut tape, v)).collect();
            let verts = tape.constant(Tensor::from_points(chunk));
            let moved = mdn_iteration(&mut tape, &bound, verts, &vv, scale)?;
            next.extend(tape.value(moved).to_points()?);
        }
        current = current.with_vertices(next)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Runs `config.iterations` refinement steps; faces are unchanged.
pub fn mdn_refine(mesh: &Mesh, views: &[View], params: &ParamStore, config: &RefineConfig) -> Result<Mesh> {
    Ok(mdn_refine_steps(mesh, views, params, config)?.pop().unwrap_or_else(|| mesh.clone()))
}
