use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mesh::{fan_template, FAN_NODES};
use crate::tensor::{glorot_uniform, BoundParams, Graph, ParamStore, Tape, Tensor, Var};

/// Graph convolutions in a residual stack, counting the input and output layers.
pub const STACK_LAYERS: usize = 6;

/// Registers `{prefix}/w_self`, `{prefix}/w_neigh` and `{prefix}/b`.
pub fn init_graph_conv<R: Rng>(params: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, d_out: usize) {
    params.insert(format!("{prefix}/w_self"), glorot_uniform(rng, &[d_in, d_out], d_in, d_out));
    params.insert(format!("{prefix}/w_neigh"), glorot_uniform(rng, &[d_in, d_out], d_in, d_out));
    params.insert(format!("{prefix}/b"), Tensor::zeros([d_out]));
}

/// `X·W_self + mean_{q∈N(p)}(X·W_neigh) + b`, optionally followed by ReLU.
///
/// The neighbor mean is taken after the projection, which is the same thing
/// and cheaper whenever the layer narrows.
pub fn graph_conv(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    graph: &Arc<Graph>,
    relu: bool,
) -> Result<Var> {
    let ws = params.get(&format!("{prefix}/w_self"))?;
    let wn = params.get(&format!("{prefix}/w_neigh"))?;
    let b = params.get(&format!("{prefix}/b"))?;
    let own = tape.matmul(x, ws)?;
    let nb = tape.matmul(x, wn)?;
    let nb = tape.graph_mean(nb, graph)?;
    let out = tape.add(own, nb)?;
    let out = tape.add(out, b)?;
    Ok(if relu { tape.relu(out) } else { out })
}

pub(super) fn init_stack<R: Rng>(
    params: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    width: usize,
    d_out: usize,
) {
    init_graph_conv(params, rng, &format!("{prefix}/gc1"), d_in, width);
    for i in 2..STACK_LAYERS {
        init_graph_conv(params, rng, &format!("{prefix}/gc{i}"), width, width);
    }
    init_graph_conv(params, rng, &format!("{prefix}/gc{STACK_LAYERS}"), width, d_out);
}

/// gc1 → gc2 → gc3, add(gc2, gc3) → gc4 → gc5, add(gc4, gc5) → gc6.
///
/// Hidden layers use ReLU; the last layer is linear.
pub fn residual_stack(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    graph: &Arc<Graph>,
) -> Result<Var> {
    let gc = |tape: &mut Tape, i: usize, x: Var, relu: bool| {
        graph_conv(tape, params, &format!("{prefix}/gc{i}"), x, graph, relu)
    };
    let h1 = gc(tape, 1, x, true)?;
    let h2 = gc(tape, 2, h1, true)?;
    let h3 = gc(tape, 3, h2, true)?;
    let a1 = tape.add(h2, h3)?;
    let h4 = gc(tape, 4, a1, true)?;
    let h5 = gc(tape, 5, h4, true)?;
    let a2 = tape.add(h4, h5)?;
    gc(tape, 6, a2, false)
}

/// Unnormalized scores for `fans` consecutive blocks of 43 node features.
pub fn scoring_logits(tape: &mut Tape, params: &BoundParams, features: Var, graph: &Arc<Graph>) -> Result<Var> {
    residual_stack(tape, params, "mdn", features, graph)
}

/// Scores for a single fan from its `43×D` node features; they sum to one.
pub fn score_hypotheses(params: &ParamStore, features: &Tensor) -> Result<Vec<f64>> {
    if features.rank() != 2 || features.shape()[0] != FAN_NODES {
        return Err(Error::shape("score_hypotheses", &[features.shape()]));
    }
    let d_in = params.get("mdn/gc1/w_self")?.shape()[0];
    if features.shape()[1] != d_in {
        return Err(Error::shape("score_hypotheses", &[features.shape(), &[FAN_NODES, d_in]]));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let f = tape.constant(features.clone());
    let logits = scoring_logits(&mut tape, &bound, f, &fan_template().graph)?;
    let logits = tape.reshape(logits, [1, FAN_NODES])?;
    let s = tape.softmax(logits)?;
    Ok(tape.value(s).data().to_vec())
}
