use std::sync::{Arc, OnceLock};

use super::{icosahedron, Mesh};
use crate::error::{Error, Result};
use crate::geom::{add, scale};
use crate::tensor::Graph;

/// Nodes in a hypothesis fan: the vertex itself plus 42 shell positions.
pub const FAN_NODES: usize = 43;
/// 120 shell edges plus 42 spokes to the center.
pub const FAN_EDGES: usize = 162;

/// The fixed local graph shared by every fan: unit offsets (node 0 is the
/// center, offset zero) and edges over the 43 nodes.
#[derive(Debug)]
pub struct FanTemplate {
    pub offsets: Vec<[f64; 3]>,
    pub edges: Vec<(usize, usize)>,
    pub graph: Arc<Graph>,
}

pub fn fan_template() -> &'static FanTemplate {
    static TEMPLATE: OnceLock<FanTemplate> = OnceLock::new();
    TEMPLATE.get_or_init(|| {
        let shell = icosahedron(1).expect("level 1 is valid");
        let mut offsets = vec![[0.0; 3]];
        offsets.extend_from_slice(shell.vertices());
        let mut edges: Vec<_> = shell.edges().iter().map(|&(a, b)| (a + 1, b + 1)).collect();
        edges.extend((1..FAN_NODES).map(|i| (0, i)));
        let graph = Arc::new(Graph::from_edges(FAN_NODES, &edges).expect("fan edges in range"));
        FanTemplate { offsets, edges, graph }
    })
}

/// Candidate positions for one vertex and their local graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisFan {
    pub center_index: usize,
    /// Center first, then the 42 shell positions.
    pub positions: Vec<[f64; 3]>,
    pub local_edges: Vec<(usize, usize)>,
    pub scale: f64,
}

pub fn hypothesis_fan(mesh: &Mesh, vertex_index: usize, scale_: f64) -> Result<HypothesisFan> {
    let center = *mesh.vertices().get(vertex_index).ok_or_else(|| {
        Error::invalid(format!(
            "vertex {vertex_index} out of range for {} vertices",
            mesh.num_vertices()
        ))
    })?;
    if !(scale_ > 0.0) {
        return Err(Error::invalid(format!("fan scale must be positive, got {scale_}")));
    }
    let t = fan_template();
    Ok(HypothesisFan {
        center_index: vertex_index,
        positions: t.offsets.iter().map(|&u| add(center, scale(u, scale_))).collect(),
        local_edges: t.edges.clone(),
        scale: scale_,
    })
}
