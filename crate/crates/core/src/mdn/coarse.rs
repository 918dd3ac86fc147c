use std::sync::Arc;

use super::gcn::residual_stack;
use super::{Network, StageOutput};
use crate::error::{Error, Result};
use crate::mesh::{ellipsoid, subdivide, Mesh};
use crate::pooling::{pool_node_features, View, ViewVars};
use crate::tensor::{BoundParams, Graph, ParamStore, Tape, Tensor, Var};

pub const COARSE_BLOCKS: usize = 3;

/// Pyramid levels read by the coarse stage.
const COARSE_LEVELS: [usize; 2] = [1, 2];

/// Meshes seen by each coarse block. Block `b` deforms `meshes[b]`; between
/// blocks the mesh is subdivided and `parents[b]` lists the split edges.
#[derive(Clone, Debug)]
pub struct CoarseTopology {
    pub meshes: Vec<Mesh>,
    pub parents: Vec<Vec<(usize, usize)>>,
    pub graphs: Vec<Arc<Graph>>,
}

impl CoarseTopology {
    pub fn new(level: usize, radius: f64) -> Result<Self> {
        let mut meshes = vec![ellipsoid([radius; 3], level)?];
        let mut parents = Vec::new();
        for _ in 1..COARSE_BLOCKS {
            let s = subdivide(meshes.last().expect("nonempty"))?;
            meshes.push(s.mesh);
            parents.push(s.parents);
        }
        let graphs = meshes.iter().map(|m| m.graph()).collect();
        Ok(CoarseTopology { meshes, parents, graphs })
    }

    /// The mesh the whole pipeline ends on.
    pub fn output_mesh(&self) -> &Mesh {
        self.meshes.last().expect("nonempty")
    }
}

/// Appends the midpoint of every parent edge as a new row.
fn unpool(tape: &mut Tape, verts: Var, parents: &[(usize, usize)]) -> Result<Var> {
    let a: Vec<usize> = parents.iter().map(|e| e.0).collect();
    let b: Vec<usize> = parents.iter().map(|e| e.1).collect();
    let va = tape.gather_rows(verts, &a)?;
    let vb = tape.gather_rows(verts, &b)?;
    let mid = tape.add(va, vb)?;
    let mid = tape.scale(mid, 0.5);
    tape.concat(&[verts, mid], 0)
}

/// Three blocks of pool → residual graph convolutions → per-vertex offset,
/// subdividing between blocks.
pub fn coarse_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    topology: &CoarseTopology,
    views: &[ViewVars],
) -> Result<Vec<StageOutput>> {
    if views.is_empty() {
        return Err(Error::invalid("coarse stage needs at least one view"));
    }
    let coarse_views: Vec<ViewVars> = views.iter().map(|v| v.select_levels(&COARSE_LEVELS)).collect::<Result<_>>()?;
    let mut verts = tape.constant(Tensor::from_points(topology.meshes[0].vertices()));
    let mut out = Vec::with_capacity(COARSE_BLOCKS);
    for b in 0..COARSE_BLOCKS {
        if b > 0 {
            verts = unpool(tape, verts, &topology.parents[b - 1])?;
        }
        let feats = pool_node_features(tape, verts, &coarse_views)?;
        let offsets = residual_stack(tape, params, &format!("coarse/block{b}"), feats, &topology.graphs[b])?;
        let moved = tape.add(verts, offsets)?;
        out.push(StageOutput { input: verts, output: moved, mesh: b });
        verts = moved;
    }
    Ok(out)
}

/// The coarse mesh for a set of posed pyramids.
pub fn coarse_generate(views: &[View], params: &ParamStore) -> Result<Mesh> {
    let net = Network::from_params(params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(&mut tape, v)).collect();
    let stages = coarse_on_tape(&mut tape, &bound, &net.topology, &vv)?;
    let last = stages.last().expect("coarse blocks");
    net.topology.output_mesh().with_vertices(tape.value(last.output).to_points()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{look_at, CameraIntrinsics};
    use crate::mdn::{init_params, ModelConfig};
    use crate::pooling::FeatureLevel;

    fn views(channels: [usize; 3]) -> Vec<View> {
        let k = CameraIntrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16).unwrap();
        (0..2)
            .map(|i| {
                let cam = look_at([0.0, 0.3, 2.0 - 4.0 * i as f64], [0.0; 3], [0.0, 1.0, 0.0], k).unwrap();
                let pyramid = channels
                    .iter()
                    .zip([1usize, 2, 4])
                    .map(|(&c, s)| {
                        let h = 16 / s;
                        let data = (0..c * h * h).map(|j| ((j * 7919) % 97) as f64 / 97.0).collect();
                        FeatureLevel { map: Tensor::new([c, h, h], data).unwrap(), stride: s }
                    })
                    .collect();
                View::new(cam, pyramid).unwrap()
            })
            .collect()
    }

    #[test]
    fn vertex_counts_from_level_two() {
        let t = CoarseTopology::new(2, 0.3).unwrap();
        let counts: Vec<usize> = t.meshes.iter().map(|m| m.num_vertices()).collect();
        assert_eq!(counts, vec![162, 642, 2562]);
        assert!(t.meshes.iter().all(|m| m.euler_characteristic() == 2));
    }

    #[test]
    fn zero_blocks_return_the_subdivided_ellipsoid() {
        let cfg = ModelConfig { backbone_channels: [2, 3, 4], coarse_width: 8, scoring_width: 8, coarse_level: 0, coarse_radius: 0.5 };
        let mut params = init_params(&cfg, 1).unwrap();
        let names: Vec<String> = params.names_with_prefix("coarse/").cloned().collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mesh = coarse_generate(&views(cfg.backbone_channels), &params).unwrap();
        let want = CoarseTopology::new(0, 0.5).unwrap();
        assert_eq!(mesh.num_vertices(), 162);
        assert_eq!(mesh.euler_characteristic(), 2);
        for (a, b) in mesh.vertices().iter().zip(want.output_mesh().vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trained_shape_stays_closed() {
        let cfg = ModelConfig { backbone_channels: [2, 3, 4], coarse_width: 8, scoring_width: 8, coarse_level: 0, ..Default::default() };
        let params = init_params(&cfg, 7).unwrap();
        let mesh = coarse_generate(&views(cfg.backbone_channels), &params).unwrap();
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.vertices().iter().all(|v| v.iter().all(|c| c.is_finite())));
    }
}
