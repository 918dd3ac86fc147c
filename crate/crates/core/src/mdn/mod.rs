//! The deformation network: a small CNN backbone, residual graph
//! convolutions, hypothesis scoring with soft-argmax, and the coarse stage
//! that grows an ellipsoid into a first guess.
//!
//! All learnable state lives in a [`ParamStore`] under `backbone/*`,
//! `coarse/*` and `mdn/*`. Architecture hyper-parameters are stored next to
//! the weights under `meta/*` so a checkpoint fully describes its network.

mod backbone;
mod coarse;
mod gcn;
mod reasoning;

pub use backbone::{backbone_on_tape, backbone_pyramid, image_tensor, BACKBONE_STRIDES};
pub use coarse::{coarse_generate, coarse_on_tape, CoarseTopology, COARSE_BLOCKS};
pub use gcn::{graph_conv, init_graph_conv, residual_stack, score_hypotheses, scoring_logits, STACK_LAYERS};
pub use reasoning::{
    deformation_reasoning, fan_positions_on_tape, mdn_iteration, mdn_refine, mdn_refine_steps, soft_argmax_on_tape,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pooling::{node_feature_dim, View, ViewVars};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Hypothesis scale used when none is configured.
pub const DEFAULT_SCALE: f64 = 0.02;

/// Architecture of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_channels: [usize; 3],
    pub scoring_width: usize,
    pub coarse_width: usize,
    /// Icosphere level of the starting ellipsoid.
    pub coarse_level: usize,
    pub coarse_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: [16, 32, 64],
            scoring_width: 192,
            coarse_width: 64,
            coarse_level: 2,
            coarse_radius: 0.3,
        }
    }
}

impl ModelConfig {
    /// Width of the node features read by the scoring network (all levels).
    pub fn scoring_input(&self) -> usize {
        node_feature_dim(&self.backbone_channels)
    }

    /// Width of the node features read by the coarse stage (two coarsest levels).
    pub fn coarse_input(&self) -> usize {
        node_feature_dim(&self.backbone_channels[1..])
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.contains(&0) || self.scoring_width == 0 || self.coarse_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.coarse_level > 3 {
            return Err(Error::Config(format!("coarse_level {} outside 0..=3", self.coarse_level)));
        }
        if !(self.coarse_radius > 0.0) {
            return Err(Error::Config(format!("coarse_radius must be positive, got {}", self.coarse_radius)));
        }
        Ok(())
    }

    /// Reads the `meta/*` entries written by [`init_params`].
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            let t = params.get(name)?;
            if t.numel() != 1 {
                return Err(Error::shape("checkpoint meta", &[t.shape()]));
            }
            Ok(t.item())
        };
        let ch = params.get("meta/backbone_channels")?;
        if ch.numel() != 3 {
            return Err(Error::shape("checkpoint meta", &[ch.shape()]));
        }
        let d = ch.data();
        let cfg = ModelConfig {
            backbone_channels: [d[0] as usize, d[1] as usize, d[2] as usize],
            scoring_width: scalar("meta/scoring_width")? as usize,
            coarse_width: scalar("meta/coarse_width")? as usize,
            coarse_level: scalar("meta/coarse_level")? as usize,
            coarse_radius: scalar("meta/coarse_radius")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_meta(&self, params: &mut ParamStore) {
        let c = self.backbone_channels;
        params.insert("meta/backbone_channels", Tensor::from_vec(c.iter().map(|&v| v as f64).collect()));
        params.insert("meta/scoring_width", Tensor::scalar(self.scoring_width as f64));
        params.insert("meta/coarse_width", Tensor::scalar(self.coarse_width as f64));
        params.insert("meta/coarse_level", Tensor::scalar(self.coarse_level as f64));
        // Stored as f32 like every checkpoint value, so a reloaded model is identical.
        params.insert("meta/coarse_radius", Tensor::scalar(self.coarse_radius as f32 as f64));
    }
}

/// Iterative refinement settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Hypothesis scale per iteration; the last entry repeats if there are fewer.
    pub scales: Vec<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { iterations: 3, scales: vec![DEFAULT_SCALE; 3] }
    }
}

impl RefineConfig {
    pub fn scale(&self, iteration: usize) -> f64 {
        self.scales.get(iteration).or(self.scales.last()).copied().unwrap_or(DEFAULT_SCALE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("hypothesis scales must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh parameters for `cfg`: Glorot-uniform weights, zero biases.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    cfg.write_meta(&mut params);
    backbone::init(&mut params, &mut rng, cfg.backbone_channels);
    for b in 0..COARSE_BLOCKS {
        gcn::init_stack(&mut params, &mut rng, &format!("coarse/block{b}"), cfg.coarse_input(), cfg.coarse_width, 3);
    }
    gcn::init_stack(&mut params, &mut rng, "mdn", cfg.scoring_input(), cfg.scoring_width, 1);
    Ok(params)
}

/// A network ready to run: its configuration plus precomputed coarse topology.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub topology: CoarseTopology,
}

/// Vertex sets recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Output of each coarse block, with the block's input vertices.
    pub coarse: Vec<StageOutput>,
    /// Output of each refinement iteration, with its input vertices.
    pub refined: Vec<StageOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub input: Var,
    pub output: Var,
    /// Index into [`CoarseTopology::meshes`] giving the faces.
    pub mesh: usize,
}

impl ForwardPass {
    pub fn stages(&self) -> impl Iterator<Item = &StageOutput> {
        self.coarse.iter().chain(&self.refined)
    }

    pub fn last(&self) -> &StageOutput {
        self.refined.last().or(self.coarse.last()).expect("at least one stage")
    }
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let topology = CoarseTopology::new(config.coarse_level, config.coarse_radius)?;
        Ok(Network { config, topology })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Self::new(ModelConfig::from_params(params)?)
    }

    /// Runs the backbone for every image and wraps the pyramids as tape views.
    pub fn views_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: &[ViewInput],
    ) -> Result<Vec<ViewVars>> {
        inputs
            .iter()
            .map(|input| match input {
                ViewInput::Image { camera, image } => {
                    let img = tape.constant(image.clone());
                    let levels = backbone_on_tape(tape, params, img)?;
                    Ok(ViewVars { camera: *camera, levels })
                }
                ViewInput::Pyramid(view) => {
                    self.check_view(view)?;
                    Ok(ViewVars::from_view(tape, view))
                }
            })
            .collect()
    }

    fn check_view(&self, view: &View) -> Result<()> {
        let got: Vec<usize> = view.pyramid.iter().map(|l| l.map.shape()[0]).collect();
        if got != self.config.backbone_channels {
            return Err(Error::invalid(format!(
                "precomputed pyramid has channels {got:?}, network expects {:?}",
                self.config.backbone_channels
            )));
        }
        Ok(())
    }

    /// Coarse stage followed by `refine.iterations` rounds of deformation reasoning.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        views: &[ViewVars],
        refine: &RefineConfig,
    ) -> Result<ForwardPass> {
        let coarse = coarse_on_tape(tape, params, &self.topology, views)?;
        let mut refined = Vec::with_capacity(refine.iterations);
        let mesh = COARSE_BLOCKS - 1;
        let mut verts = coarse.last().expect("coarse blocks").output;
        for it in 0..refine.iterations {
            let next = mdn_iteration(tape, params, verts, views, refine.scale(it))?;
            refined.push(StageOutput { input: verts, output: next, mesh });
            verts = next;
        }
        Ok(ForwardPass { coarse, refined })
    }

    /// Pyramids for images, using the backbone weights in `params`.
    pub fn pyramids(&self, params: &ParamStore, inputs: &[ViewInput]) -> Result<Vec<View>> {
        inputs
            .iter()
            .map(|input| match input {
                ViewInput::Image { camera, image } => View::new(*camera, backbone_pyramid(params, image)?),
                ViewInput::Pyramid(view) => {
                    self.check_view(view)?;
                    Ok(view.clone())
                }
            })
            .collect()
    }
}

/// A view as stored on disk: either an image for the backbone or a precomputed pyramid.
#[derive(Clone, Debug)]
pub enum ViewInput {
    Image { camera: crate::camera::Camera, image: Tensor },
    Pyramid(View),
}

impl ViewInput {
    pub fn camera(&self) -> &crate::camera::Camera {
        match self {
            ViewInput::Image { camera, .. } => camera,
            ViewInput::Pyramid(v) => &v.camera,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trips_through_params() {
        let cfg = ModelConfig { coarse_level: 1, scoring_width: 8, coarse_width: 8, ..Default::default() };
        let params = init_params(&cfg, 3).unwrap();
        let back = ModelConfig::from_params(&params).unwrap();
        assert_eq!(back.backbone_channels, cfg.backbone_channels);
        assert_eq!(back.scoring_width, 8);
        assert_eq!(back.coarse_level, 1);
        assert!((back.coarse_radius - 0.3).abs() < 1e-7);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig { scoring_width: 8, coarse_width: 8, ..Default::default() };
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 10).unwrap());
    }

    #[test]
    fn parameter_namespaces() {
        let params = init_params(&ModelConfig::default(), 0).unwrap();
        for name in params.names() {
            assert!(
                ["backbone/", "coarse/", "mdn/", "meta/"].iter().any(|p| name.starts_with(p)),
                "{name}"
            );
        }
        assert_eq!(params.get("mdn/gc1/w_self").unwrap().shape(), &[339, 192]);
        assert_eq!(params.get("mdn/gc6/w_self").unwrap().shape(), &[192, 1]);
    }

    #[test]
    fn scale_schedule_repeats_last() {
        let r = RefineConfig { iterations: 4, scales: vec![0.03, 0.01] };
        assert_eq!([r.scale(0), r.scale(1), r.scale(3)], [0.03, 0.01, 0.01]);
    }
}
