//! Prediction with a trained checkpoint, evaluation reports and the refine command.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::{load_views, read_cloud, Scene, Splits};
use super::train::{model_params, refine_config_from_params};
use crate::error::{Error, Result};
use crate::loss::{chamfer, resample_mesh, GtCloud};
use crate::mdn::{coarse_generate, mdn_refine_steps, Network, RefineConfig, ViewInput};
use crate::mesh::{load_obj, save_obj, Mesh};
use crate::metrics::{f_score, MetricConfig};
use crate::pooling::View;
use crate::tensor::{load_checkpoint, ParamStore};

/// Seed of the point sampler used for metric clouds.
pub const METRIC_SEED: u64 = 0x5eed;

/// A trained network ready for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore,
    pub refine: RefineConfig,
}

/// The coarse mesh and the mesh after every refinement iteration.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub coarse: Mesh,
    pub refined: Vec<Mesh>,
}

impl Prediction {
    pub fn last(&self) -> &Mesh {
        self.refined.last().unwrap_or(&self.coarse)
    }
}

impl Model {
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let network = Network::from_params(&params)?;
        let refine = refine_config_from_params(&params);
        refine.validate()?;
        Ok(Model { network, params, refine })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(model_params(&load_checkpoint(path)?))
    }

    pub fn pyramids(&self, inputs: &[ViewInput]) -> Result<Vec<View>> {
        self.network.pyramids(&self.params, inputs)
    }

    pub fn predict(&self, inputs: &[ViewInput]) -> Result<Prediction> {
        let views = self.pyramids(inputs)?;
        let coarse = coarse_generate(&views, &self.params)?;
        let refined = mdn_refine_steps(&coarse, &views, &self.params, &self.refine)?;
        Ok(Prediction { coarse, refined })
    }

    /// Refines an arbitrary mesh; returns the mesh after each iteration.
    pub fn refine(&self, mesh: &Mesh, inputs: &[ViewInput], iterations: usize) -> Result<Vec<Mesh>> {
        let views = self.pyramids(inputs)?;
        let config = RefineConfig { iterations, ..self.refine.clone() };
        mdn_refine_steps(mesh, &views, &self.params, &config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub cd: f64,
    pub f_tau: f64,
    pub f_2tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// Scores `pred` against a ground-truth cloud using `metric.samples` surface samples.
pub fn evaluate_mesh(scene_id: &str, pred: &Mesh, gt: &GtCloud, metric: &MetricConfig) -> Result<SceneReport> {
    metric.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(METRIC_SEED);
    let cloud = resample_mesh(pred, metric.samples, &mut rng)?;
    let s = f_score(&cloud, &gt.points, metric.tau)?;
    Ok(SceneReport {
        scene_id: scene_id.to_string(),
        cd: chamfer(&cloud, &gt.points)?,
        f_tau: s.f_tau,
        f_2tau: s.f_2tau,
        precision: s.precision,
        recall: s.recall,
        n_pred: cloud.len(),
        n_gt: gt.points.len(),
    })
}

/// Per-scene rows in scene-id order, followed by a `mean` row.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub tau: f64,
    pub samples: usize,
    pub views: Option<usize>,
    pub scenes: Vec<SceneReport>,
}

impl Report {
    pub fn new(metric: &MetricConfig, views: Option<usize>, mut scenes: Vec<SceneReport>) -> Self {
        scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        Report { tau: metric.tau, samples: metric.samples, views, scenes }
    }

    pub fn mean(&self) -> SceneReport {
        let n = self.scenes.len().max(1) as f64;
        let avg = |f: fn(&SceneReport) -> f64| self.scenes.iter().map(f).sum::<f64>() / n;
        let avg_n = |f: fn(&SceneReport) -> usize| (self.scenes.iter().map(f).sum::<usize>() as f64 / n).round() as usize;
        SceneReport {
            scene_id: "mean".into(),
            cd: avg(|r| r.cd),
            f_tau: avg(|r| r.f_tau),
            f_2tau: avg(|r| r.f_2tau),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            n_pred: avg_n(|r| r.n_pred),
            n_gt: avg_n(|r| r.n_gt),
        }
    }

    /// All rows including the mean.
    pub fn rows(&self) -> Vec<SceneReport> {
        let mut rows = self.scenes.clone();
        rows.push(self.mean());
        rows
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out {
            tau: f64,
            samples: usize,
            views: Option<usize>,
            rows: Vec<SceneReport>,
        }
        let out = Out { tau: self.tau, samples: self.samples, views: self.views, rows: self.rows() };
        serde_json::to_string_pretty(&out).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate_scene(model: &Model, scene: &Scene, metric: &MetricConfig, views: Option<usize>) -> Result<SceneReport> {
    let pred = model.predict(scene.first_views(views))?;
    evaluate_mesh(&scene.id, pred.last(), &scene.gt, metric)
}

/// Evaluates every test scene of `data` (every listed scene when the test list is empty).
pub fn evaluate(model: &Model, data: &Path, metric: &MetricConfig, views: Option<usize>) -> Result<Report> {
    metric.validate()?;
    if views == Some(0) {
        return Err(Error::Config("--views must be at least 1".into()));
    }
    let splits = Splits::open(data, "train.txt", "test.txt")?;
    let ids = if splits.test.is_empty() { &splits.train } else { &splits.test };
    if ids.is_empty() {
        return Err(Error::Config(format!("no scenes listed under {}", data.display())));
    }
    let rows = ids
        .iter()
        .map(|id| evaluate_scene(model, &Scene::load(&data.join(id))?, metric, views))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report::new(metric, views, rows))
}

/// Refines the OBJ at `mesh_path` with the views of `scene_dir` and writes the
/// result to `out`. Returns the Chamfer distance to the scene's ground truth
/// before refinement and after every iteration, if the scene has one.
pub fn refine_mesh_file(
    mesh_path: &Path,
    scene_dir: &Path,
    checkpoint: &Path,
    iterations: usize,
    out: &Path,
) -> Result<Option<Vec<f64>>> {
    let mesh = load_obj(mesh_path)?;
    let cameras = scene_dir.join("cameras.json");
    if !cameras.exists() {
        return Err(Error::Config(format!("missing camera file {}", cameras.display())));
    }
    let inputs = load_views(scene_dir)?;
    let model = Model::load(checkpoint)?;
    let steps = model.refine(&mesh, &inputs, iterations)?;
    save_obj(steps.last().unwrap_or(&mesh), out)?;

    let cloud = scene_dir.join("gt_cloud.xyz");
    if !cloud.exists() {
        return Ok(None);
    }
    let gt = read_cloud(&cloud)?;
    let metric = MetricConfig::default();
    std::iter::once(&mesh)
        .chain(steps.iter())
        .map(|m| evaluate_mesh("", m, &gt, &metric).map(|r| r.cd))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}
