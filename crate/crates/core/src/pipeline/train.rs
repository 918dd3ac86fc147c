//! The training driver: coarse stage alone first, then everything jointly.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::dataset::{Scene, Splits};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::mdn::{init_params, ForwardPass, ModelConfig, Network, RefineConfig, ViewInput};
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, AdamState, ParamStore, Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.p2mx";
pub const LOSS_FILE: &str = "loss.csv";

/// One row of the loss curve. Columns are summed over every supervised stage
/// output; `total` carries the loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub chamfer: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub normal: f64,
}

/// Per-step generator: independent of how many steps ran before.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 1);
    rng
}

fn is_model_param(name: &str) -> bool {
    !(name.starts_with("adam/") || name.starts_with("train/"))
}

/// The network weights of a checkpoint, without optimizer state.
pub fn model_params(checkpoint: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in checkpoint.iter().filter(|(n, _)| is_model_param(n)) {
        out.insert(name.clone(), t.clone());
    }
    out
}

/// Refinement settings stored alongside the weights, or the defaults.
pub fn refine_config_from_params(params: &ParamStore) -> RefineConfig {
    let d = RefineConfig::default();
    let iterations = params.get("meta/refine_iterations").map(|t| t.item() as usize).unwrap_or(d.iterations);
    let scales = params.get("meta/hypothesis_scales").map(|t| t.data().to_vec()).unwrap_or(d.scales);
    RefineConfig { iterations, scales }
}

pub struct Trainer {
    pub config: RunConfig,
    pub network: Network,
    pub params: ParamStore,
    pub adam: Adam,
    /// Index of the next step to run.
    pub step: usize,
    pub scenes: Vec<Scene>,
}

impl Trainer {
    /// Fresh parameters, or the state in `config.resume`.
    pub fn new(config: RunConfig, scenes: Vec<Scene>) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut adam = Adam::new(config.lr_phase1, config.weight_decay);
        adam.precision = config.precision;
        let (params, step) = match &config.resume {
            None => {
                let mut p = init_params(&config.model, config.seed)?;
                p.insert("meta/refine_iterations", Tensor::scalar(config.refine.iterations as f64));
                p.insert("meta/hypothesis_scales", Tensor::from_vec(config.refine.scales.clone()));
                p.round_to(config.precision);
                (p, 0)
            }
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                let step = ckpt.get("train/step")?.item() as usize;
                adam.state = adam_state(&ckpt)?;
                (model_params(&ckpt), step)
            }
        };
        let network = Network::from_params(&params)?;
        let want = ModelConfig { coarse_radius: config.model.coarse_radius as f32 as f64, ..config.model.clone() };
        if network.config != want {
            return Err(Error::Config("checkpoint network differs from the configured one".into()));
        }
        Ok(Trainer { config, network, params, adam, step, scenes })
    }

    pub fn phase1_steps(&self) -> usize {
        self.config.phase1_epochs() * self.scenes.len()
    }

    pub fn total_steps(&self) -> usize {
        let full = (self.config.phase1_epochs() + self.config.phase2_epochs()) * self.scenes.len();
        if self.config.max_steps > 0 { full.min(self.config.max_steps) } else { full }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn scene_for(&self, step: usize) -> usize {
        let n = self.scenes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, step / n));
        order[step % n]
    }

    /// Runs the next step and updates the parameters.
    pub fn step_once(&mut self) -> Result<StepLosses> {
        let step = self.step;
        let phase2 = step >= self.phase1_steps();
        let mut rng = step_rng(self.config.seed, step);
        let scene = &self.scenes[self.scene_for(step)];
        let k = self.config.views_per_step.min(scene.views.len());
        let mut chosen = index::sample(&mut rng, scene.views.len(), k).into_vec();
        chosen.sort_unstable();
        let inputs: Vec<ViewInput> = chosen.iter().map(|&i| scene.views[i].clone()).collect();

        let mut tape = Tape::new();
        let trainable = |name: &str| {
            if phase2 { ["backbone/", "coarse/", "mdn/"].iter().any(|p| name.starts_with(p)) } else { name.starts_with("coarse/") }
        };
        let bound = self.params.bind(&mut tape, trainable);
        let views = self.network.views_on_tape(&mut tape, &bound, &inputs)?;
        let refine = if phase2 {
            self.config.refine.clone()
        } else {
            RefineConfig { iterations: 0, ..self.config.refine.clone() }
        };
        let pass = self.network.forward(&mut tape, &bound, &views, &refine)?;

        let mut terms = Vec::new();
        for st in pass.stages() {
            let mesh = &self.network.topology.meshes[st.mesh];
            terms.push(total_loss(&mut tape, st.input, st.output, mesh, &scene.gt, &self.config.loss, &mut rng)?);
        }
        let mut total = terms[0].total;
        for t in &terms[1..] {
            total = tape.add(total, t.total)?;
        }
        let sum = |f: &dyn Fn(&crate::loss::LossTerms) -> Var| terms.iter().map(|t| tape.value(f(t)).item()).sum::<f64>();
        let row = StepLosses {
            step,
            total: tape.value(total).item(),
            chamfer: sum(&|t| t.chamfer),
            edge: sum(&|t| t.edge),
            laplacian: sum(&|t| t.laplacian),
            normal: sum(&|t| t.normal),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step}; first non-finite tensor: {}",
                first_non_finite(&self.params, &tape, &pass)
            )));
        }

        let names: Vec<(String, Var)> =
            bound.iter().filter(|(n, _)| trainable(n)).map(|(n, v)| (n.clone(), *v)).collect();
        let mut grads = tape.backward(total)?;
        let updates: Vec<(String, Tensor)> = names
            .into_iter()
            .filter_map(|(n, v)| grads.take(v).map(|g| (n, g)))
            .collect();
        self.adam.lr = if phase2 { self.config.lr_phase2 } else { self.config.lr_phase1 };
        self.adam.step(&mut self.params, updates.iter().map(|(n, g)| (n.as_str(), g.clone())))?;
        self.step += 1;
        Ok(row)
    }

    /// Weights, optimizer moments and the step counter in one store.
    pub fn checkpoint(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (name, m) in &self.adam.state.m {
            out.insert(format!("adam/m/{name}"), m.clone());
        }
        for (name, v) in &self.adam.state.v {
            out.insert(format!("adam/v/{name}"), v.clone());
        }
        out.insert("adam/step", Tensor::scalar(self.adam.state.step as f64));
        out.insert("train/step", Tensor::scalar(self.step as f64));
        out
    }
}

fn adam_state(ckpt: &ParamStore) -> Result<AdamState> {
    let mut state = AdamState { step: ckpt.get("adam/step")?.item() as u64, ..Default::default() };
    for (name, t) in ckpt.iter() {
        if let Some(p) = name.strip_prefix("adam/m/") {
            state.m.insert(p.to_string(), t.clone());
        } else if let Some(p) = name.strip_prefix("adam/v/") {
            state.v.insert(p.to_string(), t.clone());
        }
    }
    Ok(state)
}

fn first_non_finite(params: &ParamStore, tape: &Tape, pass: &ForwardPass) -> String {
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        return format!("parameter `{name}`");
    }
    for (b, st) in pass.coarse.iter().enumerate() {
        if !tape.value(st.output).is_finite() {
            return format!("coarse block {b} output");
        }
    }
    for (i, st) in pass.refined.iter().enumerate() {
        if !tape.value(st.output).is_finite() {
            return format!("refinement iteration {i} output");
        }
    }
    "loss terms".into()
}

/// Trains per `config`, writing the checkpoint and the loss curve into
/// `config.out_dir`. Returns the checkpoint path.
pub fn train(config: &RunConfig) -> Result<PathBuf> {
    train_with(config, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(config: &RunConfig, mut on_step: impl FnMut(&StepLosses)) -> Result<PathBuf> {
    let splits = Splits::open(&config.dataset, &config.train_split, &config.test_split)?;
    let scenes = splits.load(&splits.train)?;
    let mut trainer = Trainer::new(config.clone(), scenes)?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = loss_writer(&out.join(LOSS_FILE), trainer.step > 0)?;
    while !trainer.is_done() {
        let row = trainer.step_once()?;
        csv.serialize(row).map_err(|e| csv_err(out, e))?;
        on_step(&row);
    }
    csv.flush().map_err(|e| Error::io(out.join(LOSS_FILE), e))?;
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &trainer.checkpoint())?;
    Ok(path)
}

fn csv_err(dir: &Path, e: csv::Error) -> Error {
    Error::io(dir.join(LOSS_FILE), std::io::Error::other(e))
}

fn loss_writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let existing = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!existing).from_writer(file))
}

/// Reads a loss curve written by [`train`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<StepLosses>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format { path: path.display().to_string(), msg: format!("bad column {i}") })
            };
            Ok(StepLosses {
                step: f(0)? as usize,
                total: f(1)?,
                chamfer: f(2)?,
                edge: f(3)?,
                laplacian: f(4)?,
                normal: f(5)?,
            })
        })
        .collect()
}
