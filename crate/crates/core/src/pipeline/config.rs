//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{LossOptions, LossWeights};
use crate::mdn::{ModelConfig, RefineConfig};
use crate::tensor::Precision;

/// Parsed `key = value` lines. Every key must be consumed, or [`KeyValues::finish`] fails.
#[derive(Debug)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { path: source.to_string(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err("empty key".into()));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(parse_err(format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues { source: source.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse { path: self.source.clone(), line, msg }
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| self.err(line, format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| self.err(line, format!("bad list item `{s}` for `{key}`"))))
                .collect(),
        }
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse { path: self.source, line, msg: format!("unknown key `{k}`") }),
        }
    }
}

/// Everything `p2mx train` reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Multiplies both epoch counts (rounded), for short desk runs.
    pub epoch_scale: f64,
    /// Stop after this many steps in total; 0 runs the full schedule.
    pub max_steps: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub weight_decay: f64,
    pub views_per_step: usize,
    pub loss: LossOptions,
    pub refine: RefineConfig,
    pub model: ModelConfig,
    pub precision: Precision,
    pub dataset: PathBuf,
    pub train_split: String,
    pub test_split: String,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs_phase1: 30,
            epochs_phase2: 20,
            epoch_scale: 1.0,
            max_steps: 0,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            weight_decay: 0.0,
            views_per_step: 3,
            loss: LossOptions::default(),
            refine: RefineConfig::default(),
            model: ModelConfig::default(),
            precision: Precision::F32,
            dataset: PathBuf::from("data"),
            train_split: "train.txt".into(),
            test_split: "test.txt".into(),
            out_dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!("precision must be f32 or f64, got `{other}`"))),
    }
}

impl RunConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, source)?;
        let d = RunConfig::default();
        let path = |kv: &mut KeyValues, key: &str, default: PathBuf| -> PathBuf {
            let p = kv.take_str(key).map(PathBuf::from).unwrap_or(default);
            if p.is_absolute() { p } else { base.join(p) }
        };
        let dm = d.model.clone();
        let channels: Vec<usize> = kv.take_list("backbone_channels", dm.backbone_channels.to_vec())?;
        let backbone_channels: [usize; 3] = channels
            .try_into()
            .map_err(|_| Error::Config("backbone_channels needs exactly three values".into()))?;
        let cfg = RunConfig {
            seed: kv.take("seed", d.seed)?,
            epochs_phase1: kv.take("epochs_phase1", d.epochs_phase1)?,
            epochs_phase2: kv.take("epochs_phase2", d.epochs_phase2)?,
            epoch_scale: kv.take("epoch_scale", d.epoch_scale)?,
            max_steps: kv.take("max_steps", d.max_steps)?,
            lr_phase1: kv.take("lr_phase1", d.lr_phase1)?,
            lr_phase2: kv.take("lr_phase2", d.lr_phase2)?,
            weight_decay: kv.take("weight_decay", d.weight_decay)?,
            views_per_step: kv.take("views_per_step", d.views_per_step)?,
            loss: LossOptions {
                weights: LossWeights {
                    chamfer: kv.take("w_chamfer", d.loss.weights.chamfer)?,
                    edge: kv.take("w_edge", d.loss.weights.edge)?,
                    laplacian: kv.take("w_laplacian", d.loss.weights.laplacian)?,
                    normal: kv.take("w_normal", d.loss.weights.normal)?,
                },
                samples: kv.take("resample_points", d.loss.samples)?,
                squared: kv.take("squared_chamfer", d.loss.squared)?,
            },
            refine: RefineConfig {
                iterations: kv.take("refine_iterations", d.refine.iterations)?,
                scales: kv.take_list("hypothesis_scales", d.refine.scales.clone())?,
            },
            model: ModelConfig {
                backbone_channels,
                scoring_width: kv.take("scoring_width", dm.scoring_width)?,
                coarse_width: kv.take("coarse_width", dm.coarse_width)?,
                coarse_level: kv.take("coarse_level", dm.coarse_level)?,
                coarse_radius: kv.take("coarse_radius", dm.coarse_radius)?,
            },
            precision: parse_precision(&kv.take("precision", "f32".to_string())?)?,
            dataset: path(&mut kv, "dataset", d.dataset),
            train_split: kv.take("train_split", d.train_split)?,
            test_split: kv.take("test_split", d.test_split)?,
            out_dir: path(&mut kv, "out_dir", d.out_dir),
            resume: kv.take_str("resume").filter(|s| !s.is_empty()).map(|s| {
                let p = PathBuf::from(s);
                if p.is_absolute() { p } else { base.join(p) }
            }),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        if !(self.epoch_scale >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("epoch_scale and weight_decay must be nonnegative".into()));
        }
        if self.refine.scales.is_empty() {
            return Err(Error::Config("hypothesis_scales must list at least one value".into()));
        }
        self.loss.weights.validate()?;
        self.refine.validate()?;
        self.model.validate()
    }

    pub fn phase1_epochs(&self) -> usize {
        (self.epochs_phase1 as f64 * self.epoch_scale).round() as usize
    }

    pub fn phase2_epochs(&self) -> usize {
        (self.epochs_phase2 as f64 * self.epoch_scale).round() as usize
    }
}
