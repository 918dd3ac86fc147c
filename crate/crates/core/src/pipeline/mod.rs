//! Datasets, configuration, training and evaluation.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod synth;
pub mod train;

pub use config::{KeyValues, RunConfig};
pub use dataset::{load_views, read_cloud, write_cloud, Scene, SceneMeta, Splits};
pub use evaluate::{evaluate, evaluate_mesh, refine_mesh_file, Model, Prediction, Report, SceneReport};
pub use synth::{synth_dataset, Family, SynthSpec};
pub use train::{read_loss_csv, train, train_with, StepLosses, Trainer, CHECKPOINT_FILE, LOSS_FILE};
