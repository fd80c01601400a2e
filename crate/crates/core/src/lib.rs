//! Continual self-supervised learning with cross-task data mixup and
//! cross-model feature mixup.

pub mod autodiff;
pub mod buffer;
pub mod config;
pub mod confusion;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mixup;
pub mod models;
pub mod objective;
pub mod optim;
pub mod params;
pub mod plot;
pub mod rng;
pub mod sweep;
pub mod trainer;

pub use autodiff::Mat;
pub use config::{preset, preset_names, toy_config, ExperimentConfig};
pub use confusion::{ConfusionConfig, ConfusionMode, CurveRecord, Learner};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use experiment::{ExperimentOutcome, ExperimentReport};
pub use losses::{SslKind, SslLossSpec};
pub use objective::{LossBundle, Strategy};
pub use sweep::{SweepAxis, SweepCell};
pub use trainer::{RunOptions, RunOutcome};
