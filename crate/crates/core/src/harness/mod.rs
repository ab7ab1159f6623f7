//! Training, evaluation, benchmarking, and attention dumps behind the `gloss`
//! command-line tool.

mod bench;
mod config;
mod dump;
mod eval;
mod optim;
mod train;

pub use bench::{bench_variant, bench_csv, BenchRow};
pub use config::{TrainConfig, TRAIN_KEYS};
pub use dump::dump_attention;
pub use eval::{evaluate, EvalReport, CAD_DELTA, ROUGE_BETA};
pub use optim::{Adam, Plateau};
pub use train::{resolve_model_config, train, train_epoch_losses, TrainOutcome};

use crate::data::DataError;
use crate::kv::KvError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Short category name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::Kv(_) => "config",
            Self::Data(DataError::Config(_)) => "config",
            Self::Data(DataError::Io(_)) | Self::Io(_) => "io",
            Self::Data(_) => "data",
            Self::Model(ModelError::Io(_)) => "io",
            Self::Model(_) => "model",
            Self::Metrics(_) => "metrics",
            Self::Objective(_) => "objective",
            Self::NotFound(_) => "not_found",
        }
    }
}
