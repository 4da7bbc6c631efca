//! Reinforcement-learning architecture search: the weighted-product reward,
//! an LSTM controller trained with PPO, pluggable evaluators, and the
//! sampling loop with its history file.

mod controller;
mod evaluator;
mod history;
mod reward;
mod run;

pub use controller::{Controller, ControllerConfig, LossStats, PpoConfig, PpoDiagnostics, Sample, Trajectory};
pub use evaluator::{accuracy, Evaluator, ProxyConfig, ProxyEvaluator, SurrogateEvaluator, TrainReport};
pub use history::{HistoryRow, HistoryWriter, SearchHistory, HISTORY_HEADER};
pub use reward::{reward, RewardConfig};
pub use run::{
    export_topk, ranked_document, run_search, top_k, RankedArchitecture, SearchConfig, SearchOutcome, THREADS_ENV,
};

use thiserror::Error;

use crate::archspace::ArchError;
use crate::nn::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed history: {0}")]
    Format(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
