//! End-to-end orchestration: score fusion, the α sweep, and experiment runs.

mod config;
mod experiment;
mod fusion;
mod sweep;

pub use config::{
    DatasetConfig, DevConfig, ExperimentConfig, FusionConfig, ModelConfig, SignificanceConfig,
    SweepConfig, TuneConfig,
};
pub use experiment::{
    run_experiment, sweep_from_config, DatasetReport, ExperimentReport, Manifest, RunOverrides,
    VariantReport, VARIANTS,
};
pub use fusion::{
    fuse_runs, tune_fusion, tune_fusion_multi, unit_grid, FusionGridPoint, FusionTuning,
    FusionWeights, Normalization,
};
pub use sweep::{default_alphas, sweep_alpha, DevSet, SweepResult, SweepRow, SweepSettings};

use crate::eval::EvalError;
use crate::rerank::RerankError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("fusion weights ({lambda_bm25}, {lambda_llm}) must both lie in [0, 1]")]
    InvalidWeights { lambda_bm25: f64, lambda_llm: f64 },
    #[error("candidate sets differ for query `{0}`")]
    CandidateMismatch(String),
    #[error("search grid is empty")]
    EmptyGrid,
    #[error("no development sets available")]
    NoDevSets,
    #[error("alpha {0} is not finite")]
    NonFiniteAlpha(f64),
    #[error("no scorer input for alpha {alpha} on dataset `{dataset}`")]
    MissingAlphaInput { alpha: f64, dataset: String },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
}
