//! Task arithmetic for zero-shot retrieval.
//!
//! The crate covers the whole procedure at desk scale: checkpoint I/O in the
//! safetensors container ([`tensor_store`]), task-vector extraction and
//! merging ([`task_arith`]), BM25 first-stage retrieval ([`lexical`]),
//! second-stage re-ranking ([`rerank`]), evaluation and significance testing
//! ([`eval`]), and the orchestration tying them together ([`pipeline`]).
//! [`synth`] generates a small seeded world for fixtures and benchmarks.

pub mod eval;
pub mod lexical;
pub mod pipeline;
pub mod rerank;
pub mod synth;
pub mod task_arith;
pub mod tensor_store;

pub use eval::{EvalError, EvalReport, Metric, Qrels, Run};
pub use lexical::{Bm25Params, Document, IndexError, InvertedIndex, Query};
pub use pipeline::{ExperimentConfig, FusionWeights, Normalization, PipelineError};
pub use rerank::{ExternalScores, RerankError, Scorer, ToyBiEncoder};
pub use task_arith::{MergeError, MergeSpec, MismatchPolicy, TaskVector};
pub use tensor_store::{Checkpoint, DType, TensorEntry, TensorError};

/// Any error produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Wraps the error with the name of the stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for numerical or contract violations, as opposed to bad input data.
    pub fn is_contract_violation(&self) -> bool {
        match self {
            Error::Merge(e) => !matches!(e, MergeError::Tensor(_) | MergeError::UnknownPolicy(_)),
            Error::Eval(e) => eval_contract(e),
            Error::Index(e) => matches!(e, IndexError::InvalidParams { .. }),
            Error::Pipeline(e) => match e {
                PipelineError::InvalidWeights { .. }
                | PipelineError::CandidateMismatch(_)
                | PipelineError::EmptyGrid
                | PipelineError::NoDevSets
                | PipelineError::NonFiniteAlpha(_) => true,
                PipelineError::Eval(e) => eval_contract(e),
                _ => false,
            },
            Error::Stage { source, .. } => source.is_contract_violation(),
            Error::Tensor(_) | Error::Rerank(_) | Error::Io { .. } => false,
        }
    }
}

fn eval_contract(e: &EvalError) -> bool {
    match e {
        EvalError::LengthMismatch(..) | EvalError::TooFewSamples(_) | EvalError::InvalidPValue(_) => true,
        EvalError::InFile { source, .. } => eval_contract(source),
        _ => false,
    }
}
