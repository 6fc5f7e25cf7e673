//! Run and qrels I/O, ranking metrics, and paired significance testing.

mod metrics;
mod stats;
mod trec;

use std::path::Path;

pub use metrics::{
    average_precision_at_k, evaluate_run, ndcg_at_k, parse_metric_list, precision_at_k,
    EvalReport, Gain, Metric,
};
pub use stats::{
    bonferroni, ln_beta, ln_gamma, paired_t_test, regularized_incomplete_beta,
    student_t_two_sided, Adjusted, TTest,
};
pub use trec::{sort_ranking, LoadedQrels, Qrels, Run};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("qrels contain no judgments")]
    EmptyQrels,
    #[error("run shares no query with the judged (relevant-bearing) qrels queries")]
    NoOverlap,
    #[error("unknown metric `{0}` (expected P@k, NDCG@k or MAP@k)")]
    UnknownMetric(String),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("a paired t-test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
}

impl EvalError {
    fn parse(line: usize, message: String) -> Self {
        EvalError::Parse { line, message }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn in_file(self, path: &Path) -> Self {
        EvalError::InFile {
            path: path.display().to_string(),
            source: Box::new(self),
        }
    }
}

/// One experimental run compared against one baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub metric: String,
    pub mean_experimental: f64,
    pub mean_baseline: f64,
    pub t: f64,
    pub df: usize,
    pub p_two_sided: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Tests `experimental` against every baseline on `metric`, Bonferroni-corrected
/// over the number of baselines.
pub fn compare_runs(
    experimental: &Run,
    baselines: &[(&str, &Run)],
    qrels: &Qrels,
    metric: Metric,
    family_alpha: f64,
) -> Result<Vec<Comparison>, EvalError> {
    let exp = evaluate_run(experimental, qrels, &[metric], Gain::Linear)?;
    let exp_values: Vec<f64> = exp.metric_values(&metric).into_iter().map(|(_, v)| v).collect();
    let mut partial = Vec::new();
    for (name, run) in baselines {
        let base = evaluate_run(run, qrels, &[metric], Gain::Linear)?;
        // both reports cover the same judged queries in the same order
        let base_values: Vec<f64> = base.metric_values(&metric).into_iter().map(|(_, v)| v).collect();
        let test = paired_t_test(&exp_values, &base_values)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        partial.push((name.to_string(), mean(&exp_values), mean(&base_values), test));
    }
    let ps: Vec<f64> = partial.iter().map(|p| p.3.p_two_sided).collect();
    let adjusted = bonferroni(&ps, family_alpha)?;
    Ok(partial
        .into_iter()
        .zip(adjusted)
        .map(|((baseline, me, mb, test), adj)| Comparison {
            baseline,
            metric: metric.to_string(),
            mean_experimental: me,
            mean_baseline: mb,
            t: test.t,
            df: test.df,
            p_two_sided: test.p_two_sided,
            p_adjusted: adj.p_adjusted,
            significant: adj.significant,
        })
        .collect())
}
