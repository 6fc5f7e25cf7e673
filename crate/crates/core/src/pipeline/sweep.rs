use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_run, Gain, Metric, Qrels, Run};
use crate::lexical::{Document, Query};
use crate::rerank::{rerank, Scorer};

use super::fusion::{fuse_runs, FusionWeights, Normalization};
use super::PipelineError;

/// `0.1, 0.2, ..., 1.0`, each computed as `i / 10`.
pub fn default_alphas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// A development split: first-stage candidates plus what is needed to rescore
/// and judge them.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub name: String,
    pub bm25_run: Run,
    pub queries: HashMap<String, Query>,
    pub corpus: HashMap<String, Document>,
    pub qrels: Qrels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub alphas: Vec<f64>,
    pub objective: Metric,
    pub weights: FusionWeights,
    pub normalization: Normalization,
    pub rerank_k: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            alphas: default_alphas(),
            objective: Metric::Ndcg(10),
            weights: FusionWeights::default(),
            normalization: Normalization::MinmaxPerQuery,
            rerank_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Objective per dev set, keyed by dev set name.
    pub per_dev: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alpha_star: f64,
    pub objective: String,
    /// One row per grid value, in grid order.
    pub table: Vec<SweepRow>,
}

impl SweepResult {
    /// Every alpha for which scorers were built.
    pub fn evaluated_alphas(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.alpha).collect()
    }
}

/// Evaluates each alpha on every dev set and returns the argmax of the mean
/// objective; ties go to the smallest alpha.
///
/// `scorers_for(alpha)` must return one scorer per dev set, in order.
pub fn sweep_alpha<F>(
    dev_sets: &[DevSet],
    settings: &SweepSettings,
    mut scorers_for: F,
) -> Result<SweepResult, PipelineError>
where
    F: FnMut(f64) -> Result<Vec<Box<dyn Scorer>>, PipelineError>,
{
    if settings.alphas.is_empty() {
        return Err(PipelineError::EmptyGrid);
    }
    if let Some(&a) = settings.alphas.iter().find(|a| !a.is_finite()) {
        return Err(PipelineError::NonFiniteAlpha(a));
    }
    if dev_sets.is_empty() {
        return Err(PipelineError::NoDevSets);
    }
    let metric_name = settings.objective.to_string();
    let mut table = Vec::with_capacity(settings.alphas.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in &settings.alphas {
        let scorers = scorers_for(alpha)?;
        if scorers.len() != dev_sets.len() {
            return Err(PipelineError::Config(format!(
                "expected {} scorers for alpha {alpha}, got {}",
                dev_sets.len(),
                scorers.len()
            )));
        }
        let mut per_dev = BTreeMap::new();
        let mut total = 0.0;
        for (dev, scorer) in dev_sets.iter().zip(&scorers) {
            let reranked = rerank(
                scorer.as_ref(),
                &dev.bm25_run,
                &dev.queries,
                &dev.corpus,
                settings.rerank_k,
                "sweep",
            )?;
            let fused = fuse_runs(&dev.bm25_run, &reranked, settings.weights, settings.normalization)?;
            let report = evaluate_run(&fused, &dev.qrels, &[settings.objective], Gain::Linear)?;
            let value = report.aggregate[&metric_name];
            total += value;
            per_dev.insert(dev.name.clone(), value);
        }
        let mean = total / dev_sets.len() as f64;
        let better = match best {
            None => true,
            Some((a, v)) => mean > v || (mean == v && alpha < a),
        };
        if better {
            best = Some((alpha, mean));
        }
        table.push(SweepRow {
            alpha,
            per_dev,
            mean,
        });
    }
    Ok(SweepResult {
        alpha_star: best.expect("grid is non-empty").0,
        objective: metric_name,
        table,
    })
}
