use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_run, Gain, Metric, Qrels, Run};

use super::PipelineError;

/// Interpolation weights for first-stage and re-ranker scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct FusionWeights {
    lambda_bm25: f64,
    lambda_llm: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    lambda_bm25: f64,
    lambda_llm: f64,
}

impl TryFrom<RawWeights> for FusionWeights {
    type Error = PipelineError;

    fn try_from(raw: RawWeights) -> Result<Self, Self::Error> {
        FusionWeights::new(raw.lambda_bm25, raw.lambda_llm)
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            lambda_bm25: 0.5,
            lambda_llm: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn new(lambda_bm25: f64, lambda_llm: f64) -> Result<Self, PipelineError> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(lambda_bm25) || !ok(lambda_llm) {
            return Err(PipelineError::InvalidWeights {
                lambda_bm25,
                lambda_llm,
            });
        }
        Ok(FusionWeights {
            lambda_bm25,
            lambda_llm,
        })
    }

    pub fn lambda_bm25(&self) -> f64 {
        self.lambda_bm25
    }

    pub fn lambda_llm(&self) -> f64 {
        self.lambda_llm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    MinmaxPerQuery,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::MinmaxPerQuery => "minmax_per_query",
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Normalization::None),
            "minmax_per_query" | "minmax" => Ok(Normalization::MinmaxPerQuery),
            other => Err(PipelineError::Config(format!(
                "unknown normalization `{other}` (expected none or minmax_per_query)"
            ))),
        }
    }
}

/// Rescales to [0, 1]; a constant list maps to all ones.
fn minmax(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; scores.len()]
    }
}

/// Weighted sum of first-stage and re-ranker scores over identical candidate sets.
pub fn fuse_runs(
    bm25_run: &Run,
    llm_run: &Run,
    weights: FusionWeights,
    normalization: Normalization,
) -> Result<Run, PipelineError> {
    let bm25_queries: BTreeSet<&str> = bm25_run.queries().collect();
    let llm_queries: BTreeSet<&str> = llm_run.queries().collect();
    if bm25_queries != llm_queries {
        let q = bm25_queries
            .symmetric_difference(&llm_queries)
            .next()
            .expect("sets differ");
        return Err(PipelineError::CandidateMismatch(q.to_string()));
    }
    let tag = format!(
        "fused:bm25={},llm={},{}",
        weights.lambda_bm25, weights.lambda_llm, normalization
    );
    let mut out = Run::new(tag);
    for (qid, bm25_hits) in bm25_run.iter() {
        let llm_hits = llm_run.get(qid).expect("query sets are equal");
        let mut llm_sorted: Vec<&(String, f64)> = llm_hits.iter().collect();
        llm_sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut bm25_sorted: Vec<&(String, f64)> = bm25_hits.iter().collect();
        bm25_sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let same = bm25_sorted.len() == llm_sorted.len()
            && bm25_sorted.iter().zip(&llm_sorted).all(|(a, b)| a.0 == b.0);
        if !same {
            return Err(PipelineError::CandidateMismatch(qid.to_string()));
        }
        let ids: Vec<String> = bm25_sorted.iter().map(|h| h.0.clone()).collect();
        let mut s_bm25: Vec<f64> = bm25_sorted.iter().map(|h| h.1).collect();
        let mut s_llm: Vec<f64> = llm_sorted.iter().map(|h| h.1).collect();
        if normalization == Normalization::MinmaxPerQuery && !ids.is_empty() {
            s_bm25 = minmax(&s_bm25);
            s_llm = minmax(&s_llm);
        }
        let fused = ids
            .into_iter()
            .zip(s_bm25.iter().zip(&s_llm))
            .map(|(id, (b, l))| (id, weights.lambda_bm25 * b + weights.lambda_llm * l))
            .collect();
        out.insert_sorted(qid.to_string(), fused);
    }
    Ok(out)
}

/// One grid point of a fusion search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionGridPoint {
    pub lambda_bm25: f64,
    pub lambda_llm: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTuning {
    pub best: FusionWeights,
    pub best_value: f64,
    pub grid: Vec<FusionGridPoint>,
}

/// `{0, step, 2 step, ..., 1}` computed as `i / n` so the points are exact decimals.
pub fn unit_grid(step: f64) -> Result<Vec<f64>, PipelineError> {
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return Err(PipelineError::EmptyGrid);
    }
    let n = (1.0 / step).round() as usize;
    if n == 0 {
        return Err(PipelineError::EmptyGrid);
    }
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// Grid search over both weights, maximizing the mean of `metric` across
/// `dev` sets. Ties go to the smallest `lambda_llm`, then the smallest
/// `lambda_bm25`. The all-zero point is excluded.
pub fn tune_fusion_multi(
    dev: &[(&Run, &Run, &Qrels)],
    metric: Metric,
    grid_step: f64,
    normalization: Normalization,
) -> Result<FusionTuning, PipelineError> {
    let values = unit_grid(grid_step)?;
    if dev.is_empty() {
        return Err(PipelineError::NoDevSets);
    }
    let mut grid = Vec::new();
    let mut best: Option<FusionGridPoint> = None;
    for &l_llm in &values {
        for &l_bm25 in &values {
            if l_llm == 0.0 && l_bm25 == 0.0 {
                continue;
            }
            let w = FusionWeights::new(l_bm25, l_llm)?;
            let mut total = 0.0;
            for (bm25, llm, qrels) in dev {
                let fused = fuse_runs(bm25, llm, w, normalization)?;
                let report = evaluate_run(&fused, qrels, &[metric], Gain::Linear)?;
                total += report.aggregate[&metric.to_string()];
            }
            let point = FusionGridPoint {
                lambda_bm25: l_bm25,
                lambda_llm: l_llm,
                value: total / dev.len() as f64,
            };
            if best.is_none_or(|b| point.value > b.value) {
                best = Some(point);
            }
            grid.push(point);
        }
    }
    let best = best.ok_or(PipelineError::EmptyGrid)?;
    Ok(FusionTuning {
        best: FusionWeights::new(best.lambda_bm25, best.lambda_llm)?,
        best_value: best.value,
        grid,
    })
}

pub fn tune_fusion(
    bm25_run: &Run,
    llm_run: &Run,
    qrels: &Qrels,
    metric: Metric,
    grid_step: f64,
    normalization: Normalization,
) -> Result<FusionTuning, PipelineError> {
    tune_fusion_multi(&[(bm25_run, llm_run, qrels)], metric, grid_step, normalization)
}
