use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::Metric;
use crate::lexical::Bm25Params;
use crate::task_arith::MismatchPolicy;

use super::fusion::Normalization;
use super::sweep::default_alphas;
use super::PipelineError;

fn default_k() -> usize {
    100
}

fn default_metrics() -> Vec<Metric> {
    Metric::STANDARD.to_vec()
}

fn default_objective() -> Metric {
    Metric::Ndcg(10)
}

fn default_half() -> f64 {
    0.5
}

fn default_step() -> f64 {
    0.1
}

fn default_family_alpha() -> f64 {
    0.01
}

fn default_alpha() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

mod metric_serde {
    use super::Metric;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Metric, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(m)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Metric, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod metric_list_serde {
    use super::Metric;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &[Metric], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ms.iter().map(|m| m.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Metric>, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Toy-encoder checkpoints: Θ₀, Θ_D, Θ_T and the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pretrained: PathBuf,
    pub domain: PathBuf,
    pub ir: PathBuf,
    pub vocab: PathBuf,
    #[serde(default)]
    pub policy: MismatchPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_objective", with = "metric_serde")]
    pub objective: Metric,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            enabled: true,
            alphas: default_alphas(),
            objective: default_objective(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default = "default_step")]
    pub grid_step: f64,
    #[serde(default = "default_objective", with = "metric_serde")]
    pub metric: Metric,
    /// One weight pair across all dev-equipped datasets instead of one per dataset.
    #[serde(default)]
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_half")]
    pub lambda_bm25: f64,
    #[serde(default = "default_half")]
    pub lambda_llm: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// Grid-search the weights on dev sets when present.
    #[serde(default)]
    pub tune: Option<TuneConfig>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_bm25: 0.5,
            lambda_llm: 0.5,
            normalization: Normalization::MinmaxPerQuery,
            tune: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevConfig {
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    #[serde(default)]
    pub dev: Option<DevConfig>,
    /// External score tables for the merged model, keyed by alpha.
    #[serde(default)]
    pub score_tables: BTreeMap<String, PathBuf>,
    /// External score tables for `theta_0`, `theta_d`, `theta_t`.
    #[serde(default)]
    pub baseline_tables: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignificanceConfig {
    #[serde(default = "default_family_alpha")]
    pub family_alpha: f64,
    /// Metrics tested; defaults to every reported metric.
    #[serde(default, with = "opt_metric_list")]
    pub metrics: Option<Vec<Metric>>,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            family_alpha: default_family_alpha(),
            metrics: None,
        }
    }
}

mod opt_metric_list {
    use super::Metric;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &Option<Vec<Metric>>, s: S) -> Result<S::Ok, S::Error> {
        match ms {
            Some(ms) => s.collect_seq(ms.iter().map(|m| m.to_string())),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Metric>>, D::Error> {
        let names = Option::<Vec<String>>::deserialize(d)?;
        names
            .map(|ns| {
                ns.iter()
                    .map(|n| n.parse().map_err(serde::de::Error::custom))
                    .collect()
            })
            .transpose()
    }
}

/// A complete experiment. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default = "default_k")]
    pub first_stage_k: usize,
    #[serde(default = "default_metrics", with = "metric_list_serde")]
    pub metrics: Vec<Metric>,
    /// Absent: every scorer comes from external score tables.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Used when the sweep is disabled.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub significance: SignificanceConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Every input file, as written in the config.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Some(m) = &self.model {
            out.extend([&m.pretrained, &m.domain, &m.ir, &m.vocab].map(|p| p.clone()));
        }
        for ds in &self.datasets {
            out.extend([ds.corpus.clone(), ds.queries.clone(), ds.qrels.clone()]);
            if let Some(dev) = &ds.dev {
                out.extend([dev.queries.clone(), dev.qrels.clone()]);
            }
            out.extend(ds.score_tables.values().cloned());
            out.extend(ds.baseline_tables.values().cloned());
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.first_stage_k == 0 {
            return bad("first_stage_k must be at least 1".into());
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset is required".into());
        }
        if self.metrics.is_empty() {
            return bad("metrics must not be empty".into());
        }
        self.bm25
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !self.alpha.is_finite() {
            return Err(PipelineError::NonFiniteAlpha(self.alpha));
        }
        if self.sweep.enabled {
            if self.sweep.alphas.is_empty() {
                return Err(PipelineError::EmptyGrid);
            }
            if let Some(&a) = self.sweep.alphas.iter().find(|a| !a.is_finite()) {
                return Err(PipelineError::NonFiniteAlpha(a));
            }
        }
        super::fusion::FusionWeights::new(self.fusion.lambda_bm25, self.fusion.lambda_llm)?;
        let mut names = std::collections::BTreeSet::new();
        for ds in &self.datasets {
            if ds.name.is_empty() || ds.name.contains(['/', '\\']) || ds.name.starts_with('.') {
                return bad(format!("dataset name `{}` is not a plain file name", ds.name));
            }
            if !names.insert(ds.name.as_str()) {
                return bad(format!("dataset `{}` appears twice", ds.name));
            }
            for key in ds.score_tables.keys() {
                parse_alpha_key(key)?;
            }
            for key in ds.baseline_tables.keys() {
                if !matches!(key.as_str(), "theta_0" | "theta_d" | "theta_t") {
                    return bad(format!(
                        "baseline table `{key}` (expected theta_0, theta_d or theta_t)"
                    ));
                }
            }
        }
        for p in self.input_paths() {
            let full = self.resolve(&p);
            if !full.is_file() {
                return bad(format!("input file {} does not exist", full.display()));
            }
        }
        Ok(())
    }
}

pub(crate) fn parse_alpha_key(key: &str) -> Result<f64, PipelineError> {
    match key.trim().parse::<f64>() {
        Ok(a) if a.is_finite() => Ok(a),
        _ => Err(PipelineError::Config(format!("score table key `{key}` is not an alpha value"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["c.jsonl", "q.jsonl", "r.tsv"] {
            fs::write(dir.path().join(f), "").unwrap();
        }
        let cfg = ExperimentConfig::from_json(
            r#"{"datasets": [{"name": "d", "corpus": "c.jsonl", "queries": "q.jsonl", "qrels": "r.tsv"}]}"#,
            dir.path(),
        )
        .unwrap();
        assert_eq!(cfg.first_stage_k, 100);
        assert_eq!(cfg.metrics, Metric::STANDARD.to_vec());
        assert_eq!(cfg.sweep.alphas, default_alphas());
        assert_eq!(cfg.sweep.objective, Metric::Ndcg(10));
        assert_eq!(cfg.fusion.lambda_bm25, 0.5);
        assert_eq!(cfg.significance.family_alpha, 0.01);
        assert_eq!(cfg.resolve(Path::new("c.jsonl")), dir.path().join("c.jsonl"));
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let base = r#""datasets": [{"name": "d", "corpus": "c", "queries": "q", "qrels": "r"}]"#;
        let missing = ExperimentConfig::from_json(&format!("{{{base}}}"), dir.path());
        assert!(matches!(missing, Err(PipelineError::Config(m)) if m.contains("does not exist")));
        let k0 = ExperimentConfig::from_json(&format!("{{\"first_stage_k\": 0, {base}}}"), dir.path());
        assert!(k0.is_err());
        let unknown = ExperimentConfig::from_json(&format!("{{\"bogus\": 1, {base}}}"), dir.path());
        assert!(unknown.is_err());
        assert!(parse_alpha_key("0.7").is_ok());
        assert!(parse_alpha_key("high").is_err());
    }
}
