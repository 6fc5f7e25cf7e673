//! The full procedure: diff, sweep, merge, retrieve, rerank, fuse, evaluate.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! task_vector.safetensors   merged.safetensors
//! indexes/<dataset>.json
//! runs/<dataset>/bm25.trec  runs/<dataset>/<variant>.rerank.trec  runs/<dataset>/<variant>.fused.trec
//! runs/<dataset>/dev/...    (dev-split runs used for the sweep and fusion tuning)
//! sweep.json  report.json  manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{compare_runs, evaluate_run, Comparison, EvalReport, Gain, Metric, Qrels, Run};
use crate::lexical::{read_corpus, read_queries, Document, InvertedIndex, Query};
use crate::rerank::{
    index_corpus, index_queries, read_vocab, rerank, ExternalScores, Scorer, ToyBiEncoder,
};
use crate::task_arith::{apply_task_vector, diff_checkpoints, MergeSpec, TaskVector};
use crate::tensor_store::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::Error;

use super::config::{parse_alpha_key, DatasetConfig, ExperimentConfig};
use super::fusion::{fuse_runs, tune_fusion_multi, FusionTuning, FusionWeights};
use super::sweep::{sweep_alpha, DevSet, SweepResult, SweepSettings};
use super::PipelineError;

/// Scorer variants in report order.
pub const VARIANTS: [&str; 4] = ["theta_0", "theta_d", "theta_t", "theta_prime"];

/// Command-line overrides of config fields.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    /// Fixed alpha; implies no sweep.
    pub alpha: Option<f64>,
    pub no_sweep: bool,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub rerank: BTreeMap<String, f64>,
    pub fused: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub fusion_weights: FusionWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_tuning: Option<FusionTuning>,
    pub bm25: EvalReport,
    pub variants: BTreeMap<String, VariantReport>,
    /// `theta_prime` (fused) against each other fused variant and BM25, per metric.
    pub significance: BTreeMap<String, Vec<Comparison>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub alpha: f64,
    pub alpha_source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
    pub metrics: Vec<String>,
    pub normalization: String,
    pub omitted_tensors: Vec<String>,
    pub datasets: Vec<DatasetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input path as written in the config, mapped to its content hash.
    pub inputs: BTreeMap<String, String>,
    pub evaluated_alphas: Vec<f64>,
    pub alpha: f64,
    /// Output path relative to the experiment directory, mapped to its content hash.
    pub outputs: BTreeMap<String, String>,
}

trait StageExt<T> {
    fn stage(self, name: &str) -> Result<T, Error>;
}

impl<T, E: Into<Error>> StageExt<T> for Result<T, E> {
    fn stage(self, name: &str) -> Result<T, Error> {
        self.map_err(|e| e.into().in_stage(name))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Records every file it writes so the manifest can hash them.
struct Artifacts {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(root: PathBuf) -> Self {
        Artifacts {
            root,
            written: BTreeMap::new(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Error> {
        write_bytes(&self.root.join(rel), bytes)?;
        self.written.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn run(&mut self, rel: &str, run: &Run) -> Result<(), Error> {
        self.write(rel, run.to_trec().as_bytes())
    }

    fn checkpoint(&mut self, rel: &str, ckpt: &Checkpoint) -> Result<(), Error> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_checkpoint(ckpt, &path)?;
        self.written.insert(rel.to_string(), sha256_hex(&ckpt.to_bytes()));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }
}

struct ToyModels {
    vocab: Vec<String>,
    theta_0: Checkpoint,
    theta_d: Checkpoint,
    theta_t: Checkpoint,
    tau: TaskVector,
    omitted: Vec<String>,
    spec_policy: crate::task_arith::MismatchPolicy,
}

impl ToyModels {
    fn merged(&self, alpha: f64) -> Result<(Checkpoint, ToyBiEncoder), Error> {
        let spec = MergeSpec::new(alpha, self.spec_policy)?;
        let merged = apply_task_vector(&self.theta_t, &self.tau, &spec)?.value;
        let enc = ToyBiEncoder::from_checkpoint(&merged, self.vocab.clone())?;
        Ok((merged, enc))
    }

    fn encoder(&self, ckpt: &Checkpoint) -> Result<ToyBiEncoder, Error> {
        Ok(ToyBiEncoder::from_checkpoint(ckpt, self.vocab.clone())?)
    }
}

struct Split {
    queries: Vec<Query>,
    qrels: Qrels,
    bm25: Run,
}

struct Dataset {
    cfg: DatasetConfig,
    corpus: Vec<Document>,
    index: InvertedIndex,
    test: Split,
    dev: Option<Split>,
    warnings: Vec<String>,
}

impl Dataset {
    fn dev_set(&self) -> Option<DevSet> {
        self.dev.as_ref().map(|dev| DevSet {
            name: self.cfg.name.clone(),
            bm25_run: dev.bm25.clone(),
            queries: index_queries(&dev.queries),
            corpus: index_corpus(&self.corpus),
            qrels: dev.qrels.clone(),
        })
    }

    /// External table for the merged model at `alpha`.
    fn alpha_table(&self, config: &ExperimentConfig, alpha: f64) -> Result<ExternalScores, Error> {
        for (key, path) in &self.cfg.score_tables {
            if (parse_alpha_key(key)? - alpha).abs() < 1e-9 {
                return Ok(ExternalScores::read(config.resolve(path))?);
            }
        }
        Err(PipelineError::MissingAlphaInput {
            alpha,
            dataset: self.cfg.name.clone(),
        }
        .into())
    }
}

fn load_split(
    config: &ExperimentConfig,
    index: &InvertedIndex,
    queries: &Path,
    qrels: &Path,
    warnings: &mut Vec<String>,
) -> Result<Split, Error> {
    let queries = read_queries(config.resolve(queries))?;
    let loaded = Qrels::read(config.resolve(qrels))?;
    warnings.extend(loaded.warnings);
    let bm25 = index.search_all(&queries, config.first_stage_k, "bm25")?;
    Ok(Split {
        queries,
        qrels: loaded.qrels,
        bm25,
    })
}

fn load_models(config: &ExperimentConfig) -> Result<Option<ToyModels>, Error> {
    let Some(m) = &config.model else {
        return Ok(None);
    };
    let theta_0 = read_checkpoint(config.resolve(&m.pretrained))?;
    let theta_d = read_checkpoint(config.resolve(&m.domain))?;
    let theta_t = read_checkpoint(config.resolve(&m.ir))?;
    let vocab = read_vocab(config.resolve(&m.vocab))?;
    let diff = diff_checkpoints(&theta_d, &theta_0, m.policy)?;
    Ok(Some(ToyModels {
        vocab,
        theta_0,
        theta_d,
        theta_t,
        omitted: diff.omitted.iter().map(|o| o.to_string()).collect(),
        tau: diff.value,
        spec_policy: m.policy,
    }))
}

fn load_datasets(config: &ExperimentConfig) -> Result<Vec<Dataset>, Error> {
    config
        .datasets
        .iter()
        .map(|cfg| {
            let stage = format!("dataset {}", cfg.name);
            let corpus = read_corpus(config.resolve(&cfg.corpus)).stage(&stage)?;
            let index = InvertedIndex::build(corpus.iter().cloned(), config.bm25).stage(&stage)?;
            let mut warnings = Vec::new();
            let test = load_split(config, &index, &cfg.queries, &cfg.qrels, &mut warnings)
                .stage(&stage)?;
            let dev = cfg
                .dev
                .as_ref()
                .map(|d| load_split(config, &index, &d.queries, &d.qrels, &mut warnings))
                .transpose()
                .stage(&stage)?;
            Ok(Dataset {
                cfg: cfg.clone(),
                corpus,
                index,
                test,
                dev,
                warnings,
            })
        })
        .collect()
}

fn sweep_settings(config: &ExperimentConfig) -> Result<SweepSettings, Error> {
    Ok(SweepSettings {
        alphas: config.sweep.alphas.clone(),
        objective: config.sweep.objective,
        weights: FusionWeights::new(config.fusion.lambda_bm25, config.fusion.lambda_llm)?,
        normalization: config.fusion.normalization,
        rerank_k: config.first_stage_k,
    })
}

fn run_sweep(
    config: &ExperimentConfig,
    models: Option<&ToyModels>,
    datasets: &[Dataset],
) -> Result<SweepResult, Error> {
    let with_dev: Vec<&Dataset> = datasets.iter().filter(|d| d.dev.is_some()).collect();
    let dev_sets: Vec<DevSet> = with_dev.iter().filter_map(|d| d.dev_set()).collect();
    let settings = sweep_settings(config)?;
    let result = sweep_alpha(&dev_sets, &settings, |alpha| {
        let wrap = |e: Error| PipelineError::Config(e.to_string());
        match models {
            Some(m) => {
                let (_, enc) = m.merged(alpha).map_err(wrap)?;
                Ok(with_dev
                    .iter()
                    .map(|_| Box::new(enc.clone()) as Box<dyn Scorer>)
                    .collect())
            }
            None => with_dev
                .iter()
                .map(|d| match d.alpha_table(config, alpha) {
                    Ok(t) => Ok(Box::new(t) as Box<dyn Scorer>),
                    Err(Error::Pipeline(e)) => Err(e),
                    Err(e) => Err(wrap(e)),
                })
                .collect(),
        }
    })?;
    Ok(result)
}

/// Runs only the alpha sweep of an experiment; writes nothing.
pub fn sweep_from_config(config: &ExperimentConfig) -> Result<SweepResult, Error> {
    let models = load_models(config).stage("load models")?;
    let datasets = load_datasets(config).stage("load")?;
    run_sweep(config, models.as_ref(), &datasets).stage("sweep")
}

fn variant_scorers(
    config: &ExperimentConfig,
    models: Option<&ToyModels>,
    merged: Option<&ToyBiEncoder>,
    ds: &Dataset,
    alpha: f64,
) -> Result<Vec<(&'static str, Box<dyn Scorer>)>, Error> {
    let mut out: Vec<(&'static str, Box<dyn Scorer>)> = Vec::new();
    match (models, merged) {
        (Some(m), Some(merged)) => {
            out.push(("theta_0", Box::new(m.encoder(&m.theta_0)?)));
            out.push(("theta_d", Box::new(m.encoder(&m.theta_d)?)));
            out.push(("theta_t", Box::new(m.encoder(&m.theta_t)?)));
            out.push(("theta_prime", Box::new(merged.clone())));
        }
        _ => {
            for name in ["theta_0", "theta_d", "theta_t"] {
                if let Some(path) = ds.cfg.baseline_tables.get(name) {
                    out.push((name, Box::new(ExternalScores::read(config.resolve(path))?)));
                }
            }
            out.push(("theta_prime", Box::new(ds.alpha_table(config, alpha)?)));
        }
    }
    Ok(out)
}

fn theta_prime_scorer(
    config: &ExperimentConfig,
    merged: Option<&ToyBiEncoder>,
    ds: &Dataset,
    alpha: f64,
) -> Result<Box<dyn Scorer>, Error> {
    Ok(match merged {
        Some(enc) => Box::new(enc.clone()),
        None => Box::new(ds.alpha_table(config, alpha)?),
    })
}

/// Tunes fusion weights on dev splits with the merged model's scores.
fn tune_weights(
    config: &ExperimentConfig,
    merged: Option<&ToyBiEncoder>,
    datasets: &[Dataset],
    alpha: f64,
    artifacts: &mut Artifacts,
) -> Result<BTreeMap<String, FusionTuning>, Error> {
    let mut tuned = BTreeMap::new();
    let Some(tune) = &config.fusion.tune else {
        return Ok(tuned);
    };
    let mut dev_runs = Vec::new();
    for ds in datasets {
        let Some(dev) = &ds.dev else { continue };
        let scorer = theta_prime_scorer(config, merged, ds, alpha)?;
        let reranked = rerank(
            scorer.as_ref(),
            &dev.bm25,
            &index_queries(&dev.queries),
            &index_corpus(&ds.corpus),
            config.first_stage_k,
            "theta_prime",
        )?;
        artifacts.run(&format!("runs/{}/dev/theta_prime.rerank.trec", ds.cfg.name), &reranked)?;
        dev_runs.push((ds.cfg.name.clone(), &dev.bm25, reranked, &dev.qrels));
    }
    if dev_runs.is_empty() {
        return Ok(tuned);
    }
    let norm = config.fusion.normalization;
    if tune.shared {
        let inputs: Vec<(&Run, &Run, &Qrels)> =
            dev_runs.iter().map(|(_, b, l, q)| (*b, l, *q)).collect();
        let t = tune_fusion_multi(&inputs, tune.metric, tune.grid_step, norm)?;
        for (name, ..) in &dev_runs {
            tuned.insert(name.clone(), t.clone());
        }
    } else {
        for (name, b, l, q) in &dev_runs {
            let t = tune_fusion_multi(&[(*b, l, *q)], tune.metric, tune.grid_step, norm)?;
            tuned.insert(name.clone(), t);
        }
    }
    Ok(tuned)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_dataset(
    config: &ExperimentConfig,
    models: Option<&ToyModels>,
    merged: Option<&ToyBiEncoder>,
    ds: &Dataset,
    alpha: f64,
    weights: FusionWeights,
    tuning: Option<FusionTuning>,
    artifacts: &mut Artifacts,
) -> Result<DatasetReport, Error> {
    let name = &ds.cfg.name;
    let metrics = &config.metrics;
    let queries = index_queries(&ds.test.queries);
    let corpus = index_corpus(&ds.corpus);
    let bm25_report = evaluate_run(&ds.test.bm25, &ds.test.qrels, metrics, Gain::Linear)?;

    let mut variants = BTreeMap::new();
    let mut fused_runs: Vec<(&'static str, Run)> = Vec::new();
    for (variant, scorer) in variant_scorers(config, models, merged, ds, alpha)? {
        let reranked = rerank(
            scorer.as_ref(),
            &ds.test.bm25,
            &queries,
            &corpus,
            config.first_stage_k,
            variant,
        )?;
        let fused = fuse_runs(&ds.test.bm25, &reranked, weights, config.fusion.normalization)?;
        artifacts.run(&format!("runs/{name}/{variant}.rerank.trec"), &reranked)?;
        artifacts.run(&format!("runs/{name}/{variant}.fused.trec"), &fused)?;
        let rerank_report = evaluate_run(&reranked, &ds.test.qrels, metrics, Gain::Linear)?;
        let fused_report = evaluate_run(&fused, &ds.test.qrels, metrics, Gain::Linear)?;
        variants.insert(
            variant.to_string(),
            VariantReport {
                rerank: rerank_report.aggregate,
                fused: fused_report,
            },
        );
        fused_runs.push((variant, fused));
    }

    let mut notes = ds.warnings.clone();
    let mut significance = BTreeMap::new();
    if bm25_report.evaluated_query_count < 2 {
        notes.push(format!(
            "significance tests skipped: {} evaluated quer{}",
            bm25_report.evaluated_query_count,
            if bm25_report.evaluated_query_count == 1 { "y" } else { "ies" }
        ));
    } else {
        let (prime, others): (Vec<_>, Vec<_>) =
            fused_runs.iter().partition(|(v, _)| *v == "theta_prime");
        let prime = &prime[0].1;
        let mut baselines: Vec<(&str, &Run)> = vec![("bm25", &ds.test.bm25)];
        baselines.extend(others.iter().map(|(v, r)| (*v, r)));
        let sig_metrics = config.significance.metrics.as_ref().unwrap_or(metrics);
        for metric in sig_metrics {
            let cmp = compare_runs(
                prime,
                &baselines,
                &ds.test.qrels,
                *metric,
                config.significance.family_alpha,
            )?;
            significance.insert(metric.to_string(), cmp);
        }
    }

    Ok(DatasetReport {
        name: name.clone(),
        fusion_weights: weights,
        fusion_tuning: tuning,
        bm25: bm25_report,
        variants,
        significance,
        notes,
    })
}

/// Runs the whole experiment and writes every artifact under the output directory.
/// Identical inputs produce byte-identical outputs.
pub fn run_experiment(
    config: &ExperimentConfig,
    overrides: &RunOverrides,
) -> Result<ExperimentReport, Error> {
    let out_dir = overrides
        .output_dir
        .clone()
        .unwrap_or_else(|| config.output_path());
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(&out_dir, e))
        .stage("setup")?;
    let mut artifacts = Artifacts::new(out_dir);

    let models = load_models(config).stage("diff")?;
    if let Some(m) = &models {
        artifacts
            .checkpoint("task_vector.safetensors", &m.tau)
            .stage("diff")?;
    }

    let datasets = load_datasets(config).stage("load")?;
    for ds in &datasets {
        let stage = "index";
        let index_json = serde_json::to_vec(&ds.index).expect("index serializes");
        artifacts
            .write(&format!("indexes/{}.json", ds.cfg.name), &index_json)
            .stage(stage)?;
        artifacts
            .run(&format!("runs/{}/bm25.trec", ds.cfg.name), &ds.test.bm25)
            .stage("search")?;
        if let Some(dev) = &ds.dev {
            artifacts
                .run(&format!("runs/{}/dev/bm25.trec", ds.cfg.name), &dev.bm25)
                .stage("search")?;
        }
    }

    let sweep_enabled = config.sweep.enabled && !overrides.no_sweep && overrides.alpha.is_none();
    let (alpha, sweep, alpha_source) = if sweep_enabled {
        let result = run_sweep(config, models.as_ref(), &datasets).stage("sweep")?;
        artifacts.json("sweep.json", &result).stage("sweep")?;
        (result.alpha_star, Some(result), "sweep")
    } else {
        let a = overrides.alpha.unwrap_or(config.alpha);
        if !a.is_finite() {
            return Err(Error::from(PipelineError::NonFiniteAlpha(a)).in_stage("sweep"));
        }
        (a, None, "fixed")
    };

    let merged = match &models {
        Some(m) => {
            let (ckpt, enc) = m.merged(alpha).stage("merge")?;
            artifacts
                .checkpoint("merged.safetensors", &ckpt)
                .stage("merge")?;
            Some(enc)
        }
        None => None,
    };

    let tuned = tune_weights(config, merged.as_ref(), &datasets, alpha, &mut artifacts)
        .stage("tune-fusion")?;
    let default_weights = FusionWeights::new(config.fusion.lambda_bm25, config.fusion.lambda_llm)
        .stage("tune-fusion")?;

    let mut reports = Vec::new();
    for ds in &datasets {
        let tuning = tuned.get(&ds.cfg.name).cloned();
        let weights = tuning.as_ref().map_or(default_weights, |t| t.best);
        let report = evaluate_dataset(
            config,
            models.as_ref(),
            merged.as_ref(),
            ds,
            alpha,
            weights,
            tuning,
            &mut artifacts,
        )
        .stage(&format!("evaluate {}", ds.cfg.name))?;
        reports.push(report);
    }

    let report = ExperimentReport {
        alpha,
        alpha_source: alpha_source.to_string(),
        sweep,
        metrics: config.metrics.iter().map(Metric::to_string).collect(),
        normalization: config.fusion.normalization.to_string(),
        omitted_tensors: models.as_ref().map(|m| m.omitted.clone()).unwrap_or_default(),
        datasets: reports,
    };
    artifacts.json("report.json", &report).stage("report")?;

    let manifest = build_manifest(config, &report, &artifacts).stage("manifest")?;
    artifacts.json("manifest.json", &manifest).stage("manifest")?;
    Ok(report)
}

fn build_manifest(
    config: &ExperimentConfig,
    report: &ExperimentReport,
    artifacts: &Artifacts,
) -> Result<Manifest, Error> {
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let mut inputs = BTreeMap::new();
    for p in config.input_paths() {
        let full = config.resolve(&p);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        inputs.insert(p.display().to_string(), sha256_hex(&bytes));
    }
    let evaluated_alphas = match &report.sweep {
        Some(s) => s.evaluated_alphas(),
        None => vec![report.alpha],
    };
    Ok(Manifest {
        tool: "taskfuse".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config_sha256: sha256_hex(&config_json),
        inputs,
        evaluated_alphas,
        alpha: report.alpha,
        outputs: artifacts.written.clone(),
    })
}
