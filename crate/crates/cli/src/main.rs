//! `taskfuse` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical or contract violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use taskfuse::eval::{compare_runs, evaluate_run, parse_metric_list, Gain, Metric, Qrels, Run};
use taskfuse::lexical::{read_corpus, read_queries, Bm25Params, InvertedIndex};
use taskfuse::pipeline::{
    fuse_runs, run_experiment, sweep_from_config, tune_fusion, ExperimentConfig, FusionWeights,
    Normalization, RunOverrides,
};
use taskfuse::rerank::{
    index_corpus, index_queries, rerank, train_fixture, ExternalScores, FixtureConfig, Scorer,
    ToyBiEncoder,
};
use taskfuse::synth::{build_fixture_experiment, WorldSize};
use taskfuse::task_arith::{
    apply_task_vector, combine_task_vectors, diff_checkpoints, negate_task_vector, MergeSpec,
    MismatchPolicy, TaskVector, WithOmissions,
};
use taskfuse::tensor_store::{read_checkpoint, write_checkpoint};
use taskfuse::Error;

#[derive(Parser)]
#[command(name = "taskfuse", version, about = "Task arithmetic for zero-shot retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Task-vector arithmetic on checkpoints.
    #[command(subcommand)]
    Tv(TvCommand),
    /// Inverted index construction.
    #[command(subcommand)]
    Index(IndexCommand),
    /// BM25 first-stage retrieval.
    Search(SearchArgs),
    /// Rescore first-stage candidates with a toy model or an external score table.
    Rerank(RerankArgs),
    /// Weighted fusion of a BM25 run and a re-ranker run.
    Fuse(FuseArgs),
    /// Grid-search fusion weights on a dev set.
    TuneFusion(TuneFusionArgs),
    /// Sweep the scaling factor over the dev sets of an experiment config.
    SweepAlpha(SweepAlphaArgs),
    /// Evaluate a run against qrels.
    Eval(EvalArgs),
    /// Bonferroni-corrected paired t-tests of one run against baselines.
    Sigtest(SigtestArgs),
    /// Toy checkpoint fixtures.
    #[command(subcommand)]
    Fixture(FixtureCommand),
    /// Full experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Subcommand)]
enum TvCommand {
    /// tau = domain - base
    Diff {
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "strict")]
        policy: MismatchPolicy,
    },
    /// merged = target + alpha * tau
    Apply {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        tau: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "strict")]
        policy: MismatchPolicy,
    },
    /// Weighted sum of task vectors; each term is PATH or PATH=WEIGHT.
    Combine {
        #[arg(long = "term", required = true)]
        terms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// tau -> -tau
    Negate {
        #[arg(long)]
        tau: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
    },
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "bm25")]
    tag: String,
}

#[derive(Args)]
struct RerankArgs {
    /// Toy bi-encoder checkpoint (requires --vocab).
    #[arg(long, conflicts_with = "scores", requires = "vocab")]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// External `query_id \t doc_id \t score` table.
    #[arg(long, required_unless_present = "model")]
    scores: Option<PathBuf>,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "rerank")]
    tag: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    MinmaxPerQuery,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::None => Normalization::None,
            NormArg::MinmaxPerQuery => Normalization::MinmaxPerQuery,
        }
    }
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    bm25: PathBuf,
    #[arg(long)]
    llm: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lambda_bm25: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_llm: f64,
    #[arg(long, value_enum, default_value = "minmax-per-query")]
    normalization: NormArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneFusionArgs {
    #[arg(long)]
    bm25: PathBuf,
    #[arg(long)]
    llm: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "NDCG@10")]
    metric: Metric,
    #[arg(long, default_value_t = 0.1)]
    grid_step: f64,
    #[arg(long, value_enum, default_value = "minmax-per-query")]
    normalization: NormArg,
    /// Also write the full grid as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[arg(long)]
    config: PathBuf,
    /// Write the sweep table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    Linear,
    Exponential,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "P@10,NDCG@3,NDCG@10,MAP@100")]
    metrics: String,
    #[arg(long, value_enum, default_value = "linear")]
    gain: GainArg,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SigtestArgs {
    /// Experimental run.
    #[arg(long)]
    run_a: PathBuf,
    /// Baseline runs; Bonferroni m is their count.
    #[arg(long, required = true)]
    run_b: Vec<PathBuf>,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    metric: Metric,
    #[arg(long, default_value_t = 0.01)]
    family_alpha: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Train a (pretrained, domain, ir) toy triple from a fixture config.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic world, train its triple, and write an experiment config.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Fixed scaling factor; disables the sweep.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        #[arg(long)]
        no_sweep: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn report_omissions<T>(w: &WithOmissions<T>) {
    for o in &w.omitted {
        eprintln!("warning: omitted {o}");
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_qrels(path: &Path) -> Result<Qrels, CliError> {
    let loaded = Qrels::read(path)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.qrels)
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("values serialize")
}

fn parse_term(term: &str) -> Result<(PathBuf, f64), CliError> {
    match term.rsplit_once('=') {
        Some((path, w)) => {
            let weight = w
                .parse()
                .map_err(|_| CliError::Usage(format!("bad weight in term `{term}`")))?;
            Ok((PathBuf::from(path), weight))
        }
        None => Ok((PathBuf::from(term), 1.0)),
    }
}

fn tv(cmd: TvCommand) -> CliResult {
    match cmd {
        TvCommand::Diff {
            domain,
            base,
            out,
            policy,
        } => {
            let d = read_checkpoint(&domain)?;
            let b = read_checkpoint(&base)?;
            let tau = diff_checkpoints(&d, &b, policy)?;
            report_omissions(&tau);
            write_checkpoint(&tau.value, &out)?;
            println!("wrote task vector with {} tensors to {}", tau.value.len(), out.display());
        }
        TvCommand::Apply {
            target,
            tau,
            alpha,
            out,
            policy,
        } => {
            let t = read_checkpoint(&target)?;
            let tau = TaskVector::from_checkpoint(read_checkpoint(&tau)?)?;
            let merged = apply_task_vector(&t, &tau, &MergeSpec::new(alpha, policy)?)?;
            report_omissions(&merged);
            write_checkpoint(&merged.value, &out)?;
            println!("wrote merged checkpoint (alpha = {alpha}) to {}", out.display());
        }
        TvCommand::Combine { terms, out } => {
            let parsed = terms.iter().map(|t| parse_term(t)).collect::<Result<Vec<_>, _>>()?;
            let vectors = parsed
                .iter()
                .map(|(p, _)| Ok(TaskVector::from_checkpoint(read_checkpoint(p)?)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            let weighted: Vec<(&TaskVector, f64)> =
                vectors.iter().zip(&parsed).map(|(v, (_, w))| (v, *w)).collect();
            let combined = combine_task_vectors(&weighted)?;
            write_checkpoint(&combined, &out)?;
            println!("wrote combination of {} task vectors to {}", vectors.len(), out.display());
        }
        TvCommand::Negate { tau, out } => {
            let tau = TaskVector::from_checkpoint(read_checkpoint(&tau)?)?;
            let negated = negate_task_vector(&tau)?;
            write_checkpoint(&negated, &out)?;
            println!("wrote negated task vector to {}", out.display());
        }
    }
    Ok(())
}

fn index(cmd: IndexCommand) -> CliResult {
    let IndexCommand::Build { corpus, out, k1, b } = cmd;
    let docs = read_corpus(&corpus)?;
    let index = InvertedIndex::build(docs, Bm25Params { k1, b })?;
    index.save(&out)?;
    println!(
        "indexed {} documents ({} terms) into {}",
        index.doc_count(),
        index.terms().count(),
        out.display()
    );
    Ok(())
}

fn search(args: SearchArgs) -> CliResult {
    let index = InvertedIndex::load(&args.index)?;
    let queries = read_queries(&args.queries)?;
    let run = index.search_all(&queries, args.k, &args.tag)?;
    run.write(&args.out)?;
    println!("searched {} queries into {}", run.len(), args.out.display());
    Ok(())
}

fn rerank_cmd(args: RerankArgs) -> CliResult {
    let scorer: Box<dyn Scorer> = match (&args.model, &args.scores) {
        (Some(model), None) => {
            let vocab = args.vocab.as_ref().expect("clap enforces --vocab");
            Box::new(ToyBiEncoder::load(model, vocab)?)
        }
        (None, Some(scores)) => Box::new(ExternalScores::read(scores)?),
        _ => return Err(CliError::Usage("pass exactly one of --model or --scores".into())),
    };
    let run = Run::read(&args.run)?;
    let queries = index_queries(&read_queries(&args.queries)?);
    let corpus = index_corpus(&read_corpus(&args.corpus)?);
    let out = rerank(scorer.as_ref(), &run, &queries, &corpus, args.k, &args.tag)?;
    out.write(&args.out)?;
    println!("reranked {} queries into {}", out.len(), args.out.display());
    Ok(())
}

fn fuse(args: FuseArgs) -> CliResult {
    let weights = FusionWeights::new(args.lambda_bm25, args.lambda_llm)?;
    let fused = fuse_runs(
        &Run::read(&args.bm25)?,
        &Run::read(&args.llm)?,
        weights,
        args.normalization.into(),
    )?;
    fused.write(&args.out)?;
    println!("fused {} queries into {}", fused.len(), args.out.display());
    Ok(())
}

fn tune(args: TuneFusionArgs) -> CliResult {
    let t = tune_fusion(
        &Run::read(&args.bm25)?,
        &Run::read(&args.llm)?,
        &load_qrels(&args.qrels)?,
        args.metric,
        args.grid_step,
        args.normalization.into(),
    )?;
    if let Some(out) = &args.out {
        write_text(out, &pretty(&t))?;
    }
    println!(
        "{}",
        pretty(&json!({
            "lambda_bm25": t.best.lambda_bm25(),
            "lambda_llm": t.best.lambda_llm(),
            "metric": args.metric.to_string(),
            "value": t.best_value,
        }))
    );
    Ok(())
}

fn sweep(args: SweepAlphaArgs) -> CliResult {
    let config = ExperimentConfig::read(&args.config)?;
    let result = sweep_from_config(&config)?;
    if let Some(out) = &args.out {
        write_text(out, &pretty(&result))?;
    }
    println!("{:>6}  mean {}", "alpha", result.objective);
    for row in &result.table {
        println!("{:>6}  {:.6}", row.alpha, row.mean);
    }
    println!("alpha* = {}", result.alpha_star);
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let metrics = parse_metric_list(&args.metrics)?;
    if metrics.is_empty() {
        return Err(CliError::Usage("--metrics must name at least one metric".into()));
    }
    let gain = match args.gain {
        GainArg::Linear => Gain::Linear,
        GainArg::Exponential => Gain::Exponential,
    };
    let report = evaluate_run(&Run::read(&args.run)?, &load_qrels(&args.qrels)?, &metrics, gain)?;
    if args.json {
        println!("{}", pretty(&report));
    } else {
        print!("{}", report.to_table(&metrics));
    }
    Ok(())
}

fn sigtest(args: SigtestArgs) -> CliResult {
    let a = Run::read(&args.run_a)?;
    let baselines = args
        .run_b
        .iter()
        .map(|p| Ok((p.display().to_string(), Run::read(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let named: Vec<(&str, &Run)> = baselines.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let qrels = load_qrels(&args.qrels)?;
    let cmp = compare_runs(&a, &named, &qrels, args.metric, args.family_alpha)?;
    if args.json {
        println!("{}", pretty(&cmp));
    } else {
        for c in &cmp {
            println!(
                "{}\t{}\tmean_a={:.6}\tmean_b={:.6}\tt={:.6}\tdf={}\tp={:.6}\tp_adj={:.6}\t{}",
                c.baseline,
                c.metric,
                c.mean_experimental,
                c.mean_baseline,
                c.t,
                c.df,
                c.p_two_sided,
                c.p_adjusted,
                if c.significant { "significant" } else { "n.s." }
            );
        }
    }
    Ok(())
}

fn fixture(cmd: FixtureCommand) -> CliResult {
    match cmd {
        FixtureCommand::Train {
            seed,
            config,
            out_dir,
        } => {
            let cfg = FixtureConfig::read(&config)?;
            let out = train_fixture(seed, &cfg)?;
            out.write_to(&out_dir)?;
            println!(
                "trained fixture (V = {}, d = {}) into {}",
                out.vocab.len(),
                cfg.dim,
                out_dir.display()
            );
        }
        FixtureCommand::Synth { seed, out_dir } => {
            let path = build_fixture_experiment(seed, &WorldSize::default(), &out_dir)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn experiment(cmd: ExperimentCommand) -> CliResult {
    let ExperimentCommand::Run {
        config,
        alpha,
        no_sweep,
        out_dir,
    } = cmd;
    let cfg = ExperimentConfig::read(&config)?;
    let overrides = RunOverrides {
        alpha,
        no_sweep,
        output_dir: out_dir,
    };
    let report = run_experiment(&cfg, &overrides)?;
    println!("alpha = {} ({})", report.alpha, report.alpha_source);
    for ds in &report.datasets {
        println!("{}", ds.name);
        let mut rows = vec![("bm25".to_string(), &ds.bm25.aggregate)];
        rows.extend(ds.variants.iter().map(|(v, r)| (format!("{v}+bm25"), &r.fused.aggregate)));
        for (name, agg) in rows {
            let cells: Vec<String> = report
                .metrics
                .iter()
                .map(|m| format!("{m}={:.4}", agg.get(m).copied().unwrap_or(0.0)))
                .collect();
            println!("  {name:<18} {}", cells.join("  "));
        }
    }
    let out = overrides.output_dir.unwrap_or_else(|| cfg.output_path());
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Tv(c) => tv(c),
        Command::Index(c) => index(c),
        Command::Search(a) => search(a),
        Command::Rerank(a) => rerank_cmd(a),
        Command::Fuse(a) => fuse(a),
        Command::TuneFusion(a) => tune(a),
        Command::SweepAlpha(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Sigtest(a) => sigtest(a),
        Command::Fixture(c) => fixture(c),
        Command::Experiment(c) => experiment(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_contract_violation() { 3 } else { 2 })
        }
    }
}
