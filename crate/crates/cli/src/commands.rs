use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use guidenet::data::{self, load_manifest, load_samples, Sample, Split};
use guidenet::model::{checkpoint, Vocab};
use guidenet::numeric::gradcheck::GradCheckOptions;
use guidenet::numeric::Fault;
use guidenet::train::{self, bench_latency, build_model, evaluate, ForwardPath, MetricsReport};
use guidenet::{verify, Error};
use serde_json::json;

use crate::settings::{self, set};

pub const CHECKPOINT_FILE: &str = "model.gnet";
pub const HISTORY_FILE: &str = "loss_history.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// A verification step completed but reported failures.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Text-guided image classifier: data generation, training, evaluation and experiments.
///
/// Exit status: 0 success, 1 check failure, 2 configuration or I/O error,
/// 3 numeric abort, 4 malformed artifact.
#[derive(Debug, Parser)]
#[command(name = "guidenet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic image-caption dataset.
    GenData(GenDataArgs),
    /// Train one regime on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate all regimes for several seeds.
    Compare(CompareArgs),
    /// Check analytic gradients against central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeneratorFlags {
    /// Number of samples.
    #[arg(long = "n")]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Probability that the distractor agrees with the label in the train split.
    #[arg(long)]
    pub rho_train: Option<f64>,
    /// Same for the test split.
    #[arg(long)]
    pub rho_test: Option<f64>,
    /// Probability of label 1.
    #[arg(long)]
    pub cue_probability: Option<f64>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub gen: GeneratorFlags,
    /// Output directory for `manifest.jsonl` and `images/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Model preset: desk or paper.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    pub manifest: PathBuf,
    /// baseline, guided_frozen or guided_unfrozen.
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the checkpoint, loss history and vocabulary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also measure single-sample latency.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = train::latency::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = train::latency::DEFAULT_RUNS)]
    pub runs: usize,
    /// JSON report path; defaults to `eval.json` beside the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub gen: GeneratorFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Comma-separated experiment seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Print the plan and exit without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Output directory for `report.json` and `table.txt`.
    #[arg(long, default_value = "compare-out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    ConvSignFlip,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn apply_generator_flags(g: &mut data::GeneratorConfig, f: GeneratorFlags) {
    set(&mut g.n_samples, f.n_samples);
    set(&mut g.seed, f.seed);
    set(&mut g.image_size, f.image_size);
    set(&mut g.rho_train, f.rho_train);
    set(&mut g.rho_test, f.rho_test);
    set(&mut g.cue_probability, f.cue_probability);
    set(&mut g.train_ratio, f.train_ratio);
}

fn apply_train_flags(t: &mut train::TrainConfig, f: TrainFlags) {
    set(&mut t.epochs, f.epochs);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.learning_rate, f.learning_rate);
    set(&mut t.preset, f.preset);
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = settings::load(args.config.config.as_deref())?.generator;
    apply_generator_flags(&mut cfg, args.gen);
    let summary = data::generate_dataset(&cfg, &args.out)?;
    println!("manifest: {}", summary.manifest.display());
    println!("{:<8}{:>8}{:>10}{:>10}", "split", "total", "label=1", "label=0");
    for (name, total, pos) in [("train", summary.train, summary.train_positive), ("test", summary.test, summary.test_positive)] {
        println!("{name:<8}{total:>8}{pos:>10}{:>10}", total - pos);
    }
    Ok(())
}

/// Sorted distinct caption words, so the vocabulary depends only on the data.
fn vocab_for(samples: &[Sample]) -> Vocab {
    let words: BTreeSet<String> = samples.iter().flat_map(|s| s.caption.split_whitespace().map(str::to_lowercase)).collect();
    Vocab::new(words)
}

fn load_split(manifest: &Path, split: SplitArg) -> Result<Vec<Sample>> {
    let m = load_manifest(manifest)?;
    let samples = load_samples(&m)?;
    Ok(match split {
        SplitArg::All => samples,
        SplitArg::Train => samples.into_iter().filter(|s| s.split == Split::Train).collect(),
        SplitArg::Test => samples.into_iter().filter(|s| s.split == Split::Test).collect(),
    })
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = settings::load(args.config.config.as_deref())?.train;
    apply_train_flags(&mut cfg, args.train);
    if let Some(r) = args.regime {
        cfg.regime = r.parse()?;
    }
    set(&mut cfg.seed, args.seed);
    cfg.validate()?;

    let samples = load_split(&args.manifest, SplitArg::Train)?;
    let vocab = vocab_for(&samples);
    let mut model = build_model(&cfg.preset, vocab.len(), cfg.seed)?;
    eprintln!("training {} on {} samples ({} epochs)", cfg.regime, samples.len(), cfg.epochs);
    let history = train::train_observed(&mut model, &samples, &vocab, &cfg, &mut |epoch, loss| {
        eprintln!("epoch {epoch}/{}: loss {loss:.6}", cfg.epochs)
    })?;

    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    checkpoint::save(&model, &args.out.join(CHECKPOINT_FILE))?;
    write_json(
        &args.out.join(HISTORY_FILE),
        &json!({"regime": cfg.regime.name(), "config": cfg, "loss": history}),
    )?;
    let words: Vec<&str> = (0..vocab.len()).filter_map(|i| vocab.word(i)).collect();
    write_json(&args.out.join(VOCAB_FILE), &json!(words))?;
    println!("checkpoint: {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn metrics_json(report: &MetricsReport) -> serde_json::Value {
    let c = report.confusion;
    json!({
        "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn_,
        "precision": report.precision,
        "recall": report.recall,
        "accuracy": report.accuracy,
        "latency_median_s": report.latency_median,
        "latency_p95_s": report.latency_p95,
    })
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let samples = load_split(&args.manifest, args.split)?;
    let mut report = evaluate(&model, &samples, ForwardPath::Inference)?;
    if args.bench {
        let probe = train::image_batch(&[&samples[0]])?;
        let stats = bench_latency(&model, ForwardPath::Inference, &probe, args.warmup, args.runs)?;
        report.latency_median = Some(stats.median);
        report.latency_p95 = Some(stats.p95);
    }
    let latency = report.latency_median.map_or_else(|| "n/a".into(), |v| format!("{:.3}ms", v * 1e3));
    println!("{:<11}{:>10}{:>10}{:>11}", "Precision", "Recall", "Accuracy", "Latency");
    println!(
        "{:<11}{:>10}{:>10}{:>11}",
        percent(report.precision),
        percent(report.recall),
        percent(Some(report.accuracy)),
        latency
    );
    let path = args
        .report
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.json"));
    let mut value = metrics_json(&report);
    value["samples"] = json!(samples.len());
    write_json(&path, &value)?;
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut cfg = settings::load(args.config.config.as_deref())?;
    apply_generator_flags(&mut cfg.generator, args.gen);
    apply_train_flags(&mut cfg.train, args.train);
    set(&mut cfg.seeds, args.seeds);
    set(&mut cfg.latency_warmup, args.warmup);
    set(&mut cfg.latency_runs, args.runs);
    cfg.validate()?;
    if args.dry_run {
        println!("{}", cfg.plan());
        println!("dry run: nothing trained");
        return Ok(());
    }
    let result = train::run_comparison(&cfg, &mut |msg| eprintln!("{msg}"))?;
    if !result.test_sets_identical() {
        return Err(Error::Contract("regimes were evaluated on different test sets".into()).into());
    }
    let table = result.render_table();
    print!("{table}");
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write_json(&args.out.join("report.json"), &result.to_json())?;
    fs::write(args.out.join("table.txt"), &table).map_err(|e| Error::Io { path: args.out.join("table.txt"), source: e })?;
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<()> {
    let opts = GradCheckOptions {
        tolerance: args.tolerance,
        seed: args.seed,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::ConvSignFlip => Fault::ConvKernelGradSignFlip,
        }),
        ..GradCheckOptions::default()
    };
    let report = verify::gradient_suite(&opts)?;
    println!("{:<44}{:>9}{:>14}  status", "block", "checked", "max rel err");
    for b in &report.blocks {
        println!(
            "{:<44}{:>9}{:>14.3e}  {}",
            b.name,
            b.checked,
            b.max_rel_error,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance {:e}, overall max {:.3e}", report.tolerance, report.max_rel_error());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|b| b.name.as_str()).collect();
        Err(CheckFailed(format!("{} block(s) above tolerance: {}", names.len(), names.join(", "))).into())
    }
}
