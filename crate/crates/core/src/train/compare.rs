//! The three-regime comparison: baseline against guided training with a
//! frozen or trainable text encoder, paired per seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{Regime, TrainConfig};
use super::latency::{bench_paired, DEFAULT_RUNS, DEFAULT_WARMUP};
use super::metrics::MetricsReport;
use super::trainer::{build_model, evaluate, image_batch, train_observed};
use crate::data::{generate_samples, partition, GeneratorConfig, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// `seed` is replaced by each experiment seed.
    pub generator: GeneratorConfig,
    /// `seed` and `regime` are replaced per run.
    pub train: TrainConfig,
    pub latency_warmup: usize,
    pub latency_runs: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            seeds: (1..=5).collect(),
            regimes: Regime::ALL.to_vec(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            latency_warmup: DEFAULT_WARMUP,
            latency_runs: DEFAULT_RUNS,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for r in Regime::ALL {
            if !self.regimes.contains(&r) {
                return Err(Error::Config(format!("comparison must include the `{r}` regime")));
            }
        }
        if self.regimes.len() != Regime::ALL.len() {
            return Err(Error::Config("each regime may appear only once".into()));
        }
        self.generator.validate()?;
        self.train.validate()
    }

    /// Human-readable description of what [`run_comparison`] would do.
    pub fn plan(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        let _ = writeln!(s, "regimes: {}", self.regimes.iter().map(|r| r.name()).collect::<Vec<_>>().join(", "));
        let _ = writeln!(
            s,
            "data: n={} image={}x{} cue_probability={} rho_train={} rho_test={} train_ratio={}",
            g.n_samples, g.image_size, g.image_size, g.cue_probability, g.rho_train, g.rho_test, g.train_ratio
        );
        let _ = writeln!(
            s,
            "training: preset={} epochs={} batch_size={} learning_rate={}",
            t.preset, t.epochs, t.batch_size, t.learning_rate
        );
        let _ = writeln!(s, "latency: {} warmup + {} timed single-image passes per regime", self.latency_warmup, self.latency_runs);
        let _ = write!(s, "runs: {} trainings", self.seeds.len() * self.regimes.len());
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub loss_history: Vec<f64>,
    /// Ids of the evaluated test samples, in order.
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeOutcome {
    pub regime: Regime,
    pub seeds: Vec<SeedOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub regimes: Vec<RegimeOutcome>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

impl ExperimentResult {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeOutcome> {
        self.regimes.iter().find(|r| r.regime == regime)
    }

    fn median_of(&self, regime: Regime, f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> = self.regime(regime)?.seeds.iter().filter_map(|s| f(&s.metrics)).collect();
        median(&mut v)
    }

    pub fn median_accuracy(&self, regime: Regime) -> Option<f64> {
        self.median_of(regime, |m| Some(m.accuracy))
    }

    /// `(seed, accuracy(regime) − accuracy(baseline))` for each seed.
    pub fn paired_deltas(&self, regime: Regime) -> Vec<(u64, f64)> {
        let (Some(base), Some(other)) = (self.regime(Regime::Baseline), self.regime(regime)) else {
            return Vec::new();
        };
        base.seeds
            .iter()
            .zip(&other.seeds)
            .map(|(b, o)| (b.seed, o.metrics.accuracy - b.metrics.accuracy))
            .collect()
    }

    /// True when every regime was scored on the same test ids for each seed.
    pub fn test_sets_identical(&self) -> bool {
        let Some(first) = self.regimes.first() else { return true };
        self.regimes.iter().all(|r| {
            r.seeds.len() == first.seeds.len()
                && r.seeds.iter().zip(&first.seeds).all(|(a, b)| a.seed == b.seed && a.test_ids == b.test_ids)
        })
    }

    /// `{regimes: [{name, seeds: [{seed, tp, fp, tn, fn, precision, recall, accuracy, latency_median_s}]}]}`
    /// plus per-regime medians and paired deltas.
    pub fn to_json(&self) -> Value {
        let regimes: Vec<Value> = self
            .regimes
            .iter()
            .map(|r| {
                let seeds: Vec<Value> = r
                    .seeds
                    .iter()
                    .map(|s| {
                        let m = &s.metrics;
                        json!({
                            "seed": s.seed,
                            "tp": m.confusion.tp,
                            "fp": m.confusion.fp,
                            "tn": m.confusion.tn,
                            "fn": m.confusion.fn_,
                            "precision": m.precision,
                            "recall": m.recall,
                            "accuracy": m.accuracy,
                            "latency_median_s": m.latency_median,
                        })
                    })
                    .collect();
                let deltas: Vec<Value> = self
                    .paired_deltas(r.regime)
                    .into_iter()
                    .map(|(seed, d)| json!({"seed": seed, "accuracy_delta": d}))
                    .collect();
                json!({
                    "name": r.regime.name(),
                    "seeds": seeds,
                    "median_accuracy": self.median_accuracy(r.regime),
                    "paired_deltas_vs_baseline": deltas,
                })
            })
            .collect();
        json!({ "regimes": regimes })
    }

    /// Medians across seeds in the layout Model | Precision | Recall |
    /// Accuracy | Latency, followed by per-seed accuracy deltas.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18}{:>11}{:>10}{:>10}{:>11}", "Model", "Precision", "Recall", "Accuracy", "Latency");
        for r in &self.regimes {
            let latency = self
                .median_of(r.regime, |m| m.latency_median)
                .map_or_else(|| "n/a".into(), |v| format!("{:.3}ms", v * 1e3));
            let _ = writeln!(
                s,
                "{:<18}{:>11}{:>10}{:>10}{:>11}",
                r.regime.name(),
                percent(self.median_of(r.regime, |m| m.precision)),
                percent(self.median_of(r.regime, |m| m.recall)),
                percent(self.median_accuracy(r.regime)),
                latency
            );
        }
        let guided: Vec<Regime> = self.regimes.iter().map(|r| r.regime).filter(|r| r.is_guided()).collect();
        if let Some(base) = self.regime(Regime::Baseline) {
            let _ = writeln!(s);
            let _ = write!(s, "{:<8}", "Seed");
            for r in &guided {
                let _ = write!(s, "{:>28}", format!("{} - baseline", r.name()));
            }
            let _ = writeln!(s);
            for (i, seed) in base.seeds.iter().map(|x| x.seed).enumerate() {
                let _ = write!(s, "{seed:<8}");
                for r in &guided {
                    let d = self.paired_deltas(*r).get(i).map_or(f64::NAN, |x| x.1);
                    let _ = write!(s, "{:>28}", format!("{:+.2} pp", 100.0 * d));
                }
                let _ = writeln!(s);
            }
        }
        s
    }
}

/// Progress messages emitted by [`run_comparison`].
pub type Observer<'a> = &'a mut dyn FnMut(&str);

/// For each seed: generates the dataset, trains every regime from the same
/// initialization on the same train split, evaluates each on the same test
/// split (single-modality path for guided models), then benchmarks latency
/// with all regimes interleaved.
pub fn run_comparison(config: &ComparisonConfig, observer: Observer<'_>) -> Result<ExperimentResult> {
    config.validate()?;
    let mut regimes: Vec<RegimeOutcome> = config
        .regimes
        .iter()
        .map(|&regime| RegimeOutcome { regime, seeds: Vec::new() })
        .collect();

    for &seed in &config.seeds {
        let gen = GeneratorConfig { seed, ..config.generator.clone() };
        observer(&format!("seed {seed}: generating {} samples", gen.n_samples));
        let (train_set, test_set) = partition(generate_samples(&gen)?.samples);
        let vocab = gen.vocab.vocab();
        let test_ids: Vec<String> = test_set.iter().map(|s| s.id.clone()).collect();
        let init = build_model(&config.train.preset, vocab.len(), seed)?;

        let mut models = Vec::with_capacity(regimes.len());
        for outcome in &mut regimes {
            let regime = outcome.regime;
            let tc = TrainConfig {
                seed,
                regime,
                ..config.train.clone()
            };
            let mut model = init.clone();
            let history = train_observed(&mut model, &train_set, &vocab, &tc, &mut |epoch, loss| {
                observer(&format!("seed {seed} {regime}: epoch {epoch}/{} loss {loss:.4}", tc.epochs))
            })?;
            let metrics = evaluate(&model, &test_set, regime.eval_path())?;
            observer(&format!("seed {seed} {regime}: test accuracy {:.4}", metrics.accuracy));
            outcome.seeds.push(SeedOutcome {
                seed,
                metrics,
                loss_history: history,
                test_ids: test_ids.clone(),
            });
            models.push(model);
        }

        let probe = latency_probe(&test_set)?;
        let pairs: Vec<_> = models.iter().zip(&regimes).map(|(m, o)| (m, o.regime.eval_path())).collect();
        let stats = bench_paired(&pairs, &probe, config.latency_warmup, config.latency_runs)?;
        for (outcome, st) in regimes.iter_mut().zip(stats) {
            let m = &mut outcome.seeds.last_mut().expect("pushed above").metrics;
            m.latency_median = Some(st.median);
            m.latency_p95 = Some(st.p95);
        }
    }
    Ok(ExperimentResult { regimes })
}

fn latency_probe(test_set: &[Sample]) -> Result<crate::numeric::Tensor> {
    let first = test_set.first().ok_or_else(|| Error::Config("test split is empty".into()))?;
    image_batch(&[first])
}
