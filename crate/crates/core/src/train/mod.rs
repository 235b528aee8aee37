//! Training loops, evaluation metrics, latency benchmarking, the zero-shot
//! cosine classifier and the regime comparison.

pub mod compare;
pub mod config;
pub mod latency;
pub mod metrics;
pub mod trainer;
pub mod zero_shot;

pub use compare::{run_comparison, ComparisonConfig, ExperimentResult, RegimeOutcome, SeedOutcome};
pub use config::{Regime, TrainConfig};
pub use latency::{bench_latency, bench_paired, LatencyStats};
pub use metrics::{Confusion, MetricsReport};
pub use trainer::{build_model, evaluate, image_batch, logits, predict_labels, train, train_observed, ForwardPath, InferenceAudit};
pub use zero_shot::zero_shot_classify;
