use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use super::trainer::ForwardPath;
use crate::error::{Error, Result};
use crate::model::{GuidanceModel, Mode};
use crate::numeric::{Graph, Tensor};

pub const MIN_RUNS: usize = 30;
pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_RUNS: usize = 1000;

/// Wall-clock seconds per single-sample forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub runs: Vec<f64>,
    pub median: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Median (mean of the two middle values for even counts) and
    /// nearest-rank 95th percentile.
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let mut sorted = runs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let rank = (0.95 * n as f64).ceil() as usize;
        LatencyStats {
            runs,
            median,
            p95: sorted[rank.max(1) - 1],
        }
    }
}

/// One unaudited forward pass, the same work a deployed model would do.
fn time_once(model: &GuidanceModel, image: &Tensor, path: ForwardPath) -> Result<f64> {
    let start = Instant::now();
    let mut g = Graph::new();
    let mut b = model.bindings();
    let x = g.constant(black_box(image).clone());
    let y = match path {
        ForwardPath::Baseline => model.forward_baseline(&mut g, &mut b, x, Mode::Eval)?,
        ForwardPath::Inference => model.forward_inference(&mut g, &mut b, x)?,
    };
    black_box(g.value(y));
    Ok(start.elapsed().as_secs_f64())
}

/// Times `n_runs` single-sample passes after `n_warmup` discarded ones.
/// `image` is a `[1, 3, H, W]` batch.
pub fn bench_latency(model: &GuidanceModel, path: ForwardPath, image: &Tensor, n_warmup: usize, n_runs: usize) -> Result<LatencyStats> {
    Ok(bench_paired(&[(model, path)], image, n_warmup, n_runs)?.remove(0))
}

/// Benchmarks several models round-robin on the same image, rotating which
/// goes first each round, so slow drifts in machine state hit all equally.
pub fn bench_paired(
    models: &[(&GuidanceModel, ForwardPath)],
    image: &Tensor,
    n_warmup: usize,
    n_runs: usize,
) -> Result<Vec<LatencyStats>> {
    if n_runs < MIN_RUNS {
        return Err(Error::Config(format!("latency benchmark needs at least {MIN_RUNS} runs, got {n_runs}")));
    }
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(crate::error::dim_err!("latency benchmark expects one [1, C, H, W] image, got {:?}", image.shape()));
    }
    let m = models.len();
    let mut runs = vec![Vec::with_capacity(n_runs); m];
    for round in 0..n_warmup + n_runs {
        for k in 0..m {
            let j = (round + k) % m;
            let (model, path) = models[j];
            let t = time_once(model, image, path)?;
            if round >= n_warmup {
                runs[j].push(t);
            }
        }
    }
    Ok(runs.into_iter().map(LatencyStats::from_runs).collect())
}
