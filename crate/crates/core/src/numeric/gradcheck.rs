//! Analytic-versus-central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Fault, Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-element relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared on an absolute scale.
    pub abs_floor: f64,
    /// Fraction of each block's elements to probe (1.0 = all).
    pub fraction: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            fraction: 1.0,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    /// Prefixes every block name, for merging reports from several checks.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for b in &mut self.blocks {
            b.name = format!("{prefix}.{}", b.name);
        }
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks `d loss / d input` for every named input block.
///
/// `build` must record a scalar loss from the supplied leaves; it is called
/// once for the analytic pass and twice per probed element. Numeric
/// disagreement is reported, never raised; errors come only from `build`.
pub fn grad_check<F>(inputs: &[(String, Tensor)], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        g.inject_fault(opts.fault);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    g.inject_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (bi, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let probes: Vec<usize> = if opts.fraction >= 1.0 {
            (0..n).collect()
        } else {
            let count = ((n as f64 * opts.fraction).ceil() as usize).clamp(n.min(1), n);
            let mut idx = sample(&mut rng, n, count).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut worst = 0.0f64;
        for &i in &probes {
            let orig = values[bi].data()[i];
            values[bi].data_mut()[i] = orig + opts.step;
            let up = eval(&values)?;
            values[bi].data_mut()[i] = orig - opts.step;
            let down = eval(&values)?;
            values[bi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[bi].data()[i], numeric, opts.abs_floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        blocks.push(BlockReport {
            name: name.clone(),
            checked: probes.len(),
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}
