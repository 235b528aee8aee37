//! The gradient-check suite: every primitive plus the full guided model.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Bindings, GuidanceModel, Mode, ModelConfig};
use crate::numeric::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::numeric::{BnMode, Graph, RunningStats, Tensor, Var};

/// Fraction of the full model's parameters probed by central differences.
pub const MODEL_PROBE_FRACTION: f64 = 0.03;

fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618).sin()));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn blocks(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> Vec<(String, Tensor)> {
    specs
        .iter()
        .map(|(name, shape)| (name.to_string(), Tensor::uniform(shape, -1.0, 1.0, rng)))
        .collect()
}

/// Uniform in ±[1e-3, 1], so no probe straddles the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(1e-3..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Checks each primitive on random inputs drawn from [-1, 1].
pub fn check_primitives(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut all = Vec::new();
    let mut run = |name: &str, inputs: Vec<(String, Tensor)>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let report = grad_check(&inputs, f, opts)?.prefixed(name);
        all.extend(report.blocks);
        Ok(())
    };

    run("matmul", blocks(&mut rng, &[("a", &[3, 4]), ("b", &[4, 5])]), &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y)
    })?;
    run("batch_matmul", blocks(&mut rng, &[("a", &[2, 3, 4]), ("b", &[2, 4, 3])]), &|g, v| {
        let y = g.batch_matmul(v[0], v[1])?;
        let y = g.transpose(y)?;
        weighted_sum(g, y)
    })?;
    run("conv2d", blocks(&mut rng, &[("input", &[2, 3, 6, 6]), ("kernel", &[4, 3, 3, 3])]), &|g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(g, y)
    })?;
    let bn_inputs = blocks(&mut rng, &[("x", &[3, 2, 3, 3]), ("gamma", &[2]), ("beta", &[2])]);
    for (name, mode) in [("batchnorm2d_train", BnMode::Train), ("batchnorm2d_eval", BnMode::Eval)] {
        run(name, bn_inputs.clone(), &move |g, v| {
            let mut stats = RunningStats { mean: vec![0.1, -0.3], var: vec![0.8, 1.3] };
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, mode)?;
            weighted_sum(g, y)
        })?;
    }
    run("relu", vec![("x".into(), off_kink(&mut rng, &[4, 6]))], &|g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y)
    })?;
    run("softmax_rows", blocks(&mut rng, &[("x", &[4, 5])]), &|g, v| {
        let y = g.softmax_rows(v[0])?;
        weighted_sum(g, y)
    })?;
    run("concat_channels", blocks(&mut rng, &[("a", &[2, 2, 3, 3]), ("b", &[2, 3, 3, 3])]), &|g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        weighted_sum(g, y)
    })?;
    run("bias", blocks(&mut rng, &[("x", &[2, 3, 2, 2]), ("channel", &[3]), ("row", &[2])]), &|g, v| {
        let y = g.add_channel_bias(v[0], v[1])?;
        let y = g.add_row_bias(y, v[2])?;
        weighted_sum(g, y)
    })?;
    run("pooling", blocks(&mut rng, &[("x", &[2, 2, 7, 5])]), &|g, v| {
        let y = g.adaptive_avg_pool2d(v[0], 3, 4)?;
        let y = g.global_avg_pool(y)?;
        weighted_sum(g, y)
    })?;
    run("embedding", blocks(&mut rng, &[("table", &[6, 4])]), &|g, v| {
        let y = g.embedding(v[0], &[5, 0, 2, 2, 1, 5], &[2, 3])?;
        weighted_sum(g, y)
    })?;
    run("cross_entropy", blocks(&mut rng, &[("logits", &[4, 3])]), &|g, v| g.cross_entropy(v[0], &[1, 0, 2, 1]))?;
    run("elementwise", blocks(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4])]), &|g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.scale(y, -1.7)?;
        let y = g.reshape(y, &[2, 6])?;
        let m = g.mean(y)?;
        let s = weighted_sum(g, y)?;
        let p = g.mul(m, s)?;
        let t = g.sum(v[0])?;
        let both = g.mul(p, t)?;
        g.scale(both, 0.5)
    })?;

    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        blocks: all,
    })
}

/// Random images (`batch × 3 × side × side`), captions and labels for
/// exercising a model.
pub fn random_batch(config: &ModelConfig, batch: usize, side: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[batch, config.image_channels_in, side, side], 0.0, 1.0, &mut rng);
    let tokens = (0..batch * config.max_seq_len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..config.num_classes)).collect();
    (images, tokens, labels)
}

/// Central-difference check of the guided training loss with respect to a
/// random subsample of every parameter block.
pub fn check_guided_model(
    model: &GuidanceModel,
    images: &Tensor,
    tokens: &[usize],
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let inputs: Vec<(String, Tensor)> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let mut working = model.clone();
    working.set_text_frozen(false);
    let working = RefCell::new(working);
    grad_check(
        &inputs,
        |g, vars| {
            let mut m = working.borrow_mut();
            let mut b = Bindings::from_vars(vars);
            let x = g.constant(images.clone());
            let logits = m.forward_guided(g, &mut b, x, tokens, Mode::Train)?;
            g.cross_entropy(logits, labels)
        },
        opts,
    )
}

/// Primitives followed by the desk-preset guided model.
pub fn gradient_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = check_primitives(opts)?;
    let config = ModelConfig::desk(24);
    let model = GuidanceModel::new(config.clone(), opts.seed)?;
    // 32×32 keeps the s×s image grid non-constant, so attention gradients are non-trivial.
    let (images, tokens, labels) = random_batch(&config, 2, 32, opts.seed.wrapping_add(1));
    let model_opts = GradCheckOptions {
        fraction: opts.fraction.min(MODEL_PROBE_FRACTION),
        ..opts.clone()
    };
    let model_report = check_guided_model(&model, &images, &tokens, &labels, &model_opts)?.prefixed("guided_model");
    report.blocks.extend(model_report.blocks);
    Ok(report)
}
