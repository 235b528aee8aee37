use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Regime, TrainConfig};
use super::metrics::{Confusion, MetricsReport};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Group, GuidanceModel, Mode, ModelConfig, Vocab};
use crate::numeric::{Adam, AdamConfig, Graph, Scope, Tensor};
use crate::seed::{derive, Stream};

const EVAL_BATCH: usize = 64;

/// Which forward path produces the logits at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardPath {
    /// Image encoder and classifier in eval mode.
    Baseline,
    /// The single-modality path of a guided model.
    Inference,
}

impl Regime {
    pub fn eval_path(self) -> ForwardPath {
        if self.is_guided() {
            ForwardPath::Inference
        } else {
            ForwardPath::Baseline
        }
    }
}

/// A freshly initialized model for `preset`, seeded from the init stream of `seed`.
pub fn build_model(preset: &str, vocab_size: usize, seed: u64) -> Result<GuidanceModel> {
    GuidanceModel::new(ModelConfig::preset(preset, vocab_size)?, derive(seed, Stream::Init))
}

/// Stacks sample images into `[N, 3, H, W]`.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (w, h) = (first.image.width(), first.image.height());
    let per = 3 * w * h;
    let mut data = vec![0.0; per * samples.len()];
    for (s, out) in samples.iter().zip(data.chunks_exact_mut(per)) {
        if (s.image.width(), s.image.height()) != (w, h) {
            return Err(crate::error::dim_err!(
                "sample {} is {}x{}, batch is {}x{}",
                s.id,
                s.image.width(),
                s.image.height(),
                w,
                h
            ));
        }
        s.image.write_chw(out);
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Trains `model` in place and returns the per-epoch mean cross-entropy.
pub fn train(model: &mut GuidanceModel, samples: &[Sample], vocab: &Vocab, config: &TrainConfig) -> Result<Vec<f64>> {
    train_observed(model, samples, vocab, config, &mut |_, _| {})
}

/// [`train`], calling `observer(epoch, mean_loss)` after each epoch (1-based).
pub fn train_observed(
    model: &mut GuidanceModel,
    samples: &[Sample],
    vocab: &Vocab,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    model.set_text_frozen(config.regime.text_frozen());
    let seq = model.config().max_seq_len;
    let tokens: Vec<Vec<usize>> = samples.iter().map(|s| vocab.tokenize(&s.caption, seq)).collect();

    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, Stream::Shuffle));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let mut b = model.bindings();
            let x = g.constant(image_batch(&batch)?);
            let logits = if config.regime.is_guided() {
                let ids: Vec<usize> = idx.iter().flat_map(|&i| tokens[i].iter().copied()).collect();
                model.forward_guided(&mut g, &mut b, x, &ids, Mode::Train)?
            } else {
                model.forward_baseline(&mut g, &mut b, x, Mode::Train)?
            };
            let prev = g.set_scope(Scope::Loss);
            let loss = g.cross_entropy(logits, &labels)?;
            g.set_scope(prev);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {}",
                    batch_no + 1
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = (0..model.params().len()).map(|i| b.get(i).and_then(|v| g.grad(v))).collect();
            adam.step(model.params_mut().iter_mut().map(|p| &mut p.value).zip(grads))?;
            total += value * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        observer(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Eval-mode logits for a batch of images along `path`.
pub fn logits(model: &GuidanceModel, images: &Tensor, path: ForwardPath) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = model.bindings();
    let x = g.constant(images.clone());
    let y = match path {
        ForwardPath::Baseline => model.forward_baseline(&mut g, &mut b, x, Mode::Eval)?,
        ForwardPath::Inference => {
            let y = model.forward_inference(&mut g, &mut b, x)?;
            let audit = InferenceAudit::of(model, &g, &b);
            if !audit.is_clean() {
                return Err(Error::Contract(format!("inference path touched the text or fusion branch: {audit:?}")));
            }
            y
        }
    };
    Ok(g.value(y).clone())
}

/// What one inference graph recorded outside the image branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceAudit {
    pub text_ops: usize,
    pub fusion_ops: usize,
    /// Text or fusion parameters bound as graph leaves.
    pub text_or_fusion_params: usize,
    pub total_ops: usize,
}

impl InferenceAudit {
    pub fn of(model: &GuidanceModel, g: &Graph, b: &crate::model::Bindings) -> Self {
        InferenceAudit {
            text_ops: g.count_in_scope(Scope::Text),
            fusion_ops: g.count_in_scope(Scope::Fusion),
            text_or_fusion_params: b
                .bound()
                .filter(|&i| matches!(model.params().get(i).group, Group::Text | Group::Fusion))
                .count(),
            total_ops: g.len(),
        }
    }

    /// Runs one single-image inference pass and audits it.
    pub fn run(model: &GuidanceModel, image: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let mut b = model.bindings();
        let x = g.constant(image.clone());
        model.forward_inference(&mut g, &mut b, x)?;
        Ok(Self::of(model, &g, &b))
    }

    pub fn is_clean(&self) -> bool {
        self.text_ops == 0 && self.fusion_ops == 0 && self.text_or_fusion_params == 0
    }
}

/// Predicted class per sample (argmax logit, lowest index on ties).
pub fn predict_labels(model: &GuidanceModel, samples: &[Sample], path: ForwardPath) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let y = logits(model, &image_batch(&refs)?, path)?;
        let k = y.shape()[1];
        out.extend(y.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

/// Confusion counts and derived metrics over `samples`; latency fields are left empty.
pub fn evaluate(model: &GuidanceModel, samples: &[Sample], path: ForwardPath) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let predicted = predict_labels(model, samples, path)?;
    let actual: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(MetricsReport::from_confusion(Confusion::from_predictions(&predicted, &actual)))
}
