//! The guidance network: text path, image path, fusion CNN, cross-modality
//! attention, and the three forward modes.
//!
//! All forward methods are batched. Images enter as `[N, C, H, W]`, tokens as
//! a flat `N * max_seq_len` id list, and logits leave as `[N, num_classes]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{InferenceAttention, ModelConfig};
use super::params::{he_uniform, lecun_uniform, Group, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::numeric::{BnMode, Graph, RunningStats, Scope, Tensor, Var};

/// Smallest image side the strided encoder accepts.
pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-statistics normalization, running-stat updates, trainable leaves.
    Train,
    Eval,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

/// Test hook that replaces the computed attention map in `forward_guided`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionOverride {
    Identity,
}

type Linear = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: usize,
    refine: [Linear; 2],
    image_convs: [Linear; 4],
    image_proj: Linear,
    fusion_convs: [Linear; 3],
    fusion_norms: [Linear; 3],
    query: Linear,
    key: Linear,
    classifier: Linear,
}

/// Graph leaves created for model parameters during one forward pass,
/// indexed like the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    slots: Vec<Option<Var>>,
}

impl Bindings {
    /// Pre-bound leaves, one per parameter in store order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bindings {
            slots: vars.iter().copied().map(Some).collect(),
        }
    }

    pub fn get(&self, idx: usize) -> Option<Var> {
        self.slots.get(idx).copied().flatten()
    }

    /// Indices of the parameters the pass actually touched.
    pub fn bound(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.map(|_| i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    norm_stats: Vec<RunningStats>,
    attention_override: Option<AttentionOverride>,
}

impl GuidanceModel {
    /// Builds a freshly initialized model. `seed` fully determines the weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = config.text_hidden_dim;

        let embedding = p.push("text.embedding", Group::Text, Tensor::uniform(&[config.vocab_size, d], -1.0, 1.0, &mut rng));
        let mut refine = [(0, 0); 2];
        for (i, slot) in refine.iter_mut().enumerate() {
            let w = p.push(format!("text.refine{}.weight", i + 1), Group::Text, he_uniform(&[d, d], d, &mut rng));
            let b = p.push(format!("text.refine{}.bias", i + 1), Group::Text, Tensor::zeros(&[d]));
            *slot = (w, b);
        }

        let mut image_convs = [(0, 0); 4];
        let mut c_in = config.image_channels_in;
        for (i, (slot, &c_out)) in image_convs.iter_mut().zip(&config.image_encoder_channels).enumerate() {
            let w = p.push(format!("image.conv{}.weight", i + 1), Group::Image, he_uniform(&[c_out, c_in, 3, 3], c_in * 9, &mut rng));
            let b = p.push(format!("image.conv{}.bias", i + 1), Group::Image, Tensor::zeros(&[c_out]));
            *slot = (w, b);
            c_in = c_out;
        }
        let c_img = config.image_embed_channels;
        let image_proj = (
            p.push("image.proj.weight", Group::Image, lecun_uniform(&[c_img, c_in, 1, 1], c_in, &mut rng)),
            p.push("image.proj.bias", Group::Image, Tensor::zeros(&[c_img])),
        );

        let plan = config.fusion_plan();
        let mut fusion_convs = [(0, 0); 3];
        let mut fusion_norms = [(0, 0); 3];
        for i in 0..3 {
            let (fi, fo) = (plan[i], plan[i + 1]);
            fusion_convs[i] = (
                p.push(format!("fusion.conv{}.weight", i + 1), Group::Fusion, he_uniform(&[fo, fi, 3, 3], fi * 9, &mut rng)),
                p.push(format!("fusion.conv{}.bias", i + 1), Group::Fusion, Tensor::zeros(&[fo])),
            );
            fusion_norms[i] = (
                p.push(format!("fusion.norm{}.gamma", i + 1), Group::Fusion, Tensor::full(&[fo], 1.0)),
                p.push(format!("fusion.norm{}.beta", i + 1), Group::Fusion, Tensor::zeros(&[fo])),
            );
        }

        let (f, dk) = (config.fusion_channels, config.attention_dim);
        let query = (
            p.push("attention.query.weight", Group::Attention, lecun_uniform(&[f, dk], f, &mut rng)),
            p.push("attention.query.bias", Group::Attention, Tensor::zeros(&[dk])),
        );
        let key = (
            p.push("attention.key.weight", Group::Attention, lecun_uniform(&[f, dk], f, &mut rng)),
            p.push("attention.key.bias", Group::Attention, Tensor::zeros(&[dk])),
        );
        let classifier = (
            p.push("classifier.weight", Group::Classifier, lecun_uniform(&[c_img, config.num_classes], c_img, &mut rng)),
            p.push("classifier.bias", Group::Classifier, Tensor::zeros(&[config.num_classes])),
        );

        let norm_stats = plan[1..].iter().map(|&c| RunningStats::new(c)).collect();
        Ok(GuidanceModel {
            config,
            params: p,
            layout: Layout {
                embedding,
                refine,
                image_convs,
                image_proj,
                fusion_convs,
                fusion_norms,
                query,
                key,
                classifier,
            },
            norm_stats,
            attention_override: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches the frozen flag; takes effect on the next forward pass.
    pub fn set_text_frozen(&mut self, frozen: bool) {
        self.config.text_frozen = frozen;
    }

    pub fn set_inference_attention(&mut self, mode: InferenceAttention) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.inference_attention = mode;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn set_attention_override(&mut self, hook: Option<AttentionOverride>) {
        self.attention_override = hook;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Running statistics of the three fusion normalization layers.
    pub fn norm_stats(&self) -> &[RunningStats] {
        &self.norm_stats
    }

    pub fn norm_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.norm_stats
    }

    pub fn bindings(&self) -> Bindings {
        Bindings {
            slots: vec![None; self.params.len()],
        }
    }

    fn trainable(&self, idx: usize, mode: Mode) -> bool {
        mode == Mode::Train && !(self.config.text_frozen && self.params.get(idx).group == Group::Text)
    }

    fn bind(&self, g: &mut Graph, b: &mut Bindings, idx: usize, mode: Mode) -> Var {
        if let Some(v) = b.get(idx) {
            return v;
        }
        let v = g.leaf(self.params.get(idx).value.clone(), self.trainable(idx, mode));
        b.slots[idx] = Some(v);
        v
    }

    fn linear(&self, g: &mut Graph, b: &mut Bindings, x: Var, (w, bias): Linear, mode: Mode) -> Result<Var> {
        let w = self.bind(g, b, w, mode);
        let bias = self.bind(g, b, bias, mode);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&self, g: &mut Graph, b: &mut Bindings, x: Var, (w, bias): Linear, stride: usize, padding: usize, mode: Mode) -> Result<Var> {
        let w = self.bind(g, b, w, mode);
        let bias = self.bind(g, b, bias, mode);
        let y = g.conv2d(x, w, stride, padding)?;
        g.add_channel_bias(y, bias)
    }

    /// Token ids -> `[N, text_hidden_dim, s, s]`, token `i` at cell `(i / s, i % s)`.
    pub fn text_encode(&self, g: &mut Graph, b: &mut Bindings, tokens: &[usize], mode: Mode) -> Result<Var> {
        let len = self.config.max_seq_len;
        if tokens.is_empty() || !tokens.len().is_multiple_of(len) {
            return Err(dim_err!("text_encode: {} ids is not a multiple of max_seq_len {}", tokens.len(), len));
        }
        let n = tokens.len() / len;
        let (d, s) = (self.config.text_hidden_dim, self.config.grid_side());
        let prev = g.set_scope(Scope::Text);
        let table = self.bind(g, b, self.layout.embedding, mode);
        let mut x = g.embedding(table, tokens, &[n, len])?;
        for layer in self.layout.refine {
            x = self.linear(g, b, x, layer, mode)?;
            x = g.relu(x)?;
        }
        let x = g.transpose(x)?;
        let x = g.reshape(x, &[n, d, s, s]);
        g.set_scope(prev);
        x
    }

    /// `[N, C, H, W]` -> `[N, image_embed_channels, s, s]` for any `H, W >= 16`.
    pub fn image_encode(&self, g: &mut Graph, b: &mut Bindings, images: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.config.image_channels_in {
            return Err(dim_err!(
                "image_encode: expected [N, {}, H, W], got {:?}",
                self.config.image_channels_in,
                shape
            ));
        }
        if shape[2] < MIN_IMAGE_SIDE || shape[3] < MIN_IMAGE_SIDE {
            return Err(dim_err!(
                "image_encode: {}x{} image is below the {}x{} minimum",
                shape[2],
                shape[3],
                MIN_IMAGE_SIDE,
                MIN_IMAGE_SIDE
            ));
        }
        let prev = g.set_scope(Scope::Image);
        let mut x = images;
        for layer in self.layout.image_convs {
            x = self.conv(g, b, x, layer, 2, 1, mode)?;
            x = g.relu(x)?;
        }
        x = self.conv(g, b, x, self.layout.image_proj, 1, 0, mode)?;
        let s = self.config.grid_side();
        let x = g.adaptive_avg_pool2d(x, s, s);
        g.set_scope(prev);
        x
    }

    /// Channel concat (text first) then three conv -> ReLU -> BatchNorm stages.
    pub fn fuse(&mut self, g: &mut Graph, b: &mut Bindings, text: Var, image: Var, mode: Mode) -> Result<Var> {
        let prev = g.set_scope(Scope::Fusion);
        let mut x = g.concat_channels(text, image)?;
        if g.shape(x)[1] != self.config.fusion_in() {
            return Err(dim_err!("fuse: {} input channels, expected {}", g.shape(x)[1], self.config.fusion_in()));
        }
        for i in 0..3 {
            x = self.conv(g, b, x, self.layout.fusion_convs[i], 1, 1, mode)?;
            x = g.relu(x)?;
            let (gamma, beta) = self.layout.fusion_norms[i];
            let gamma = self.bind(g, b, gamma, mode);
            let beta = self.bind(g, b, beta, mode);
            x = g.batchnorm2d(x, gamma, beta, &mut self.norm_stats[i], mode.bn())?;
        }
        g.set_scope(prev);
        Ok(x)
    }

    /// Row-stochastic `[N, s², s²]` map from scaled dot-product attention over
    /// the spatial tokens of `block` (`[N, C, s, s]` with `C == fusion_channels`).
    pub fn attention_map(&self, g: &mut Graph, b: &mut Bindings, block: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(block).to_vec();
        if shape.len() != 4 || shape[1] != self.config.fusion_channels {
            return Err(dim_err!(
                "attention_map: expected [N, {}, s, s], got {:?}",
                self.config.fusion_channels,
                shape
            ));
        }
        let prev = g.set_scope(Scope::Attention);
        let tokens = spatial_tokens(g, block)?;
        let q = self.linear(g, b, tokens, self.layout.query, mode)?;
        let k = self.linear(g, b, tokens, self.layout.key, mode)?;
        let kt = g.transpose(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.config.attention_dim as f64).sqrt())?;
        let attn = g.softmax_rows(scores);
        g.set_scope(prev);
        attn
    }

    /// Global average pool then a linear map to class logits.
    pub fn classify(&self, g: &mut Graph, b: &mut Bindings, embedding: Var, mode: Mode) -> Result<Var> {
        let prev = g.set_scope(Scope::Classifier);
        let pooled = g.global_avg_pool(embedding)?;
        let logits = self.linear(g, b, pooled, self.layout.classifier, mode);
        g.set_scope(prev);
        logits
    }

    /// Training-time path: the classifier sees only the image embedding
    /// re-weighted by the attention map of the fused block.
    pub fn forward_guided(&mut self, g: &mut Graph, b: &mut Bindings, images: Var, tokens: &[usize], mode: Mode) -> Result<Var> {
        let text = self.text_encode(g, b, tokens, mode)?;
        let image = self.image_encode(g, b, images, mode)?;
        if g.shape(text)[0] != g.shape(image)[0] {
            return Err(dim_err!(
                "forward_guided: {} captions for {} images",
                g.shape(text)[0],
                g.shape(image)[0]
            ));
        }
        let fusion = self.fuse(g, b, text, image, mode)?;
        let mut attn = self.attention_map(g, b, fusion, mode)?;
        if self.attention_override == Some(AttentionOverride::Identity) {
            let shape = g.shape(attn).to_vec();
            let eye = Tensor::eye(shape[1]);
            let stacked = Tensor::from_fn(&shape, |i| eye.data()[i % eye.len()]);
            attn = g.constant(stacked);
        }
        let prev = g.set_scope(Scope::Attention);
        let reweighted = reweight(g, attn, image)?;
        g.set_scope(prev);
        self.classify(g, b, reweighted, mode)
    }

    /// Image-only model: encoder and classifier, nothing else.
    pub fn forward_baseline(&self, g: &mut Graph, b: &mut Bindings, images: Var, mode: Mode) -> Result<Var> {
        let image = self.image_encode(g, b, images, mode)?;
        self.classify(g, b, image, mode)
    }

    /// Single-modality inference. Never touches text or fusion parameters.
    pub fn forward_inference(&self, g: &mut Graph, b: &mut Bindings, images: Var) -> Result<Var> {
        match self.config.inference_attention {
            InferenceAttention::None => self.forward_baseline(g, b, images, Mode::Eval),
            InferenceAttention::ImageSelf => {
                if self.config.image_embed_channels != self.config.fusion_channels {
                    return Err(Error::Config(
                        "image-self inference attention needs image_embed_channels == fusion_channels".into(),
                    ));
                }
                let image = self.image_encode(g, b, images, Mode::Eval)?;
                let attn = self.attention_map(g, b, image, Mode::Eval)?;
                let prev = g.set_scope(Scope::Attention);
                let reweighted = reweight(g, attn, image)?;
                g.set_scope(prev);
                self.classify(g, b, reweighted, Mode::Eval)
            }
        }
    }

    // ── Unbatched eval-mode conveniences ────────────────────────────────

    /// Text block `[text_hidden_dim, s, s]` for one caption.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.len() != self.config.max_seq_len {
            return Err(dim_err!("embed_text: {} ids, expected {}", tokens.len(), self.config.max_seq_len));
        }
        let mut g = Graph::new();
        let mut b = self.bindings();
        let t = self.text_encode(&mut g, &mut b, tokens, Mode::Eval)?;
        unbatch(&g, t)
    }

    /// Image block `[image_embed_channels, s, s]` for one `[C, H, W]` image.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bindings();
        let x = g.constant(batch_of_one(image)?);
        let e = self.image_encode(&mut g, &mut b, x, Mode::Eval)?;
        unbatch(&g, e)
    }

    /// Eval-mode fusion block and attention map for one image-caption pair.
    pub fn fusion_and_attention(&mut self, image: &Tensor, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut b = self.bindings();
        let x = g.constant(batch_of_one(image)?);
        let text = self.text_encode(&mut g, &mut b, tokens, Mode::Eval)?;
        let img = self.image_encode(&mut g, &mut b, x, Mode::Eval)?;
        let fusion = self.fuse(&mut g, &mut b, text, img, Mode::Eval)?;
        let attn = self.attention_map(&mut g, &mut b, fusion, Mode::Eval)?;
        Ok((unbatch(&g, fusion)?, unbatch(&g, attn)?))
    }

    /// Inference-path logits `[N, num_classes]` for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bindings();
        let x = g.constant(images.clone());
        let logits = self.forward_inference(&mut g, &mut b, x)?;
        Ok(g.value(logits).clone())
    }
}

/// `[N, C, s, s]` -> `[N, s², C]`.
fn spatial_tokens(g: &mut Graph, block: Var) -> Result<Var> {
    let s = g.shape(block).to_vec();
    let flat = g.reshape(block, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose(flat)
}

/// Applies a row-stochastic `[N, s², s²]` map to the spatial tokens of an
/// image block `[N, C, s, s]`; channel count is preserved (no value projection).
pub fn reweight(g: &mut Graph, attn: Var, image: Var) -> Result<Var> {
    let (sa, si) = (g.shape(attn).to_vec(), g.shape(image).to_vec());
    if si.len() != 4 || sa.len() != 3 || sa[0] != si[0] || sa[1] != si[2] * si[3] || sa[2] != sa[1] {
        return Err(dim_err!("reweight: attention {:?} does not fit image block {:?}", sa, si));
    }
    let tokens = spatial_tokens(g, image)?;
    let mixed = g.batch_matmul(attn, tokens)?;
    let back = g.transpose(mixed)?;
    g.reshape(back, &si)
}

fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn unbatch(g: &Graph, v: Var) -> Result<Tensor> {
    let t = g.value(v).clone();
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}
