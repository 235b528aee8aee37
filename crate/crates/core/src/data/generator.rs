//! Synthetic image-caption generator.
//!
//! Images are noisy gray backgrounds. Label 1 images carry a bright
//! plus-shaped cross at a random location; label 0 images carry none. A
//! diagonal stripe texture (the distractor) is drawn in the
//! background and agrees with the label with probability ρ, which differs
//! between the train and test splits. Captions name the cue category, so the
//! text alone determines the label.
//!
//! Pixel arithmetic is integer-only so output bytes are platform independent.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, SampleRecord, Split};
use super::ppm::RgbImage;
use super::split::{split_dataset, TRAIN_RATIO};
use super::Sample;
use crate::error::{Error, Result};
use crate::model::{Vocab, MIN_IMAGE_SIDE};
use crate::seed::{derive, Stream};

pub const MIN_SAMPLES: usize = 10;

/// Word lists captions are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionVocab {
    pub positive_cues: Vec<String>,
    pub negative_cues: Vec<String>,
    pub scenes: Vec<String>,
    pub devices: Vec<String>,
    pub fillers: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for CaptionVocab {
    fn default() -> Self {
        CaptionVocab {
            positive_cues: words(&["cross", "crossed", "plus"]),
            negative_cues: words(&["calm", "quiet", "plain"]),
            scenes: words(&["arena", "street", "studio", "forest", "city", "desert", "harbor", "lobby"]),
            devices: words(&["mobile", "desktop", "console", "tablet", "handheld"]),
            fillers: words(&["live", "stream", "tonight", "with", "friends", "new", "season", "ranked", "chill", "hd", "chat", "replay"]),
        }
    }
}

impl CaptionVocab {
    /// Model vocabulary covering every caption word, in a fixed order.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(
            self.positive_cues
                .iter()
                .chain(&self.negative_cues)
                .chain(&self.scenes)
                .chain(&self.devices)
                .chain(&self.fillers),
        )
    }

    fn validate(&self) -> Result<()> {
        let lists = [
            ("positive_cues", &self.positive_cues),
            ("negative_cues", &self.negative_cues),
            ("scenes", &self.scenes),
            ("devices", &self.devices),
            ("fillers", &self.fillers),
        ];
        for (name, list) in lists {
            if list.is_empty() {
                return Err(Error::Config(format!("caption vocabulary list `{name}` is empty")));
            }
            if let Some(w) = list.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
                return Err(Error::Config(format!("caption word {w:?} in `{name}` must be one non-empty token")));
            }
        }
        let lower = |l: &Vec<String>| l.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>();
        let pos = lower(&self.positive_cues);
        if let Some(w) = lower(&self.negative_cues).iter().find(|w| pos.contains(w)) {
            return Err(Error::Config(format!("cue word `{w}` names both classes")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    /// Height and width in pixels.
    pub image_size: usize,
    /// Probability of label 1.
    pub cue_probability: f64,
    /// Probability that the stripe distractor agrees with the label.
    pub rho_train: f64,
    pub rho_test: f64,
    pub train_ratio: f64,
    pub seed: u64,
    pub vocab: CaptionVocab,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 10_000,
            image_size: 64,
            cue_probability: 0.5,
            rho_train: 0.85,
            rho_test: 0.5,
            train_ratio: TRAIN_RATIO,
            seed: 1,
            vocab: CaptionVocab::default(),
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < MIN_SAMPLES {
            return Err(Error::Config(format!("n_samples must be at least {MIN_SAMPLES}, got {}", self.n_samples)));
        }
        if self.image_size < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!("image_size must be at least {MIN_IMAGE_SIDE}, got {}", self.image_size)));
        }
        check_probability("cue_probability", self.cue_probability)?;
        check_probability("rho_train", self.rho_train)?;
        check_probability("rho_test", self.rho_test)?;
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio)));
        }
        self.vocab.validate()
    }
}

/// In-memory output of the generator. `distractor[i]` records whether
/// `samples[i]` carries the stripe texture (not part of the manifest).
#[derive(Clone, Debug)]
pub struct Generated {
    pub samples: Vec<Sample>,
    pub distractor: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub train: usize,
    pub test: usize,
    pub train_positive: usize,
    pub test_positive: usize,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

const BASE_LEVEL: (u8, u8) = (0, 40);
const NOISE: i32 = 16;
const STRIPE_PERIOD: usize = 8;
const STRIPE_WIDTH: usize = 3;
const STRIPE_GAIN: i32 = 40;
const GLYPH_GAIN: i32 = 140;

fn add(p: u8, d: i32) -> u8 {
    (p as i32 + d).clamp(0, 255) as u8
}

/// Pixel offsets of a plus sign with arms of length `arm`.
fn cross(arm: i64) -> Vec<(i64, i64)> {
    let mut pts = vec![(0, 0)];
    for d in 1..=arm {
        pts.extend([(d, 0), (-d, 0), (0, d), (0, -d)]);
    }
    pts
}

fn render(rng: &mut ChaCha8Rng, side: usize, positive: bool, distractor: bool) -> RgbImage {
    let base = rng.gen_range(BASE_LEVEL.0..=BASE_LEVEL.1);
    let tint: [i32; 3] = [rng.gen_range(-10..=10), rng.gen_range(-10..=10), rng.gen_range(-10..=10)];
    let mut img = RgbImage::filled(side, side, [base; 3]);
    for y in 0..side {
        for x in 0..side {
            let mut px = img.get(x, y);
            for (c, v) in px.iter_mut().enumerate() {
                *v = add(*v, tint[c] + rng.gen_range(-NOISE..=NOISE));
            }
            img.set(x, y, px);
        }
    }
    if distractor {
        let phase = rng.gen_range(0..STRIPE_PERIOD);
        for y in 0..side {
            for x in 0..side {
                if (x + y + phase) % STRIPE_PERIOD < STRIPE_WIDTH {
                    let px = img.get(x, y).map(|v| add(v, STRIPE_GAIN));
                    img.set(x, y, px);
                }
            }
        }
    }
    let arm = (side / 10).max(2) as i64;
    let margin = arm + 1;
    let cx = rng.gen_range(margin..side as i64 - margin);
    let cy = rng.gen_range(margin..side as i64 - margin);
    let color: [i32; 3] = [GLYPH_GAIN + rng.gen_range(0..=20), GLYPH_GAIN + rng.gen_range(0..=20), GLYPH_GAIN + rng.gen_range(0..=20)];
    if !positive {
        return img;
    }
    for (dx, dy) in cross(arm) {
        let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
        let px = img.get(x, y);
        img.set(x, y, [add(px[0], color[0]), add(px[1], color[1]), add(px[2], color[2])]);
    }
    img
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &'a [String]) -> &'a str {
    list.choose(rng).expect("validated non-empty")
}

fn caption(rng: &mut ChaCha8Rng, vocab: &CaptionVocab, positive: bool) -> String {
    let cue = pick(rng, if positive { &vocab.positive_cues } else { &vocab.negative_cues });
    let scene = pick(rng, &vocab.scenes);
    let device = pick(rng, &vocab.devices);
    let mut tokens: Vec<&str> = (0..rng.gen_range(1..=3)).map(|_| pick(rng, &vocab.fillers)).collect();
    tokens.extend([cue, scene]);
    tokens.extend((0..rng.gen_range(0..=2)).map(|_| pick(rng, &vocab.fillers)));
    tokens.push(device);
    tokens.join(" ")
}

/// Generates every sample in memory. Split membership is decided first
/// (seeded shuffle), then samples are drawn in id order from the data stream.
pub fn generate_samples(config: &GeneratorConfig) -> Result<Generated> {
    config.validate()?;
    let n = config.n_samples;
    let (train_idx, _) = split_dataset((0..n).collect(), config.train_ratio, derive(config.seed, Stream::Split))?;
    let mut split = vec![Split::Test; n];
    for i in train_idx {
        split[i] = Split::Train;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, Stream::Data));
    let mut samples = Vec::with_capacity(n);
    let mut distractor = Vec::with_capacity(n);
    for (i, &split) in split.iter().enumerate() {
        let positive = rng.gen_bool(config.cue_probability);
        let rho = match split {
            Split::Train => config.rho_train,
            Split::Test => config.rho_test,
        };
        let has_stripes = if rng.gen_bool(rho) { positive } else { !positive };
        let image = render(&mut rng, config.image_size, positive, has_stripes);
        let caption = caption(&mut rng, &config.vocab, positive);
        samples.push(Sample {
            id: sample_id(i),
            label: positive as usize,
            caption,
            split,
            image,
        });
        distractor.push(has_stripes);
    }
    Ok(Generated { samples, distractor })
}

/// Writes `images/<id>.ppm` and `manifest.jsonl` under `out_dir`.
pub fn write_dataset(out_dir: &Path, samples: &[Sample]) -> Result<DatasetSummary> {
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    let mut summary = DatasetSummary {
        manifest: out_dir.join("manifest.jsonl"),
        train: 0,
        test: 0,
        train_positive: 0,
        test_positive: 0,
    };
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        let path = image_dir.join(format!("{}.ppm", s.id));
        std::fs::write(&path, s.image.encode()).map_err(|e| Error::io(&path, e))?;
        match s.split {
            Split::Train => {
                summary.train += 1;
                summary.train_positive += s.label;
            }
            Split::Test => {
                summary.test += 1;
                summary.test_positive += s.label;
            }
        }
        records.push(SampleRecord {
            id: s.id.clone(),
            label: s.label as u8,
            caption: s.caption.clone(),
            image_path: rel,
            split: s.split,
        });
    }
    write_manifest(&summary.manifest, &records)?;
    Ok(summary)
}

pub fn generate_dataset(config: &GeneratorConfig, out_dir: &Path) -> Result<DatasetSummary> {
    let generated = generate_samples(config)?;
    write_dataset(out_dir, &generated.samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_shape() {
        let pts = cross(3);
        assert_eq!(pts.len(), 13);
        assert!(pts.iter().all(|&(x, y)| (x == 0 || y == 0) && x.abs() <= 3 && y.abs() <= 3));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            GeneratorConfig { rho_train: 1.5, ..Default::default() },
            GeneratorConfig { rho_test: -0.1, ..Default::default() },
            GeneratorConfig { n_samples: 9, ..Default::default() },
            GeneratorConfig { image_size: 8, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
