//! Synthetic dataset generation, the on-disk format and the loader.

pub mod generator;
pub mod manifest;
pub mod ppm;
pub mod split;

use std::thread;

pub use generator::{generate_dataset, generate_samples, write_dataset, CaptionVocab, DatasetSummary, Generated, GeneratorConfig};
pub use manifest::{load_manifest, write_manifest, Manifest, SampleRecord, Split};
pub use ppm::{decode_image, read_image, RgbImage};
pub use split::{split_dataset, TRAIN_RATIO};

use crate::error::Result;

/// A decoded sample, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// 0 or 1.
    pub label: usize,
    pub caption: String,
    pub split: Split,
    pub image: RgbImage,
}

/// Decodes every image of a manifest, preserving record order. Decoding is
/// spread over the available cores.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = manifest.records.len().div_ceil(workers).max(1);
    let decoded: Vec<Result<Vec<Sample>>> = thread::scope(|s| {
        let handles: Vec<_> = manifest
            .records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| {
                            Ok(Sample {
                                id: r.id.clone(),
                                label: r.label as usize,
                                caption: r.caption.clone(),
                                split: r.split,
                                image: read_image(&manifest.image_file(r))?,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(manifest.records.len());
    for part in decoded {
        out.extend(part?);
    }
    Ok(out)
}

/// Splits samples by their recorded split, keeping order.
pub fn partition(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| s.split == Split::Train)
}
