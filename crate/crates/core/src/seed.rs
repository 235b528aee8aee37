//! Derivation of independent sub-seeds from one user seed.
//!
//! `derive(root, stream) = splitmix64(splitmix64(root) ^ stream·φ)` where φ is
//! the 64-bit golden-ratio constant. Each [`Stream`] has a fixed id, so adding
//! a stream never shifts the others.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Labels, captions and pixels of the synthetic dataset.
    Data = 1,
    /// Train/test assignment.
    Split = 2,
    /// Model weight initialization.
    Init = 3,
    /// Minibatch order.
    Shuffle = 4,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(root) ^ (stream as u64).wrapping_mul(GOLDEN))
}
