use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Paper-standard train fraction.
pub const TRAIN_RATIO: f64 = 0.85;

/// Number of training items for `n` records at `ratio` (round half away from zero).
pub fn train_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Seeded shuffle, then the first `round(ratio·n)` items become the train split.
pub fn split_dataset<T>(records: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if records.len() < 2 {
        return Err(Error::Config(format!("cannot split {} record(s)", records.len())));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = train_count(n, ratio);
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(cut);
    let mut test = Vec::with_capacity(n - cut);
    for (rank, &i) in order.iter().enumerate() {
        let item = slots[i].take().expect("each index appears once");
        if rank < cut {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighty_five_fifteen() {
        let (train, test) = split_dataset((0..100).collect(), TRAIN_RATIO, 1).unwrap();
        assert_eq!((train.len(), test.len()), (85, 15));
    }

    #[test]
    fn same_seed_same_partition_and_partition_law() {
        let a = split_dataset((0..57).collect::<Vec<u32>>(), 0.7, 9).unwrap();
        let b = split_dataset((0..57).collect::<Vec<u32>>(), 0.7, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u32> = a.0.iter().chain(&a.1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
        assert_ne!(a.0, split_dataset((0..57).collect::<Vec<u32>>(), 0.7, 10).unwrap().0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_dataset(vec![1], 0.5, 0).is_err());
        assert!(split_dataset(vec![1, 2], 1.0, 0).is_err());
        assert!(split_dataset(vec![1, 2], 0.0, 0).is_err());
    }
}
