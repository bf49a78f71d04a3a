use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded train / validation / test partition sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub validation_count: usize,
    pub test_count: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            validation_count: 300,
            test_count: 300,
        }
    }
}

/// Shuffles with the spec's seed, then takes validation, test and the
/// remaining training records, in that order.
pub fn split_dataset<T: Clone>(records: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let held_out = spec.validation_count + spec.test_count;
    if held_out > records.len() {
        return Err(Error::Contract(format!(
            "cannot hold out {} validation + {} test records from {}",
            spec.validation_count,
            spec.test_count,
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let val = pick(&order[..spec.validation_count]);
    let test = pick(&order[spec.validation_count..held_out]);
    let train = pick(&order[held_out..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sizes_and_cover() {
        let recs: Vec<u32> = (0..1000).collect();
        let (tr, va, te) = split_dataset(&recs, &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (400, 300, 300));
        let all: HashSet<u32> = tr.iter().chain(&va).chain(&te).copied().collect();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn seeded() {
        let recs: Vec<u32> = (0..20).collect();
        let spec = SplitSpec {
            seed: 1,
            validation_count: 5,
            test_count: 5,
        };
        assert_eq!(
            split_dataset(&recs, &spec).unwrap(),
            split_dataset(&recs, &spec).unwrap()
        );
        let other = SplitSpec { seed: 2, ..spec };
        assert_ne!(
            split_dataset(&recs, &spec).unwrap(),
            split_dataset(&recs, &other).unwrap()
        );
    }

    #[test]
    fn infeasible_counts() {
        let recs: Vec<u32> = (0..10).collect();
        let spec = SplitSpec {
            seed: 1,
            validation_count: 6,
            test_count: 5,
        };
        assert!(matches!(split_dataset(&recs, &spec), Err(Error::Contract(_))));
    }
}
