//! Class-balanced batch sampling with sentence-shuffle augmentation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// One sampled batch slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draw {
    pub item: usize,
    /// The class this slot was filled for.
    pub class: usize,
    /// Order in which the item's sentence segments are concatenated.
    pub segment_order: Vec<usize>,
}

impl Draw {
    /// Concatenates `segments` in this draw's order.
    pub fn assemble<T: Clone>(&self, segments: &[Vec<T>]) -> Vec<T> {
        self.segment_order
            .iter()
            .flat_map(|&s| segments[s].iter().cloned())
            .collect()
    }
}

/// Fills batch slots by cycling over classes and drawing a random
/// instance of each. An instance drawn again within the same epoch gets
/// its segments permuted.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<(usize, Vec<usize>)>,
    segment_counts: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    seen: HashSet<usize>,
}

impl BalancedSampler {
    /// `item_classes[i]` lists the positive classes of item `i`;
    /// `segment_counts[i]` its number of sentence segments.
    pub fn new(
        item_classes: &[Vec<usize>],
        segment_counts: &[usize],
        num_classes: usize,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if item_classes.len() != segment_counts.len() {
            return Err(Error::dim(
                "balanced_batches",
                &[item_classes.len()],
                &[segment_counts.len()],
            ));
        }
        let mut members = vec![Vec::new(); num_classes];
        for (i, classes) in item_classes.iter().enumerate() {
            for &c in classes {
                if c >= num_classes {
                    return Err(Error::Index {
                        index: c,
                        bound: num_classes,
                    });
                }
                members[c].push(i);
            }
        }
        let empty: Vec<usize> = (0..num_classes).filter(|&c| members[c].is_empty()).collect();
        if !empty.is_empty() {
            log::info!(
                "{} class(es) without training instances skipped: {empty:?}",
                empty.len()
            );
        }
        let by_class: Vec<_> = members.into_iter().enumerate().filter(|(_, m)| !m.is_empty()).collect();
        if by_class.is_empty() {
            return Err(Error::Contract("no class has a training instance".into()));
        }
        Ok(Self {
            by_class,
            segment_counts: segment_counts.to_vec(),
            batch_size,
            cursor: 0,
            seen: HashSet::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Classes that receive slots.
    pub fn active_classes(&self) -> Vec<usize> {
        self.by_class.iter().map(|(c, _)| *c).collect()
    }

    /// Forgets which instances were drawn; call at each epoch boundary.
    pub fn start_epoch(&mut self) {
        self.seen.clear();
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Draw> {
        (0..self.batch_size).map(|_| self.draw(rng)).collect()
    }

    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Draw {
        let (class, members) = &self.by_class[self.cursor];
        self.cursor = (self.cursor + 1) % self.by_class.len();
        let item = members[rng.gen_range(0..members.len())];
        let n = self.segment_counts[item];
        let mut order: Vec<usize> = (0..n).collect();
        if !self.seen.insert(item) && n >= 2 {
            loop {
                order.shuffle(rng);
                if order.iter().enumerate().any(|(i, &o)| i != o) {
                    break;
                }
            }
        }
        Draw {
            item,
            class: *class,
            segment_order: order,
        }
    }
}
