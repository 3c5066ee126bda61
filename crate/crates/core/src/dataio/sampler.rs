use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSplit;

/// Endless epoch iterator over a pool: shuffle, walk, reshuffle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicSampler {
    ids: Vec<String>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    pub fn new(ids: Vec<String>, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..ids.len()).collect(),
            pos: ids.len(),
            ids,
            rng,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn next_id(&mut self) -> Option<&str> {
        if self.ids.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let id = &self.ids[self.order[self.pos]];
        self.pos += 1;
        Some(id)
    }

    pub fn batch(&mut self, size: usize) -> Vec<String> {
        (0..size)
            .map_while(|_| self.next_id().map(str::to_string))
            .collect()
    }
}

/// Paired labeled/unlabeled batch stream. The two pools cycle independently,
/// so the shorter one simply wraps around more often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub labeled: CyclicSampler,
    pub unlabeled: CyclicSampler,
    pub labeled_bs: usize,
    pub unlabeled_bs: usize,
}

impl BatchSampler {
    pub fn new(split: &DatasetSplit, labeled_bs: usize, unlabeled_bs: usize, seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            labeled: CyclicSampler::new(split.labeled_ids.clone(), stream(11)),
            unlabeled: CyclicSampler::new(split.unlabeled_ids.clone(), stream(12)),
            labeled_bs,
            unlabeled_bs,
        }
    }

    /// Next `(labeled, unlabeled)` id batch; an empty unlabeled pool yields
    /// empty unlabeled batches.
    pub fn next_batches(&mut self) -> (Vec<String>, Vec<String>) {
        (
            self.labeled.batch(self.labeled_bs),
            self.unlabeled.batch(self.unlabeled_bs),
        )
    }
}

/// One draw from a fresh sampler seeded with `seed`.
pub fn sample_batches(
    split: &DatasetSplit,
    labeled_bs: usize,
    unlabeled_bs: usize,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    BatchSampler::new(split, labeled_bs, unlabeled_bs, seed).next_batches()
}
