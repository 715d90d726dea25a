//! Bounded rehearsal memory of raw training patterns.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Algorithm R: the n-th pattern seen replaces a random slot with
    /// probability `capacity / n`.
    #[default]
    Reservoir,
    /// Each class seen so far keeps at most `capacity / classes_seen` of its
    /// newest patterns.
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferItem {
    pub features: Vec<f32>,
    pub label: usize,
    /// Position of the pattern in the stream of everything offered to the buffer.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    sampling: Sampling,
    seen: u64,
    items: Vec<BufferItem>,
    /// Retained count per class (class-balanced bookkeeping).
    class_counts: BTreeMap<usize, usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sampling: Sampling) -> Self {
        Self {
            capacity,
            sampling,
            seen: 0,
            items: Vec::new(),
            class_counts: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    /// Patterns ever offered to the buffer.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &BufferItem {
        &self.items[i]
    }

    pub fn to_batch(&self, feature_dim: usize) -> Batch {
        let mut b = Batch::empty(feature_dim);
        for it in &self.items {
            b.push(&it.features, it.label);
        }
        b
    }

    /// Offers every row of `batch`, in order, drawing randomness from `rng`.
    pub fn offer<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) {
        for i in 0..batch.len() {
            self.offer_one(batch.row(i), batch.labels[i], rng);
        }
    }

    fn offer_one<R: Rng + ?Sized>(&mut self, features: &[f32], label: usize, rng: &mut R) {
        let seq = self.seen;
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        let item = BufferItem {
            features: features.to_vec(),
            label,
            seq,
        };
        match self.sampling {
            Sampling::Reservoir => {
                if self.items.len() < self.capacity {
                    self.items.push(item);
                } else {
                    let j = rng.random_range(0..self.seen);
                    if (j as usize) < self.capacity {
                        self.items[j as usize] = item;
                    }
                }
            }
            Sampling::ClassBalanced => {
                let new_class = !self.class_counts.contains_key(&label);
                if new_class {
                    self.class_counts.insert(label, 0);
                }
                let quota = self.capacity / self.class_counts.len();
                if new_class {
                    let classes: Vec<usize> = self.class_counts.keys().copied().collect();
                    for c in classes {
                        self.trim_class(c, quota);
                    }
                }
                if quota > 0 {
                    self.items.push(item);
                    *self.class_counts.get_mut(&label).unwrap() += 1;
                    self.trim_class(label, quota);
                }
            }
        }
    }

    /// Evicts the oldest patterns of `class` until at most `quota` remain.
    /// Class-balanced items are kept in arrival order.
    fn trim_class(&mut self, class: usize, quota: usize) {
        let count = self.class_counts.get_mut(&class).unwrap();
        while *count > quota {
            let pos = self
                .items
                .iter()
                .position(|it| it.label == class)
                .expect("count tracks retained items");
            self.items.remove(pos);
            *count -= 1;
        }
    }
}

/// Returns `buffer` after offering `new_items` with randomness seeded by `seed`.
pub fn buffer_update(mut buffer: ReplayBuffer, new_items: &Batch, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    buffer.offer(new_items, &mut rng);
    buffer
}
