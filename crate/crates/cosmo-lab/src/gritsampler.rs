//! Grouped mini-batch scheduling through a collection queue.
//!
//! While one epoch trains, embeddings stream into a FIFO queue of capacity
//! `M` (the search space). Each time the queue fills, its entries are
//! greedily chained by cross-modal similarity and emitted as an ordered
//! block; concatenated blocks sliced into consecutive batches become the
//! next epoch's schedule. Larger `M` groups more similar examples per
//! batch and therefore harder in-batch negatives; `M = B` degenerates to
//! the feeding order, i.e. random batching.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    /// Symmetric cross-modal average: ½(img_a·txt_b + img_b·txt_a).
    SymmetricItc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub search_space: usize,
    pub similarity: SimilarityKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 96,
            search_space: 4800,
            similarity: SimilarityKind::SymmetricItc,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size {} must be at least 2",
                self.batch_size
            )));
        }
        if self.search_space < self.batch_size {
            return Err(Error::InvalidConfig(format!(
                "search space {} smaller than batch size {}",
                self.search_space, self.batch_size
            )));
        }
        if self.search_space % self.batch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "search space {} must be a multiple of batch size {}",
                self.search_space, self.batch_size
            )));
        }
        Ok(())
    }
}

/// One collected example: its index plus both unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct CollectEntry {
    pub example_index: usize,
    pub img: Array1<f64>,
    pub txt: Array1<f64>,
}

/// FIFO collection queue of capacity `M`.
#[derive(Debug, Clone)]
pub struct CollectQueue {
    entries: Vec<CollectEntry>,
    capacity: usize,
}

impl CollectQueue {
    pub fn new(capacity: usize) -> CollectQueue {
        CollectQueue { entries: Vec::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append a batch of embeddings. Every time the queue reaches capacity
    /// a chained block of `M` ordered example indices is emitted and the
    /// queue cleared.
    pub fn feed(&mut self, batch: &EmbeddingBatch) -> Vec<Vec<usize>> {
        let mut blocks = Vec::new();
        for (i, &example_index) in batch.example_indices.iter().enumerate() {
            self.entries.push(CollectEntry {
                example_index,
                img: batch.img.row(i).to_owned(),
                txt: batch.txt.row(i).to_owned(),
            });
            if self.entries.len() == self.capacity {
                blocks.push(chain(&self.entries));
                self.entries.clear();
            }
        }
        blocks
    }

    /// Chain whatever is left (the ragged tail of an epoch) as a final
    /// block and clear the queue.
    pub fn flush(&mut self) -> Option<Vec<usize>> {
        if self.entries.is_empty() {
            return None;
        }
        let block = chain(&self.entries);
        self.entries.clear();
        Some(block)
    }
}

fn entry_similarity(a: &CollectEntry, b: &CollectEntry) -> f64 {
    0.5 * (a.img.dot(&b.txt) + b.img.dot(&a.txt))
}

/// Greedy nearest-neighbor chain: start at the first queue entry, then
/// repeatedly append the unvisited entry most similar to the last one.
/// Ties break toward the lower queue position, so identical embeddings
/// come out in insertion order. Returns example indices in chain order.
pub fn chain(entries: &[CollectEntry]) -> Vec<usize> {
    let n = entries.len();
    if n == 0 {
        return Vec::new();
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = 0;
    visited[0] = true;
    order.push(entries[0].example_index);
    for _ in 1..n {
        let mut best: Option<(usize, f64)> = None;
        for (j, entry) in entries.iter().enumerate() {
            if visited[j] {
                continue;
            }
            let sim = entry_similarity(&entries[current], entry);
            let better = match best {
                None => true,
                Some((_, s)) => sim > s,
            };
            if better {
                best = Some((j, sim));
            }
        }
        let (next, _) = best.expect("unvisited entry exists");
        visited[next] = true;
        order.push(entries[next].example_index);
        current = next;
    }
    order
}

/// The ordered mini-batch plan for the next epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchSchedule {
    /// Seeded random permutation, used for the first epoch when no
    /// embeddings exist yet.
    pub fn random<R: Rng>(n_examples: usize, batch_size: usize, rng: &mut R) -> BatchSchedule {
        let mut order: Vec<usize> = (0..n_examples).collect();
        order.shuffle(rng);
        BatchSchedule { order, batch_size }
    }

    pub fn from_indices(order: Vec<usize>, batch_size: usize) -> Result<BatchSchedule> {
        let mut seen = std::collections::HashSet::with_capacity(order.len());
        for &idx in &order {
            if !seen.insert(idx) {
                return Err(Error::InvalidInput(format!(
                    "schedule repeats example {idx}; order must be a permutation"
                )));
            }
        }
        Ok(BatchSchedule { order, batch_size })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Consecutive size-B slices; a trailing slice smaller than 2 is
    /// dropped (a single example cannot form a contrastive batch).
    pub fn batches(&self) -> Vec<&[usize]> {
        self.order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .collect()
    }

    /// One batch per line, as a JSON array of example indices.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for batch in self.batches() {
            out.push_str(&serde_json::to_string(batch).expect("indices serialize"));
            out.push('\n');
        }
        out
    }
}

/// Concatenate chained blocks and slice into consecutive mini-batches.
/// The blocks must jointly cover the dataset: the caller appends the
/// leftover partial queue as a final block before scheduling.
pub fn next_epoch_schedule(blocks: &[Vec<usize>], batch_size: usize) -> Result<BatchSchedule> {
    if blocks.is_empty() || blocks.iter().all(|b| b.is_empty()) {
        return Err(Error::InvalidInput("no blocks to schedule".into()));
    }
    let order: Vec<usize> = blocks.iter().flatten().copied().collect();
    BatchSchedule::from_indices(order, batch_size)
}

/// Mean pairwise symmetric similarity inside one batch of embeddings.
pub fn mean_within_batch_similarity(img: &[ArrayView1<f64>], txt: &[ArrayView1<f64>]) -> f64 {
    let b = img.len();
    if b < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..b {
        for j in (i + 1)..b {
            total += 0.5 * (img[i].dot(&txt[j]) + img[j].dot(&txt[i]));
            count += 1.0;
        }
    }
    total / count
}
