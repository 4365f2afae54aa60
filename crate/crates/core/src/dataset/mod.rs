//! Interaction logs: ingestion, preprocessing, splitting, batching, a labeled
//! synthetic generator and the on-disk dataset format.

mod batch;
mod preprocess;
mod split;
mod store;
mod synthetic;
mod tsv;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use batch::{batch_with_negatives, left_pad, Batch};
pub use preprocess::{build_sequences, filter_min_count, FilterStats};
pub use split::{split, EvalExample, SplitMode, SplitSpec, SplitViews, TrainExample};
pub use store::{load_dataset, save_dataset, Dataset};
pub use synthetic::{generate_synthetic, SyntheticReport, SyntheticSpec};
pub use tsv::load_tsv;

/// Contiguous item id. `0` is reserved for padding; real items are `1..=V`.
pub type ItemId = usize;

pub const PAD: ItemId = 0;

pub const SIGNAL: &str = "signal";
pub const NOISE: &str = "noise";

/// One raw log row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub behavior: Option<String>,
}

/// A user's time-ordered history over contiguous item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: u64,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
    pub behaviors: Option<Vec<String>>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Item universe: raw-id remapping and popularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub num_items: usize,
    /// `remap[i]` is the raw id of contiguous item `i + 1`.
    pub remap: Vec<u64>,
    /// Interaction counts indexed by contiguous id; entry `0` (padding) is always zero.
    pub popularity: Vec<u64>,
}

impl Catalog {
    /// Builds a catalog over the distinct raw item ids, assigned in ascending raw-id order.
    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        let mut raw: Vec<u64> = interactions.iter().map(|i| i.item_id).collect();
        raw.sort_unstable();
        raw.dedup();
        let index: HashMap<u64, ItemId> = raw.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect();
        let mut popularity = vec![0; raw.len() + 1];
        for it in interactions {
            popularity[index[&it.item_id]] += 1;
        }
        Self {
            num_items: raw.len(),
            remap: raw,
            popularity,
        }
    }

    /// Identity catalog over `1..=num_items` with popularity counted from `sequences`.
    pub fn identity(num_items: usize, sequences: &[InteractionSequence]) -> Self {
        let mut popularity = vec![0; num_items + 1];
        for s in sequences {
            for &i in &s.items {
                popularity[i] += 1;
            }
        }
        Self {
            num_items,
            remap: (1..=num_items as u64).collect(),
            popularity,
        }
    }

    /// Rows in an embedding table over this catalog, padding included.
    pub fn vocab_size(&self) -> usize {
        self.num_items + 1
    }

    pub fn lookup(&self) -> HashMap<u64, ItemId> {
        self.remap.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect()
    }

    pub fn total_interactions(&self) -> u64 {
        self.popularity.iter().sum()
    }
}
