use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ItemId, TrainExample, PAD};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// One minibatch of left-padded training sequences and its shared negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into the training view.
    pub examples: Vec<usize>,
    /// Each row has exactly `max_len` entries, padded on the left with [`PAD`].
    pub sequences: Vec<Vec<ItemId>>,
    /// `None` means the loss runs over the full catalog.
    pub negatives: Option<Vec<ItemId>>,
}

/// Keeps the most recent `max_len` items and left-pads to exactly `max_len`.
pub fn left_pad(items: &[ItemId], max_len: usize) -> Vec<ItemId> {
    let keep = &items[items.len().saturating_sub(max_len)..];
    let mut out = vec![PAD; max_len - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// Shuffles the training view with a stream derived from `(seed, epoch)`,
/// chunks it into batches and draws one uniform negative set per batch that
/// avoids every target in the batch.
pub fn batch_with_negatives(
    train: &[TrainExample],
    batch_size: usize,
    max_len: usize,
    num_items: usize,
    num_negatives: Option<usize>,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::config("batch_size and max_len must be positive"));
    }
    if let Some(k) = num_negatives {
        if k >= num_items {
            return Err(Error::config(format!(
                "{k} negatives requested from a catalog of {num_items} items"
            )));
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch]));

    order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let sequences: Vec<Vec<ItemId>> =
                chunk.iter().map(|&i| left_pad(&train[i].items, max_len)).collect();
            let negatives = match num_negatives {
                None => None,
                Some(k) => {
                    let targets: HashSet<ItemId> = sequences
                        .iter()
                        .flat_map(|s| {
                            let first = s.iter().position(|&x| x != PAD).unwrap_or(s.len());
                            s[(first + 1).min(s.len())..].iter().copied()
                        })
                        .collect();
                    let mut rng = stream(seed, Purpose::Negatives, &[epoch, b as u64]);
                    Some(sample_negatives(num_items, k, &targets, &mut rng)?)
                }
            };
            Ok(Batch {
                examples: chunk.to_vec(),
                sequences,
                negatives,
            })
        })
        .collect()
}

fn sample_negatives<R: Rng>(
    num_items: usize,
    k: usize,
    exclude: &HashSet<ItemId>,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let available = num_items - exclude.iter().filter(|&&i| (1..=num_items).contains(&i)).count();
    if k > available {
        return Err(Error::data(format!(
            "only {available} items remain after removing batch targets, {k} negatives requested"
        )));
    }
    if 2 * k <= available {
        let mut seen = HashSet::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let item = rng.random_range(1..=num_items);
            if !exclude.contains(&item) && seen.insert(item) {
                out.push(item);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<ItemId> = (1..=num_items).filter(|i| !exclude.contains(i)).collect();
        let (chosen, _) = pool.partial_shuffle(rng, k);
        Ok(chosen.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(items: Vec<ItemId>) -> TrainExample {
        TrainExample {
            user: 0,
            items,
            behaviors: None,
        }
    }

    #[test]
    fn exhaustion_yields_every_non_target() {
        // One target (item 4) in a 10-item catalog: 9 negatives are all the rest.
        let train = vec![ex(vec![4, 4])];
        let b = batch_with_negatives(&train, 8, 5, 10, Some(9), 1, 1).unwrap();
        let mut neg = b[0].negatives.clone().unwrap();
        neg.sort_unstable();
        assert_eq!(neg, vec![1, 2, 3, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn stream_is_deterministic_for_a_seed() {
        let train: Vec<_> = (0..20).map(|u| ex(vec![1 + u % 7, 2 + u % 5, 3])).collect();
        let a = batch_with_negatives(&train, 6, 4, 40, Some(10), 3, 2).unwrap();
        let b = batch_with_negatives(&train, 6, 4, 40, Some(10), 3, 2).unwrap();
        let c = batch_with_negatives(&train, 6, 4, 40, Some(10), 3, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn padding_count_and_left_truncation() {
        for (n, max_len) in [(3, 5), (5, 5), (8, 5)] {
            let items: Vec<ItemId> = (1..=n).collect();
            let padded = left_pad(&items, max_len);
            assert_eq!(padded.len(), max_len);
            let pads = padded.iter().filter(|&&x| x == PAD).count();
            assert_eq!(pads, max_len - n.min(max_len));
            assert_eq!(*padded.last().unwrap(), n);
        }
    }

    #[test]
    fn too_many_negatives_is_an_error() {
        let train = vec![ex(vec![1, 2, 3])];
        assert!(batch_with_negatives(&train, 1, 4, 5, Some(5), 0, 0).is_err());
        // Targets 2 and 3 leave only three candidates.
        assert!(batch_with_negatives(&train, 1, 4, 5, Some(4), 0, 0).is_err());
        assert!(batch_with_negatives(&train, 1, 4, 5, Some(3), 0, 0).is_ok());
    }

    #[test]
    fn negatives_never_hit_batch_targets() {
        let train: Vec<_> = (0..50)
            .map(|u| ex((0..6).map(|t| 1 + (u * 7 + t * 3) % 60).collect()))
            .collect();
        for epoch in 0..5 {
            for b in batch_with_negatives(&train, 8, 6, 100, Some(20), 9, epoch).unwrap() {
                let neg = b.negatives.unwrap();
                for s in &b.sequences {
                    let first = s.iter().position(|&x| x != PAD).unwrap();
                    for t in &s[first + 1..] {
                        assert!(!neg.contains(t));
                    }
                }
            }
        }
    }
}
