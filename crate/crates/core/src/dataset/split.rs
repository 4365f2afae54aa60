use serde::{Deserialize, Serialize};

use super::{InteractionSequence, ItemId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SplitMode {
    /// Test target = last item, validation target = second to last.
    LeaveOneOut,
    /// Train on steps `1..=n-10`; validation targets `n-9..=n-10+steps`;
    /// test targets `n-4..=n-5+steps`.
    MultiStep { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub max_len: usize,
}

/// Training prefix of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub user: usize,
    pub items: Vec<ItemId>,
    pub behaviors: Option<Vec<String>>,
}

/// An evaluation query: history, the targets to rank, and history labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub user: usize,
    pub context: Vec<ItemId>,
    pub targets: Vec<ItemId>,
    pub context_behaviors: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitViews {
    pub train: Vec<TrainExample>,
    pub validation: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    /// Sequences too short for the mode.
    pub excluded: usize,
}

/// Multi-step windows reserve the last ten steps.
const MULTI_STEP_HOLDOUT: usize = 10;
const MULTI_STEP_TEST_OFFSET: usize = 5;

pub fn split(sequences: &[InteractionSequence], spec: SplitSpec) -> Result<SplitViews> {
    if spec.max_len == 0 {
        return Err(Error::config("max_len must be positive"));
    }
    if let SplitMode::MultiStep { steps } = spec.mode {
        if !(1..=MULTI_STEP_TEST_OFFSET).contains(&steps) {
            return Err(Error::config(format!("multi-step window must be in 1..=5, got {steps}")));
        }
    }
    let mut views = SplitViews::default();
    for (user, seq) in sequences.iter().enumerate() {
        let n = seq.len();
        let labels = |range: std::ops::Range<usize>| seq.behaviors.as_ref().map(|b| b[range].to_vec());
        match spec.mode {
            SplitMode::LeaveOneOut => {
                if n < 3 {
                    views.excluded += 1;
                    continue;
                }
                views.train.push(TrainExample {
                    user,
                    items: seq.items[..n - 2].to_vec(),
                    behaviors: labels(0..n - 2),
                });
                views.validation.push(EvalExample {
                    user,
                    context: seq.items[..n - 2].to_vec(),
                    targets: vec![seq.items[n - 2]],
                    context_behaviors: labels(0..n - 2),
                });
                views.test.push(EvalExample {
                    user,
                    context: seq.items[..n - 1].to_vec(),
                    targets: vec![seq.items[n - 1]],
                    context_behaviors: labels(0..n - 1),
                });
            }
            SplitMode::MultiStep { steps } => {
                if n <= MULTI_STEP_HOLDOUT {
                    views.excluded += 1;
                    continue;
                }
                let train_end = n - MULTI_STEP_HOLDOUT;
                let test_start = n - MULTI_STEP_TEST_OFFSET;
                views.train.push(TrainExample {
                    user,
                    items: seq.items[..train_end].to_vec(),
                    behaviors: labels(0..train_end),
                });
                views.validation.push(EvalExample {
                    user,
                    context: seq.items[..train_end].to_vec(),
                    targets: seq.items[train_end..train_end + steps].to_vec(),
                    context_behaviors: labels(0..train_end),
                });
                views.test.push(EvalExample {
                    user,
                    context: seq.items[..test_start].to_vec(),
                    targets: seq.items[test_start..test_start + steps].to_vec(),
                    context_behaviors: labels(0..test_start),
                });
            }
        }
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> InteractionSequence {
        InteractionSequence {
            user_id: 0,
            items: (1..=n).collect(),
            timestamps: (0..n as i64).collect(),
            behaviors: None,
        }
    }

    fn spec(mode: SplitMode) -> SplitSpec {
        SplitSpec { mode, max_len: 50 }
    }

    #[test]
    fn leave_one_out_of_five() {
        let v = split(&[seq(5)], spec(SplitMode::LeaveOneOut)).unwrap();
        assert_eq!(v.train[0].items, vec![1, 2, 3]);
        assert_eq!(v.validation[0].targets, vec![4]);
        assert_eq!(v.validation[0].context, vec![1, 2, 3]);
        assert_eq!(v.test[0].targets, vec![5]);
        assert_eq!(v.test[0].context, vec![1, 2, 3, 4]);
    }

    #[test]
    fn multi_step_windows() {
        let v = split(&[seq(20)], spec(SplitMode::MultiStep { steps: 2 })).unwrap();
        assert_eq!(v.test[0].targets, vec![16, 17]);
        assert_eq!(v.test[0].context, (1..=15).collect::<Vec<_>>());
        assert_eq!(v.validation[0].targets, vec![11, 12]);
        assert_eq!(v.train[0].items, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn short_sequences_are_excluded_and_counted() {
        let v = split(&[seq(10), seq(11)], spec(SplitMode::MultiStep { steps: 1 })).unwrap();
        assert_eq!(v.excluded, 1);
        assert_eq!(v.test.len(), 1);
        let v = split(&[seq(2), seq(3)], spec(SplitMode::LeaveOneOut)).unwrap();
        assert_eq!(v.excluded, 1);
    }

    #[test]
    fn targets_are_disjoint_across_views() {
        for steps in 1..=5 {
            let v = split(&[seq(30)], spec(SplitMode::MultiStep { steps })).unwrap();
            for t in &v.test[0].targets {
                assert!(!v.validation[0].targets.contains(t));
                assert!(!v.train[0].items.contains(t));
            }
        }
    }

    #[test]
    fn invalid_window_is_a_config_error() {
        assert!(split(&[seq(30)], spec(SplitMode::MultiStep { steps: 6 })).is_err());
    }
}
