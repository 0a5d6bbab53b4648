//! Stimulus-disjoint train/validation/test folds.
//!
//! Folds are drawn at the stimulus level so every presentation of a stimulus
//! lands in the same fold. The test fold is restricted to stimuli that are
//! both shared across participants and fully repeated; validation additionally
//! requires full repetition. Everything else — including stimuli with missing
//! repetitions — is forced into train.

use crate::dataio::trials::TrialTable;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Row-index folds into one participant's response matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl DatasetSplit {
    pub fn fold_rows(&self, fold: Fold) -> &[usize] {
        match fold {
            Fold::Train => &self.train_rows,
            Fold::Val => &self.val_rows,
            Fold::Test => &self.test_rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fold {
    Train,
    Val,
    Test,
}

/// Assign stimuli to folds and materialize per-row index lists.
///
/// `val_size` and `test_size` count stimuli, not rows. The table must contain
/// a single participant; derive per-participant tables first via
/// [`TrialTable::for_participant`]. Identical inputs always produce identical
/// folds; the stimulus shuffle is keyed only by sorted stimulus ids and
/// `seed`, so participants with the same stimulus metadata receive the same
/// stimulus-level assignment.
pub fn make_split(trials: &TrialTable, val_size: usize, test_size: usize, seed: u64) -> Result<DatasetSplit> {
    if trials.is_empty() {
        return Err(Error::Split("empty trial table".into()));
    }
    let participants = trials.participants();
    if participants.len() != 1 {
        return Err(Error::Split(format!(
            "make_split expects one participant per call, got {}; filter with for_participant first",
            participants.len()
        )));
    }

    let fully = trials.fully_repeated_stimuli();
    let shared = trials.shared_stimuli();

    let mut test_pool: Vec<&String> = fully.intersection(&shared).collect();
    if test_pool.len() < test_size {
        return Err(Error::Split(format!(
            "test fold needs {test_size} shared fully-repeated stimuli, only {} available",
            test_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    test_pool.shuffle(&mut rng);
    let test_stimuli: BTreeSet<&String> = test_pool[..test_size].iter().copied().collect();

    let mut val_pool: Vec<&String> = fully.iter().filter(|s| !test_stimuli.contains(s)).collect();
    if val_pool.len() < val_size {
        return Err(Error::Split(format!(
            "val fold needs {val_size} fully-repeated stimuli after the test draw, only {} available",
            val_pool.len()
        )));
    }
    val_pool.shuffle(&mut rng);
    let val_stimuli: BTreeSet<&String> = val_pool[..val_size].iter().copied().collect();

    let mut split = DatasetSplit {
        seed,
        train_rows: Vec::new(),
        val_rows: Vec::new(),
        test_rows: Vec::new(),
    };
    for r in trials.records() {
        if test_stimuli.contains(&r.stimulus_id) {
            split.test_rows.push(r.trial_row);
        } else if val_stimuli.contains(&r.stimulus_id) {
            split.val_rows.push(r.trial_row);
        } else {
            split.train_rows.push(r.trial_row);
        }
    }
    split.train_rows.sort_unstable();
    split.val_rows.sort_unstable();
    split.test_rows.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::trials::TrialRecord;

    fn table(n_stim: usize, reps: u32, shared: bool) -> TrialTable {
        let mut recs = Vec::new();
        let mut row = 0;
        for rep in 1..=reps {
            for s in 0..n_stim {
                recs.push(TrialRecord {
                    trial_row: row,
                    stimulus_id: format!("s{s:03}"),
                    participant_id: "p1".into(),
                    session: rep,
                    repetition: rep,
                    shared,
                });
                row += 1;
            }
        }
        TrialTable::new(recs).unwrap()
    }

    #[test]
    fn partial_repetitions_force_train() {
        // stimulus s000 gets only 2 of 3 repetitions
        let mut recs = Vec::new();
        let mut row = 0;
        for rep in 1..=3u32 {
            for s in 0..4 {
                if s == 0 && rep == 3 {
                    continue;
                }
                recs.push(TrialRecord {
                    trial_row: row,
                    stimulus_id: format!("s{s:03}"),
                    participant_id: "p1".into(),
                    session: rep,
                    repetition: rep,
                    shared: true,
                });
                row += 1;
            }
        }
        let t = TrialTable::new(recs).unwrap();
        let split = make_split(&t, 1, 1, 9).unwrap();
        // rows 0 and 4 belong to s000 (reps 1 and 2); both must be in train
        for r in [0usize, 4] {
            assert!(split.train_rows.contains(&r), "row {r} not in train");
        }
        assert_eq!(split.val_rows.len(), 3);
        assert_eq!(split.test_rows.len(), 3);
    }

    #[test]
    fn oversized_request_is_split_error() {
        let t = table(5, 2, true);
        assert!(matches!(make_split(&t, 3, 3, 0), Err(Error::Split(_))));
    }

    #[test]
    fn test_fold_can_take_everything() {
        let t = table(6, 2, true);
        let split = make_split(&t, 0, 6, 1).unwrap();
        assert!(split.train_rows.is_empty());
        assert!(split.val_rows.is_empty());
        assert_eq!(split.test_rows.len(), 12);
    }

    #[test]
    fn unshared_stimuli_never_reach_test() {
        let mut recs = Vec::new();
        let mut row = 0;
        for rep in 1..=2u32 {
            for s in 0..8 {
                recs.push(TrialRecord {
                    trial_row: row,
                    stimulus_id: format!("s{s}"),
                    participant_id: "p1".into(),
                    session: rep,
                    repetition: rep,
                    shared: s < 4,
                });
                row += 1;
            }
        }
        let t = TrialTable::new(recs).unwrap();
        let split = make_split(&t, 2, 2, 3).unwrap();
        let shared = t.shared_stimuli();
        for row in &split.test_rows {
            let rec = t.records().iter().find(|r| r.trial_row == *row).unwrap();
            assert!(shared.contains(&rec.stimulus_id));
        }
    }

    #[test]
    fn folds_partition_rows_and_respect_sizes() {
        let t = table(10, 3, true);
        let split = make_split(&t, 2, 3, 17).unwrap();
        assert_eq!(split.val_rows.len(), 2 * 3);
        assert_eq!(split.test_rows.len(), 3 * 3);
        assert_eq!(split.train_rows.len(), 5 * 3);
        let mut all: Vec<usize> = split
            .train_rows
            .iter()
            .chain(&split.val_rows)
            .chain(&split.test_rows)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_folds() {
        let t = table(12, 3, true);
        let a = make_split(&t, 3, 3, 99).unwrap();
        let b = make_split(&t, 3, 3, 99).unwrap();
        assert_eq!(a, b);
        let c = make_split(&t, 3, 3, 100).unwrap();
        assert_ne!(a, c);
    }
}
