//! Trial tables: the row-level bookkeeping that ties response rows to
//! stimuli, participants, sessions and repetition numbers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One presentation of one stimulus to one participant.
///
/// `trial_row` indexes the participant's response matrix; `repetition` is
/// 1-based; `shared` marks stimuli shown to every participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_row: usize,
    pub stimulus_id: String,
    pub participant_id: String,
    pub session: u32,
    pub repetition: u32,
    pub shared: bool,
}

/// A validated collection of [`TrialRecord`]s.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialTable {
    records: Vec<TrialRecord>,
}

impl TrialTable {
    /// Build a table, enforcing the row-level invariants:
    /// repetitions are >= 1, `trial_row` is unique within each participant,
    /// and a stimulus carries one consistent `shared` flag.
    pub fn new(records: Vec<TrialRecord>) -> Result<Self> {
        let mut seen_rows: BTreeSet<(&str, usize)> = BTreeSet::new();
        let mut shared_flag: BTreeMap<&str, bool> = BTreeMap::new();
        for r in &records {
            if r.repetition < 1 {
                return Err(Error::Data(format!(
                    "trial for stimulus '{}' has repetition {} (must be >= 1)",
                    r.stimulus_id, r.repetition
                )));
            }
            if !seen_rows.insert((r.participant_id.as_str(), r.trial_row)) {
                return Err(Error::Data(format!(
                    "duplicate trial_row {} for participant '{}'",
                    r.trial_row, r.participant_id
                )));
            }
            match shared_flag.get(r.stimulus_id.as_str()) {
                Some(flag) if *flag != r.shared => {
                    return Err(Error::Data(format!(
                        "stimulus '{}' has inconsistent shared flags",
                        r.stimulus_id
                    )));
                }
                Some(_) => {}
                None => {
                    shared_flag.insert(r.stimulus_id.as_str(), r.shared);
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct participant ids in first-appearance order.
    pub fn participants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if seen.insert(r.participant_id.as_str()) {
                out.push(r.participant_id.clone());
            }
        }
        out
    }

    /// Sub-table for one participant (record order preserved).
    pub fn for_participant(&self, participant_id: &str) -> TrialTable {
        TrialTable {
            records: self
                .records
                .iter()
                .filter(|r| r.participant_id == participant_id)
                .cloned()
                .collect(),
        }
    }

    /// Highest repetition count of any (stimulus, participant) pair.
    pub fn max_repetitions(&self) -> u32 {
        let mut counts: BTreeMap<(&str, &str), u32> = BTreeMap::new();
        for r in &self.records {
            *counts
                .entry((r.stimulus_id.as_str(), r.participant_id.as_str()))
                .or_insert(0) += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    }

    /// Stimuli seen the maximal number of times by every participant that saw
    /// them at all.
    pub fn fully_repeated_stimuli(&self) -> BTreeSet<String> {
        let max = self.max_repetitions();
        let mut counts: BTreeMap<&str, BTreeMap<&str, u32>> = BTreeMap::new();
        for r in &self.records {
            *counts
                .entry(r.stimulus_id.as_str())
                .or_default()
                .entry(r.participant_id.as_str())
                .or_insert(0) += 1;
        }
        counts
            .into_iter()
            .filter(|(_, per)| per.values().all(|c| *c == max))
            .map(|(s, _)| s.to_string())
            .collect()
    }

    /// Stimuli flagged shared.
    pub fn shared_stimuli(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.shared)
            .map(|r| r.stimulus_id.clone())
            .collect()
    }

    /// All distinct stimulus ids, sorted.
    pub fn stimuli(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.stimulus_id.clone()).collect()
    }

    pub fn store_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["trial_row", "stimulus_id", "participant_id", "session", "repetition", "shared"])?;
        for r in &self.records {
            w.write_record([
                r.trial_row.to_string(),
                r.stimulus_id.clone(),
                r.participant_id.clone(),
                r.session.to_string(),
                r.repetition.to_string(),
                r.shared.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| -> Result<&str> {
                row.get(i).ok_or_else(|| {
                    Error::Data(format!("{}: short row in trial table", path.display()))
                })
            };
            let parse_err = |what: &str, v: &str| {
                Error::Data(format!("{}: unparseable {what} '{v}'", path.display()))
            };
            records.push(TrialRecord {
                trial_row: field(0)?.parse().map_err(|_| parse_err("trial_row", field(0).unwrap()))?,
                stimulus_id: field(1)?.to_string(),
                participant_id: field(2)?.to_string(),
                session: field(3)?.parse().map_err(|_| parse_err("session", field(3).unwrap()))?,
                repetition: field(4)?.parse().map_err(|_| parse_err("repetition", field(4).unwrap()))?,
                shared: field(5)?.parse().map_err(|_| parse_err("shared", field(5).unwrap()))?,
            });
        }
        Self::new(records)
    }
}
