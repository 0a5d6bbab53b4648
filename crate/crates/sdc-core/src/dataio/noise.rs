//! Split-half-free reliability estimation from repeated presentations.
//!
//! For each voxel we decompose response variance across training trials into
//! stimulus-driven signal and trial noise with a one-way random-effects
//! decomposition:
//!
//! * noise variance: mean over repeated stimuli of the unbiased
//!   within-stimulus variance,
//! * signal variance: between-stimulus variance of repetition means, minus the
//!   noise leakage `noise_var / r_bar` expected under pure noise,
//!
//! and report the ceiling as the percentage of variance in an `r_bar`-trial
//! average attributable to signal.
//!
//! The between-stimulus variance is itself a sample statistic with standard
//! error ~ `sqrt(2/(k-1))` relative for `k` stimuli, so for finite `k` a pure
//! noise voxel would receive a spuriously positive ceiling a few percent of
//! the time. `guard_z` subtracts that many standard errors of the between
//! variance before attributing anything to signal, which pins pure-noise
//! voxels to 0 at the cost of a slight (vanishing in `k`) downward bias.
//! Setting `guard_z = 0` recovers the textbook estimator.

use crate::dataio::trials::TrialTable;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_SELECTION_THRESHOLD: f64 = 5.0;
pub const DEFAULT_GUARD_Z: f64 = 2.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseCeilingConfig {
    /// Standard errors of between-stimulus variance subtracted before the
    /// signal attribution. 0 disables the small-sample guard.
    pub guard_z: f64,
}

impl Default for NoiseCeilingConfig {
    fn default() -> Self {
        Self { guard_z: DEFAULT_GUARD_Z }
    }
}

/// The ceiling formula itself: percent of variance in an `r_bar`-trial
/// average explained by signal, clamped to `[0, 100]`. Zero total variance
/// maps to 0.
pub fn ceiling_percent(signal_var: f64, noise_var: f64, r_bar: f64) -> f64 {
    debug_assert!(signal_var >= 0.0 && noise_var >= 0.0 && r_bar > 0.0);
    let denom = signal_var + noise_var / r_bar;
    if denom <= 0.0 {
        return 0.0;
    }
    // divide first: with zero noise the ratio is exactly 1.0, so the
    // zero-noise ceiling is exactly 100 rather than an ulp short of it
    (100.0 * (signal_var / denom)).clamp(0.0, 100.0)
}

/// Per-voxel noise ceilings from the training fold.
///
/// `responses` is the participant's full trial-by-voxel matrix; `trials` its
/// trial table; `train_rows` the training row indices. Only stimuli with at
/// least two training repetitions enter the estimate. Errors when fewer than
/// two such stimuli exist.
pub fn noise_ceiling(
    responses: ArrayView2<'_, f64>,
    trials: &TrialTable,
    train_rows: &[usize],
    cfg: NoiseCeilingConfig,
) -> Result<Vec<f64>> {
    let mut by_stim: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in trials.records() {
        by_stim.entry(r.stimulus_id.as_str()).or_default().push(r.trial_row);
    }
    let train: std::collections::BTreeSet<usize> = train_rows.iter().copied().collect();
    for row in &train {
        if *row >= responses.nrows() {
            return Err(Error::Shape(format!(
                "train row {row} out of bounds for {} response rows",
                responses.nrows()
            )));
        }
    }
    let groups: Vec<Vec<usize>> = by_stim
        .values()
        .map(|rows| rows.iter().copied().filter(|r| train.contains(r)).collect::<Vec<_>>())
        .filter(|rows: &Vec<usize>| rows.len() >= 2)
        .collect();
    if groups.len() < 2 {
        return Err(Error::NoiseCeiling(format!(
            "need at least two stimuli with repeated training presentations, found {}",
            groups.len()
        )));
    }
    let k = groups.len();
    let r_bar = groups.iter().map(|g| g.len() as f64).sum::<f64>() / k as f64;
    let guard = cfg.guard_z * (2.0 / (k as f64 - 1.0)).sqrt();

    let v = responses.ncols();
    let mut out = Vec::with_capacity(v);
    for j in 0..v {
        let mut noise_acc = 0.0;
        let mut means = Vec::with_capacity(k);
        for g in &groups {
            let vals: Vec<f64> = g.iter().map(|r| responses[[*r, j]]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let within =
                vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (vals.len() - 1) as f64;
            noise_acc += within;
            means.push(m);
        }
        let noise_var = noise_acc / k as f64;
        let grand = means.iter().sum::<f64>() / k as f64;
        let between =
            means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (k - 1) as f64;
        let signal_var = (between - noise_var / r_bar - guard * between).max(0.0);
        out.push(ceiling_percent(signal_var, noise_var, r_bar));
    }
    Ok(out)
}

/// Indices of voxels whose ceiling strictly exceeds `threshold`, ascending.
pub fn select_voxels(ceilings: &[f64], threshold: f64) -> Result<Vec<usize>> {
    let picked: Vec<usize> = ceilings
        .iter()
        .enumerate()
        .filter(|(_, nc)| **nc > threshold)
        .map(|(i, _)| i)
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no voxel exceeds ceiling threshold {threshold}"
        )));
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::trials::{TrialRecord, TrialTable};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reps_table(n_stim: usize, reps: u32) -> TrialTable {
        let mut recs = Vec::new();
        let mut row = 0;
        for rep in 1..=reps {
            for s in 0..n_stim {
                recs.push(TrialRecord {
                    trial_row: row,
                    stimulus_id: format!("s{s:04}"),
                    participant_id: "p1".into(),
                    session: rep,
                    repetition: rep,
                    shared: true,
                });
                row += 1;
            }
        }
        TrialTable::new(recs).unwrap()
    }

    /// Stimulus-indexed signal replicated across reps, plus seeded noise.
    fn simulate(n_stim: usize, reps: usize, sigma: f64, seed: u64) -> (Array2<f64>, TrialTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signal: Vec<f64> = (0..n_stim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = Array2::<f64>::zeros((n_stim * reps, 1));
        for rep in 0..reps {
            for s in 0..n_stim {
                let noise: f64 = if sigma > 0.0 {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma
                } else {
                    0.0
                };
                x[[rep * n_stim + s, 0]] = signal[s] + noise;
            }
        }
        (x, reps_table(n_stim, reps as u32))
    }

    #[test]
    fn formula_analytic_point() {
        // equal signal and noise variance, three averaged repetitions
        let nc = ceiling_percent(1.0, 1.0, 3.0);
        assert!((nc - 75.0).abs() < 1e-9, "got {nc}");
        assert_eq!(ceiling_percent(0.0, 0.0, 3.0), 0.0);
    }

    #[test]
    fn zero_noise_hits_one_hundred() {
        let (x, t) = simulate(50, 3, 0.0, 7);
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let nc = noise_ceiling(x.view(), &t, &rows, NoiseCeilingConfig::default()).unwrap();
        assert_eq!(nc[0], 100.0);
    }

    #[test]
    fn no_repeats_is_an_error() {
        let (x, t) = simulate(50, 3, 0.0, 7);
        // train on a single repetition only: no stimulus has two training rows
        let rows: Vec<usize> = (0..50).collect();
        assert!(matches!(
            noise_ceiling(x.view(), &t, &rows, NoiseCeilingConfig::default()),
            Err(Error::NoiseCeiling(_))
        ));
    }

    #[test]
    fn presentation_order_does_not_matter() {
        let (x, t) = simulate(40, 3, 0.5, 21);
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let nc0 = noise_ceiling(x.view(), &t, &rows, NoiseCeilingConfig::default()).unwrap();
        // permute rows of both the matrix and the table consistently
        let mut perm: Vec<usize> = (0..x.nrows()).collect();
        perm.rotate_left(17);
        let mut x2 = Array2::<f64>::zeros(x.dim());
        let mut recs = Vec::new();
        for (new_row, &old_row) in perm.iter().enumerate() {
            x2.row_mut(new_row).assign(&x.row(old_row));
            let mut rec = t.records()[old_row].clone();
            rec.trial_row = new_row;
            recs.push(rec);
        }
        let t2 = TrialTable::new(recs).unwrap();
        let nc2 = noise_ceiling(x2.view(), &t2, &rows, NoiseCeilingConfig::default()).unwrap();
        assert!((nc0[0] - nc2[0]).abs() < 1e-12);
    }

    #[test]
    fn select_is_strict_and_sorted() {
        let nc = vec![5.0, 5.1, 80.0, 4.9];
        let sel = select_voxels(&nc, 5.0).unwrap();
        assert_eq!(sel, vec![1, 2]);
        assert!(matches!(select_voxels(&nc, 100.0), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn selection_shrinks_as_threshold_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nc: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..100.0)).collect();
        let mut prev = select_voxels(&nc, 0.0).unwrap().len();
        for t in [10.0, 30.0, 60.0, 90.0] {
            let n = select_voxels(&nc, t).map(|s| s.len()).unwrap_or(0);
            assert!(n <= prev);
            prev = n;
        }
    }
}
