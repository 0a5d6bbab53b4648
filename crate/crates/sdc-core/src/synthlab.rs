//! Synthetic data with planted ground truth.
//!
//! The generator plants a known concept structure so every downstream stage
//! can be verified end to end:
//!
//! * stimulus embeddings are i.i.d. standard normal rows, unit-normalized;
//! * a `c* x d` row-orthonormal projection defines the planted concepts;
//! * concept scores are `relu(Y W*^T)`, scaled per concept to unit variance
//!   across stimuli so voxel drives have a size-independent scale;
//! * each concept owns a contiguous voxel block (its support); a coding voxel
//!   responds `a_j * s_i` — optionally squashed through tanh to give a
//!   nonlinear decoder an edge over a linear one — with loadings drawn from
//!   `±uniform[0.5, 1.5]`;
//! * remaining voxels are pure noise; every trial adds `N(0, sigma^2)`;
//! * repetitions share the stimulus signal and differ only in noise;
//! * the atlas assigns one synthetic region per support block.
//!
//! In `Consistent` mode concept `i` occupies block `i` for every participant;
//! in `Shuffled` mode each participant gets a seeded permutation of blocks,
//! which destroys cross-participant agreement by construction.

use crate::dataio::{EmbeddingMatrix, ResponseMatrix, RoiAtlas, TrialRecord, TrialTable, UNASSIGNED};
use crate::error::{Error, Result};
use crate::seeds;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    Consistent,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelNonlinearity {
    Linear,
    Tanh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub participants: usize,
    pub stimuli: usize,
    pub reps: usize,
    pub embed_dim: usize,
    pub concepts: usize,
    pub support_size: usize,
    pub extra_voxels: usize,
    pub noise_sigma: f64,
    pub nonlinearity: VoxelNonlinearity,
    pub mode: ConsistencyMode,
    pub seed: u64,
}

impl SynthSpec {
    /// Total voxel count: one block per concept plus the pure-noise tail.
    pub fn n_voxels(&self) -> usize {
        self.concepts * self.support_size + self.extra_voxels
    }

    fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::Spec("need at least one participant".into()));
        }
        if self.stimuli < 2 {
            return Err(Error::Spec("need at least two stimuli".into()));
        }
        if self.reps == 0 {
            return Err(Error::Spec("need at least one repetition".into()));
        }
        if self.concepts == 0 || self.support_size == 0 {
            return Err(Error::Spec("need at least one concept with a nonempty support".into()));
        }
        if self.concepts > self.embed_dim {
            return Err(Error::Spec(format!(
                "{} orthonormal concept rows cannot fit in {} dimensions",
                self.concepts, self.embed_dim
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Everything the generator planted, for downstream verification.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// `c* x d`, rows orthonormal.
    pub projection: Array2<f64>,
    /// participant id -> per-concept voxel-id support sets.
    pub supports: BTreeMap<String, Vec<BTreeSet<usize>>>,
    pub atlas: RoiAtlas,
    pub mode: ConsistencyMode,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub embeddings: EmbeddingMatrix,
    pub responses: Vec<ResponseMatrix>,
    pub trials: TrialTable,
    pub truth: SynthTruth,
}

pub fn participant_label(p: usize) -> String {
    format!("p{:02}", p + 1)
}

fn unit_normal_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut m = Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng));
    for mut row in m.rows_mut() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    m
}

/// Row-orthonormalize `c` Gaussian rows in `d` dimensions (Gram-Schmidt).
fn orthonormal_rows(c: usize, d: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut w = Array2::<f64>::from_shape_fn((c, d), |_| normal.sample(&mut rng));
    for i in 0..c {
        for j in 0..i {
            let dot = w.row(i).dot(&w.row(j));
            let prev = w.row(j).to_owned();
            let mut row = w.row_mut(i);
            row.zip_mut_with(&prev, |a, b| *a -= dot * b);
        }
        let norm: f64 = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Numerics("degenerate Gram-Schmidt draw".into()));
        }
        w.row_mut(i).mapv_inplace(|v| v / norm);
    }
    Ok(w)
}

/// Deterministic signal layer shared by `generate` and `calibrate_sigma`:
/// embeddings, unit-variance concept scores, per-participant block
/// permutations, loadings, and noise-free stimulus-by-voxel drive matrices.
struct SignalLayer {
    embeddings: EmbeddingMatrix,
    perms: Vec<Vec<usize>>,
    drives: Vec<Array2<f64>>, // per participant: stimuli x voxels, noise-free
    projection: Array2<f64>,
}

fn build_signal_layer(spec: &SynthSpec) -> Result<SignalLayer> {
    spec.validate()?;
    let width = spec.stimuli.to_string().len();
    let y = unit_normal_rows(spec.stimuli, spec.embed_dim, seeds::mix_tag(spec.seed, "embeddings"));
    let ids: Vec<String> = (0..spec.stimuli).map(|i| format!("stim_{i:0width$}")).collect();
    let embeddings = EmbeddingMatrix::new(y, ids, "clip".into())?;

    let w = orthonormal_rows(spec.concepts, spec.embed_dim, seeds::mix_tag(spec.seed, "projection"))?;

    // concept scores: relu projections, scaled to unit variance over stimuli
    let mut scores = embeddings.values.dot(&w.t());
    scores.mapv_inplace(|v| v.max(0.0));
    for c in 0..spec.concepts {
        let col = scores.column(c);
        let mean = col.sum() / spec.stimuli as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / spec.stimuli as f64;
        if var < 1e-12 {
            return Err(Error::Numerics(format!("planted concept {c} has degenerate scores")));
        }
        let inv = 1.0 / var.sqrt();
        scores.column_mut(c).mapv_inplace(|v| v * inv);
    }

    let v = spec.n_voxels();
    let mut perms = Vec::with_capacity(spec.participants);
    let mut drives = Vec::with_capacity(spec.participants);
    for p in 0..spec.participants {
        let mut perm: Vec<usize> = (0..spec.concepts).collect();
        if spec.mode == ConsistencyMode::Shuffled {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::mix(seeds::mix_tag(spec.seed, "blocks"), p as u64));
            perm.shuffle(&mut rng);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::mix(seeds::mix_tag(spec.seed, "loadings"), p as u64));
        let mut drive = Array2::<f64>::zeros((spec.stimuli, v));
        for concept in 0..spec.concepts {
            let block = perm[concept];
            for offset in 0..spec.support_size {
                let voxel = block * spec.support_size + offset;
                let mag: f64 = rng.gen_range(0.5..1.5);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let a = sign * mag;
                for s in 0..spec.stimuli {
                    let raw = a * scores[[s, concept]];
                    drive[[s, voxel]] = match spec.nonlinearity {
                        VoxelNonlinearity::Linear => raw,
                        VoxelNonlinearity::Tanh => raw.tanh(),
                    };
                }
            }
        }
        perms.push(perm);
        drives.push(drive);
    }
    Ok(SignalLayer { embeddings, perms, drives, projection: w })
}

/// Noise level that would put the average coding voxel's ceiling at
/// `target_nc` percent, given the spec's repetition count: inverts
/// `nc = s / (s + sigma^2 / reps)` at the mean stimulus-wise drive variance.
pub fn calibrate_sigma(spec: &SynthSpec, target_nc: f64) -> Result<f64> {
    if !(target_nc > 0.0 && target_nc < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "target ceiling {target_nc} must lie strictly between 0 and 100"
        )));
    }
    let layer = build_signal_layer(spec)?;
    let coding = spec.concepts * spec.support_size;
    let mut acc = 0.0;
    let mut count = 0usize;
    for drive in &layer.drives {
        for j in 0..coding {
            let col = drive.column(j);
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            acc += var;
            count += 1;
        }
    }
    let mean_sig_var = acc / count as f64;
    let ratio = (100.0 - target_nc) / target_nc;
    Ok((spec.reps as f64 * mean_sig_var * ratio).sqrt())
}

/// Generate the full synthetic dataset. Same spec, same bytes.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let layer = build_signal_layer(spec)?;
    let v = spec.n_voxels();
    let n_trials = spec.stimuli * spec.reps;

    // one shared trial table: repetition-major rows, every stimulus shared
    let mut records = Vec::with_capacity(n_trials * spec.participants);
    for p in 0..spec.participants {
        let pid = participant_label(p);
        for rep in 0..spec.reps {
            for s in 0..spec.stimuli {
                records.push(TrialRecord {
                    trial_row: rep * spec.stimuli + s,
                    stimulus_id: layer.embeddings.stimulus_ids[s].clone(),
                    participant_id: pid.clone(),
                    session: (rep + 1) as u32,
                    repetition: (rep + 1) as u32,
                    shared: true,
                });
            }
        }
    }
    let trials = TrialTable::new(records)?;

    let normal = StandardNormal;
    let mut responses = Vec::with_capacity(spec.participants);
    for p in 0..spec.participants {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::mix(seeds::mix_tag(spec.seed, "noise"), p as u64));
        let drive = &layer.drives[p];
        let mut x = Array2::<f64>::zeros((n_trials, v));
        for rep in 0..spec.reps {
            for s in 0..spec.stimuli {
                let row = rep * spec.stimuli + s;
                for j in 0..v {
                    let noise: f64 =
                        if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    x[[row, j]] = drive[[s, j]] + spec.noise_sigma * noise;
                }
            }
        }
        responses.push(ResponseMatrix::new(x, participant_label(p), (0..v).collect())?);
    }

    // atlas: region b covers block b; the noise tail is unassigned
    let mut map = BTreeMap::new();
    for j in 0..v {
        let roi = if j < spec.concepts * spec.support_size {
            (j / spec.support_size) as i32
        } else {
            UNASSIGNED
        };
        map.insert(j, roi);
    }
    let atlas = RoiAtlas::new(map, spec.concepts)?;

    let mut supports = BTreeMap::new();
    for p in 0..spec.participants {
        let per: Vec<BTreeSet<usize>> = (0..spec.concepts)
            .map(|c| {
                let block = layer.perms[p][c];
                (block * spec.support_size..(block + 1) * spec.support_size).collect()
            })
            .collect();
        supports.insert(participant_label(p), per);
    }

    Ok(SynthData {
        embeddings: layer.embeddings,
        responses,
        trials,
        truth: SynthTruth { projection: layer.projection, supports, atlas, mode: spec.mode },
    })
}

/// Jaccard overlap of two index sets; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Column means of per-concept scores used by tests; exposed so callers can
/// correlate arbitrary signals against the planted concepts.
pub fn planted_scores(spec: &SynthSpec) -> Result<(EmbeddingMatrix, Array2<f64>)> {
    let layer = build_signal_layer(spec)?;
    let mut scores = layer.embeddings.values.dot(&layer.projection.t());
    scores.mapv_inplace(|v| v.max(0.0));
    for c in 0..spec.concepts {
        let col = scores.column(c);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        let inv = 1.0 / var.sqrt();
        scores.column_mut(c).mapv_inplace(|v| v * inv);
    }
    Ok((layer.embeddings, scores))
}

/// Convenience: the mean (over participants and coding voxels) ceiling of the
/// generated data, using the given estimator configuration.
pub fn mean_coding_ceiling(
    data: &SynthData,
    spec: &SynthSpec,
    cfg: crate::dataio::NoiseCeilingConfig,
) -> Result<f64> {
    let rows: Vec<usize> = (0..spec.stimuli * spec.reps).collect();
    let coding = spec.concepts * spec.support_size;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, resp) in data.responses.iter().enumerate() {
        let table = data.trials.for_participant(&participant_label(p));
        let nc = crate::dataio::noise_ceiling(resp.values.view(), &table, &rows, cfg)?;
        for j in 0..coding {
            acc += nc[j];
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{noise_ceiling, NoiseCeilingConfig};
    use crate::stats::pearson;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            participants: 2,
            stimuli: 120,
            reps: 3,
            embed_dim: 16,
            concepts: 4,
            support_size: 6,
            extra_voxels: 10,
            noise_sigma: 0.5,
            nonlinearity: VoxelNonlinearity::Linear,
            mode: ConsistencyMode::Consistent,
            seed: 123,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.embeddings.values, b.embeddings.values);
        for (ra, rb) in a.responses.iter().zip(&b.responses) {
            assert_eq!(ra.values, rb.values);
        }
        assert_eq!(a.trials, b.trials);
    }

    #[test]
    fn zero_noise_gives_full_ceiling_on_coding_voxels() {
        let spec = SynthSpec { noise_sigma: 0.0, ..small_spec() };
        let data = generate(&spec).unwrap();
        let rows: Vec<usize> = (0..spec.stimuli * spec.reps).collect();
        let table = data.trials.for_participant("p01");
        let nc = noise_ceiling(
            data.responses[0].values.view(),
            &table,
            &rows,
            NoiseCeilingConfig::default(),
        )
        .unwrap();
        for j in 0..spec.concepts * spec.support_size {
            assert_eq!(nc[j], 100.0, "coding voxel {j}");
        }
    }

    #[test]
    fn ceiling_decreases_with_noise() {
        let mut prev = 101.0;
        for sigma in [0.3, 1.0, 3.0] {
            let spec = SynthSpec { noise_sigma: sigma, ..small_spec() };
            let data = generate(&spec).unwrap();
            let mean = mean_coding_ceiling(&data, &spec, NoiseCeilingConfig::default()).unwrap();
            assert!(mean < prev, "sigma {sigma}: {mean} !< {prev}");
            prev = mean;
        }
    }

    #[test]
    fn noise_voxels_are_uncorrelated_with_planted_scores() {
        let spec = SynthSpec { stimuli: 1200, participants: 1, ..small_spec() };
        let data = generate(&spec).unwrap();
        let (_, scores) = planted_scores(&spec).unwrap();
        // first repetition rows align with stimulus order
        let x = &data.responses[0].values;
        let coding = spec.concepts * spec.support_size;
        for j in coding..coding + 5 {
            let voxel: ndarray::Array1<f64> =
                (0..spec.stimuli).map(|s| x[[s, j]]).collect();
            for c in 0..spec.concepts {
                let r = pearson(voxel.view(), scores.column(c)).unwrap();
                assert!(r.abs() < 0.1, "noise voxel {j} vs concept {c}: r = {r}");
            }
        }
    }

    #[test]
    fn consistent_blocks_align_and_shuffled_blocks_differ() {
        let spec = SynthSpec { participants: 4, ..small_spec() };
        let data = generate(&spec).unwrap();
        let first = &data.truth.supports["p01"];
        for p in data.truth.supports.values() {
            assert_eq!(p, first);
        }

        let spec = SynthSpec { mode: ConsistencyMode::Shuffled, participants: 4, ..small_spec() };
        let data = generate(&spec).unwrap();
        let all: Vec<_> = data.truth.supports.values().collect();
        assert!(
            all.iter().any(|s| *s != all[0]),
            "shuffled mode produced identical block assignments"
        );
    }

    #[test]
    fn atlas_matches_planted_supports() {
        let spec = small_spec();
        let data = generate(&spec).unwrap();
        for supports in data.truth.supports.values() {
            for (concept, support) in supports.iter().enumerate() {
                let rois: BTreeSet<_> =
                    support.iter().map(|v| data.truth.atlas.roi_of(*v).unwrap()).collect();
                assert_eq!(rois.len(), 1, "support {concept} spans one region");
            }
        }
        // noise tail is unassigned
        let v = spec.n_voxels();
        assert_eq!(data.truth.atlas.roi_of(v - 1).unwrap(), None);
    }

    #[test]
    fn sigma_calibration_lands_near_target() {
        let mut spec = small_spec();
        spec.stimuli = 400;
        spec.noise_sigma = calibrate_sigma(&spec, 30.0).unwrap();
        let data = generate(&spec).unwrap();
        // use the unguarded estimator: the guard's small-sample bias is not
        // part of the calibration target
        let mean =
            mean_coding_ceiling(&data, &spec, NoiseCeilingConfig { guard_z: 0.0 }).unwrap();
        assert!((mean - 30.0).abs() < 5.0, "mean coding ceiling {mean}");
    }

    #[test]
    fn too_many_concepts_is_a_spec_error() {
        let spec = SynthSpec { concepts: 20, embed_dim: 16, ..small_spec() };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn jaccard_conventions() {
        let a: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let b: BTreeSet<usize> = [2, 3, 4].into_iter().collect();
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(jaccard(&a, &a), 1.0);
        let e = BTreeSet::new();
        assert_eq!(jaccard(&e, &e), 1.0);
        assert_eq!(jaccard(&a, &e), 0.0);
    }

    #[test]
    fn tanh_mode_bounds_coding_drive() {
        let spec = SynthSpec {
            nonlinearity: VoxelNonlinearity::Tanh,
            noise_sigma: 0.0,
            ..small_spec()
        };
        let data = generate(&spec).unwrap();
        let coding = spec.concepts * spec.support_size;
        for x in data.responses[0].values.iter().take(spec.stimuli * coding) {
            assert!(x.abs() <= 1.0);
        }
    }
}
