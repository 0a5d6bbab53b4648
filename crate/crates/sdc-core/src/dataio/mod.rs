//! Data plumbing: binary matrix containers, trial tables, atlases,
//! stimulus-disjoint folds, reliability screening and per-voxel
//! standardization.

pub mod atlas;
pub mod container;
pub mod noise;
pub mod split;
pub mod trials;

pub use atlas::{RoiAtlas, UNASSIGNED};
pub use container::{load_matrix, store_matrix, MatrixFile, MatrixMeta};
pub use noise::{
    ceiling_percent, noise_ceiling, select_voxels, NoiseCeilingConfig, DEFAULT_GUARD_Z,
    DEFAULT_SELECTION_THRESHOLD,
};
pub use split::{make_split, DatasetSplit, Fold};
pub use trials::{TrialRecord, TrialTable};

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2, Axis};
use std::collections::BTreeMap;
use std::path::Path;

/// Stimulus representations: one row per stimulus, tagged with the embedding
/// space they live in. Stimulus ids are unique.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub stimulus_ids: Vec<String>,
    pub space_tag: String,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>, stimulus_ids: Vec<String>, space_tag: String) -> Result<Self> {
        if values.nrows() != stimulus_ids.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows vs {} stimulus ids",
                values.nrows(),
                stimulus_ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &stimulus_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate stimulus id '{id}'")));
            }
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite embedding value {bad}")));
        }
        Ok(Self { values, stimulus_ids, space_tag })
    }

    pub fn n_stimuli(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Row index of a stimulus id.
    pub fn row_of(&self, stimulus_id: &str) -> Result<usize> {
        self.stimulus_ids
            .iter()
            .position(|s| s == stimulus_id)
            .ok_or_else(|| Error::Data(format!("stimulus '{stimulus_id}' not in embedding matrix")))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let meta = MatrixMeta {
            space_tag: Some(self.space_tag.clone()),
            stimulus_ids: Some(self.stimulus_ids.clone()),
            ..Default::default()
        };
        store_matrix(path, &self.values, Some(&meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = load_matrix(path)?;
        let meta = file.meta.ok_or_else(|| {
            Error::Data(format!("{}: embedding matrix needs a metadata sidecar", path.display()))
        })?;
        let ids = meta
            .stimulus_ids
            .ok_or_else(|| Error::Data(format!("{}: sidecar lacks stimulus_ids", path.display())))?;
        Self::new(file.values, ids, meta.space_tag.unwrap_or_else(|| "unknown".into()))
    }
}

/// Per-trial voxel responses for one participant. `voxel_ids` map columns back
/// to the participant's native voxel indexing (atlas keys).
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    pub values: Array2<f64>,
    pub participant_id: String,
    pub voxel_ids: Vec<usize>,
}

impl ResponseMatrix {
    pub fn new(values: Array2<f64>, participant_id: String, voxel_ids: Vec<usize>) -> Result<Self> {
        if values.ncols() != voxel_ids.len() {
            return Err(Error::Shape(format!(
                "{} response columns vs {} voxel ids",
                values.ncols(),
                voxel_ids.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite response value {bad}")));
        }
        Ok(Self { values, participant_id, voxel_ids })
    }

    pub fn n_trials(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    /// Restrict to a subset of columns (by column position, not voxel id).
    pub fn select_columns(&self, cols: &[usize]) -> Result<ResponseMatrix> {
        for c in cols {
            if *c >= self.n_voxels() {
                return Err(Error::Shape(format!("column {c} out of range")));
            }
        }
        let values = self.values.select(Axis(1), cols);
        let voxel_ids = cols.iter().map(|c| self.voxel_ids[*c]).collect();
        ResponseMatrix::new(values, self.participant_id.clone(), voxel_ids)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let meta = MatrixMeta {
            participant_id: Some(self.participant_id.clone()),
            voxel_ids: Some(self.voxel_ids.clone()),
            ..Default::default()
        };
        store_matrix(path, &self.values, Some(&meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = load_matrix(path)?;
        let meta = file.meta.ok_or_else(|| {
            Error::Data(format!("{}: response matrix needs a metadata sidecar", path.display()))
        })?;
        let participant = meta
            .participant_id
            .ok_or_else(|| Error::Data(format!("{}: sidecar lacks participant_id", path.display())))?;
        let voxel_ids = match meta.voxel_ids {
            Some(v) => v,
            None => (0..file.values.ncols()).collect(),
        };
        Self::new(file.values, participant, voxel_ids)
    }
}

/// Per-column standardization fitted on training rows and applied anywhere,
/// so validation and test statistics never leak into the transform.
#[derive(Debug, Clone)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Fit per-column mean and (population) standard deviation on `rows`.
    /// Columns with vanishing spread get unit scale so they map to zero.
    pub fn fit(x: ArrayView2<'_, f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("z-score fit on empty row set".into()));
        }
        let n = rows.len() as f64;
        let v = x.ncols();
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        for &r in rows {
            if r >= x.nrows() {
                return Err(Error::Shape(format!("row {r} out of range")));
            }
            for j in 0..v {
                mean[j] += x[[r, j]];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for &r in rows {
            for j in 0..v {
                let d = x[[r, j]] - mean[j];
                std[j] += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    /// Standardize the given rows into a dense matrix.
    pub fn apply(&self, x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((rows.len(), x.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..x.ncols() {
                out[[i, j]] = (x[[r, j]] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Average response rows within each stimulus.
///
/// Returns one row per stimulus, ordered by ascending stimulus id, together
/// with the id list. Used for evaluation, where retrieval candidates are
/// stimuli rather than presentations.
pub fn average_by_stimulus(
    x: ArrayView2<'_, f64>,
    trials: &TrialTable,
    rows: &[usize],
) -> Result<(Array2<f64>, Vec<String>)> {
    let by_row: BTreeMap<usize, &str> = trials
        .records()
        .iter()
        .map(|r| (r.trial_row, r.stimulus_id.as_str()))
        .collect();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        let stim = by_row
            .get(&r)
            .ok_or_else(|| Error::Data(format!("row {r} missing from trial table")))?;
        groups.entry(stim).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("average_by_stimulus over empty row set".into()));
    }
    let mut out = Array2::<f64>::zeros((groups.len(), x.ncols()));
    let mut ids = Vec::with_capacity(groups.len());
    for (i, (stim, rws)) in groups.iter().enumerate() {
        for &r in rws {
            for j in 0..x.ncols() {
                out[[i, j]] += x[[r, j]];
            }
        }
        let inv = 1.0 / rws.len() as f64;
        for j in 0..x.ncols() {
            out[[i, j]] *= inv;
        }
        ids.push(stim.to_string());
    }
    Ok((out, ids))
}

/// Per-trial embedding rows for the given response rows: row `i` of the output
/// is the embedding of the stimulus shown on trial `rows[i]`.
pub fn gather_embeddings(
    embeddings: &EmbeddingMatrix,
    trials: &TrialTable,
    rows: &[usize],
) -> Result<Array2<f64>> {
    let by_row: BTreeMap<usize, &str> = trials
        .records()
        .iter()
        .map(|r| (r.trial_row, r.stimulus_id.as_str()))
        .collect();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, id) in embeddings.stimulus_ids.iter().enumerate() {
        index.insert(id.as_str(), i);
    }
    let mut out = Array2::<f64>::zeros((rows.len(), embeddings.dim()));
    for (i, &r) in rows.iter().enumerate() {
        let stim = by_row
            .get(&r)
            .ok_or_else(|| Error::Data(format!("row {r} missing from trial table")))?;
        let e = index
            .get(stim)
            .ok_or_else(|| Error::Data(format!("stimulus '{stim}' has no embedding row")))?;
        out.row_mut(i).assign(&embeddings.values.row(*e));
    }
    Ok(out)
}

/// Embedding rows for an explicit, ordered stimulus id list.
pub fn embeddings_for_ids(embeddings: &EmbeddingMatrix, ids: &[String]) -> Result<Array2<f64>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, id) in embeddings.stimulus_ids.iter().enumerate() {
        index.insert(id.as_str(), i);
    }
    let mut out = Array2::<f64>::zeros((ids.len(), embeddings.dim()));
    for (i, id) in ids.iter().enumerate() {
        let e = index
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("stimulus '{id}' has no embedding row")))?;
        out.row_mut(i).assign(&embeddings.values.row(*e));
    }
    Ok(out)
}
