//! Sparse voxel masks per concept, and how specific each mask is.
//!
//! For one participant and one concept, the mask is the support of a LASSO
//! regression from the (z-scored) validation responses onto the concept's
//! projection scores. Specificity then asks: if the decoder only sees the
//! voxels of mask `j`, how much of concept `i`'s decodability survives? The
//! ratio matrix should be strong on the diagonal when masks really carve out
//! their own concept.
//!
//! The LASSO objective uses the `1/(2n)` convention, the target is centered
//! instead of fitting an intercept, and zero-variance columns are excluded
//! from the model. Coordinates are updated cyclically with soft-thresholding
//! until the largest coefficient change in a sweep drops below `1e-7` (or
//! `1e4` sweeps elapse, which is reported, not fatal).

use crate::concept_spaces::ProjectionHead;
use crate::error::{Error, Result};
use crate::stats::pearson;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MASK_ALPHA: f64 = 1e-3;
pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

/// Pearson denominators smaller than this leave a specificity entry undefined.
pub const SPECIFICITY_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub participant_id: String,
    pub concept_index: usize,
    /// Fitted coefficients, aligned with the columns of the fitting matrix.
    pub lasso_weights: Vec<f64>,
    /// `binary[j]` is true exactly when `lasso_weights[j] != 0`.
    pub binary: Vec<bool>,
    pub alpha: f64,
    /// Original voxel ids for each column (identity unless remapped).
    pub voxel_ids: Vec<usize>,
}

impl ConceptMask {
    /// Attach the original voxel ids of the fitting columns, for atlas use.
    pub fn with_voxel_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.lasso_weights.len() {
            return Err(Error::Shape(format!(
                "{} voxel ids for {} mask columns",
                ids.len(),
                self.lasso_weights.len()
            )));
        }
        self.voxel_ids = ids;
        Ok(self)
    }

    /// Original voxel ids in the support, ascending by column.
    pub fn support_ids(&self) -> Vec<usize> {
        self.binary
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(j, _)| self.voxel_ids[j])
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.binary.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoDiagnostics {
    pub converged: bool,
    pub sweeps: usize,
    /// Largest coefficient change in the final sweep.
    pub max_delta: f64,
    /// Objective value after each sweep.
    pub objective: Vec<f64>,
}

fn lasso_objective(x: ArrayView2<'_, f64>, yc: &Array1<f64>, m: &Array1<f64>, alpha: f64) -> f64 {
    let r = yc - &x.dot(m);
    let n = x.nrows() as f64;
    r.dot(&r) / (2.0 * n) + alpha * m.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Fit one concept mask by cyclic coordinate descent.
///
/// `x` is the trial-by-voxel matrix (columns already on a common scale),
/// `y` the concept scores for the same trials. The returned mask's
/// `voxel_ids` default to column positions; remap with `with_voxel_ids`.
pub fn fit_lasso_mask(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    alpha: f64,
    participant_id: &str,
    concept_index: usize,
) -> Result<(ConceptMask, LassoDiagnostics)> {
    let (n, v) = x.dim();
    if n < 2 {
        return Err(Error::Data(format!("lasso needs at least two rows, got {n}")));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", y.len())));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("lasso alpha {alpha} must be > 0")));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("lasso inputs must be finite".into()));
    }

    let y_mean = y.sum() / n as f64;
    let yc: Array1<f64> = y.mapv(|v| v - y_mean);

    // per-column second moment (for updates) and variance (for exclusion)
    let nf = n as f64;
    let mut col_sq = vec![0.0; v];
    let mut active_col = vec![true; v];
    for j in 0..v {
        let col = x.column(j);
        let s: f64 = col.dot(&col);
        let mean = col.sum() / nf;
        let var = s / nf - mean * mean;
        col_sq[j] = s / nf;
        if var <= 1e-12 {
            active_col[j] = false;
        }
    }

    let mut m = Array1::<f64>::zeros(v);
    let mut resid = yc.clone();
    let mut objective = Vec::new();
    let mut sweeps = 0;
    let mut max_delta = f64::INFINITY;
    let mut converged = false;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        max_delta = 0.0;
        for j in 0..v {
            if !active_col[j] {
                continue;
            }
            let col = x.column(j);
            let old = m[j];
            let rho = col.dot(&resid) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, alpha) / col_sq[j];
            if new != old {
                let delta = old - new;
                resid.zip_mut_with(&col, |r, xv| *r += delta * xv);
                m[j] = new;
            }
            max_delta = max_delta.max((m[j] - old).abs());
        }
        objective.push(lasso_objective(x, &yc, &m, alpha));
        if max_delta < LASSO_TOL {
            converged = true;
            break;
        }
    }

    let binary: Vec<bool> = m.iter().map(|v| *v != 0.0).collect();
    let mask = ConceptMask {
        participant_id: participant_id.to_string(),
        concept_index,
        lasso_weights: m.to_vec(),
        binary,
        alpha,
        voxel_ids: (0..v).collect(),
    };
    Ok((mask, LassoDiagnostics { converged, sweeps, max_delta, objective }))
}

/// Largest optimality violation of a fitted mask.
///
/// Active coordinates must satisfy the stationarity equation, inactive ones
/// the subgradient bound; zero-variance columns are outside the model and
/// are skipped, mirroring the solver.
pub fn kkt_check(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, mask: &ConceptMask) -> f64 {
    let n = x.nrows() as f64;
    let y_mean = y.sum() / n;
    let yc: Array1<f64> = y.mapv(|v| v - y_mean);
    let m = Array1::from_vec(mask.lasso_weights.clone());
    let resid = x.dot(&m) - yc;
    let mut worst = 0.0f64;
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.sum() / n;
        let var = col.dot(&col) / n - mean * mean;
        if var <= 1e-12 {
            continue;
        }
        let g = col.dot(&resid) / n;
        let viol = if mask.lasso_weights[j] != 0.0 {
            (g + mask.alpha * mask.lasso_weights[j].signum()).abs()
        } else {
            (g.abs() - mask.alpha).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

/// Smallest penalty that forces the all-zero solution: `||X^T yc||_inf / n`.
pub fn zero_solution_alpha(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let n = x.nrows() as f64;
    let y_mean = y.sum() / n;
    let yc: Array1<f64> = y.mapv(|v| v - y_mean);
    let mut worst = 0.0f64;
    for j in 0..x.ncols() {
        worst = worst.max((x.column(j).dot(&yc) / n).abs());
    }
    worst
}

/// Ratio matrix of masked to unmasked decodability.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecificityMatrix {
    /// `values[[i, j]]`: concept `i` decodability through mask `j`, relative
    /// to the unmasked decoder. Only meaningful where `defined`.
    pub values: Array2<f64>,
    pub defined: Array2<bool>,
    /// Participant id, or `"averaged"` for the cross-participant mean.
    pub tag: String,
}

pub const AVERAGED_TAG: &str = "averaged";

impl SpecificityMatrix {
    /// Mean of the defined diagonal entries.
    pub fn diagonal_mean(&self) -> Option<f64> {
        self.part_mean(|i, j| i == j)
    }

    /// Mean of the defined off-diagonal entries.
    pub fn offdiagonal_mean(&self) -> Option<f64> {
        self.part_mean(|i, j| i != j)
    }

    fn part_mean(&self, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for ((i, j), v) in self.values.indexed_iter() {
            if keep(i, j) && self.defined[[i, j]] {
                acc += v;
                count += 1;
            }
        }
        (count > 0).then(|| acc / count as f64)
    }
}

/// Compute the specificity matrix for one participant.
///
/// `decode` maps (possibly masked) responses to embedding space; `masks`
/// must hold one mask per head component, in any order. Score vectors are
/// the raw linear projections onto each head row. An entry is undefined when
/// either correlation is degenerate or the unmasked correlation is smaller
/// than [`SPECIFICITY_DENOM_FLOOR`] in magnitude.
pub fn specificity_matrix<F>(
    decode: F,
    masks: &[ConceptMask],
    x_test: ArrayView2<'_, f64>,
    y_test_clip: ArrayView2<'_, f64>,
    head: &ProjectionHead,
) -> Result<SpecificityMatrix>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    let c = head.components();
    if masks.len() != c {
        return Err(Error::Shape(format!("{} masks for {c} head components", masks.len())));
    }
    let mut order = vec![None; c];
    for m in masks {
        if m.concept_index >= c {
            return Err(Error::Shape(format!(
                "mask concept index {} out of range for {c} components",
                m.concept_index
            )));
        }
        if order[m.concept_index].replace(m).is_some() {
            return Err(Error::Data(format!("duplicate mask for concept {}", m.concept_index)));
        }
        if m.lasso_weights.len() != x_test.ncols() {
            return Err(Error::Shape(format!(
                "mask over {} voxels applied to {} response columns",
                m.lasso_weights.len(),
                x_test.ncols()
            )));
        }
    }
    if x_test.nrows() != y_test_clip.nrows() {
        return Err(Error::Shape(format!(
            "{} response rows vs {} embedding rows",
            x_test.nrows(),
            y_test_clip.nrows()
        )));
    }

    let tag = masks[0].participant_id.clone();
    let full_decoded = decode(x_test)?;
    if full_decoded.dim() != (y_test_clip.nrows(), head.embed_dim()) {
        return Err(Error::Shape(format!(
            "decoder returned {:?}, expected ({}, {})",
            full_decoded.dim(),
            y_test_clip.nrows(),
            head.embed_dim()
        )));
    }

    // reference scores and denominators, one per concept
    let true_scores = y_test_clip.dot(&head.weights.t()); // n x c
    let full_scores = full_decoded.dot(&head.weights.t());
    let mut denom = vec![None; c];
    for i in 0..c {
        denom[i] = pearson(true_scores.column(i), full_scores.column(i))
            .filter(|d| d.abs() >= SPECIFICITY_DENOM_FLOOR);
    }

    let mut values = Array2::<f64>::zeros((c, c));
    let mut defined = Array2::from_elem((c, c), false);
    for j in 0..c {
        let mask = order[j].expect("validated above");
        let mut masked = x_test.to_owned();
        for (col, keep) in mask.binary.iter().enumerate() {
            if !keep {
                masked.column_mut(col).fill(0.0);
            }
        }
        let masked_scores = decode(masked.view())?.dot(&head.weights.t());
        for i in 0..c {
            let Some(d) = denom[i] else { continue };
            let Some(num) = pearson(true_scores.column(i), masked_scores.column(i)) else {
                continue;
            };
            values[[i, j]] = num / d;
            defined[[i, j]] = true;
        }
    }
    Ok(SpecificityMatrix { values, defined, tag })
}

/// Entrywise mean over the defined entries of several matrices.
pub fn average_specificity(matrices: &[SpecificityMatrix]) -> Result<SpecificityMatrix> {
    let first = matrices.first().ok_or_else(|| Error::Data("nothing to average".into()))?;
    let dim = first.values.dim();
    for m in matrices {
        if m.values.dim() != dim {
            return Err(Error::Shape(format!(
                "specificity shapes differ: {:?} vs {dim:?}",
                m.values.dim()
            )));
        }
    }
    let mut values = Array2::<f64>::zeros(dim);
    let mut defined = Array2::from_elem(dim, false);
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let mut acc = 0.0;
            let mut count = 0usize;
            for m in matrices {
                if m.defined[[i, j]] {
                    acc += m.values[[i, j]];
                    count += 1;
                }
            }
            if count > 0 {
                values[[i, j]] = acc / count as f64;
                defined[[i, j]] = true;
            }
        }
    }
    Ok(SpecificityMatrix { values, defined, tag: AVERAGED_TAG.into() })
}
