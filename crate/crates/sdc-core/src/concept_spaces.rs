//! Interpretable projection heads over the embedding space.
//!
//! Two heads live here. The first maps averaged image embeddings onto a
//! fixed behavioral target space: a closed-form ridge fit followed by an
//! optional gradient fine-tune through a ReLU, so inference scores are
//! nonnegative. The second is learned from data alone: a linear map whose
//! leaky-rectified projections of true and decoded embeddings are pushed
//! together by the same contrastive loss the decoder uses, which concentrates
//! the head on directions that survive the brain bottleneck. Both heads apply
//! a plain ReLU at inference time.

use crate::decoder::infonce_with_grads;
use crate::decoder::topk_accuracy;
use crate::error::{Error, Result};
use crate::linalg::ridge_solve;
use crate::seeds;
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Component counts probed when sweeping head width.
pub const COMPONENT_GRID: [usize; 6] = [32, 64, 128, 256, 512, 1024];

/// Negative slope used while fitting the contrastive head.
pub const DEFAULT_TRAIN_SLOPE: f64 = 0.05;

/// A `c x d` linear map with rectified outputs.
///
/// Inference always applies a plain ReLU; training-time code may instead use
/// the stored leaky slope so gradients flow through inactive components.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weights: Array2<f64>,
    pub train_slope: f64,
    pub space_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Plain ReLU: scoring / retrieval.
    Inference,
    /// Leaky ReLU with the head's slope: objective evaluation during fits.
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadMeta {
    pub components: usize,
    pub embed_dim: usize,
    pub train_slope: f64,
    pub space_tag: String,
}

impl ProjectionHead {
    pub fn new(weights: Array2<f64>, train_slope: f64, space_tag: String) -> Result<Self> {
        if weights.nrows() == 0 {
            return Err(Error::Shape("projection head needs at least one component".into()));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("projection head weights must be finite".into()));
        }
        Ok(Self { weights, train_slope, space_tag })
    }

    pub fn components(&self) -> usize {
        self.weights.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Weights as a matrix file plus a JSON sidecar with the head metadata.
    pub fn store(&self, matrix_path: &Path, meta_path: &Path) -> Result<()> {
        let side = crate::dataio::MatrixMeta {
            space_tag: Some(self.space_tag.clone()),
            ..crate::dataio::MatrixMeta::default()
        };
        crate::dataio::store_matrix(matrix_path, &self.weights, Some(&side))?;
        let meta = HeadMeta {
            components: self.components(),
            embed_dim: self.embed_dim(),
            train_slope: self.train_slope,
            space_tag: self.space_tag.clone(),
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(meta_path, text)?;
        Ok(())
    }

    pub fn load(matrix_path: &Path, meta_path: &Path) -> Result<Self> {
        let file = crate::dataio::load_matrix(matrix_path)?;
        let meta: HeadMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        if file.values.dim() != (meta.components, meta.embed_dim) {
            return Err(Error::Corrupt(format!(
                "head matrix is {:?} but metadata says {}x{}",
                file.values.dim(),
                meta.components,
                meta.embed_dim
            )));
        }
        Self::new(file.values, meta.train_slope, meta.space_tag)
    }
}

/// Validation-fold pairs pooled across participants, row-aligned.
#[derive(Debug, Clone)]
pub struct PooledValSet {
    /// True embeddings, one row per pooled validation trial.
    pub y_clip: Array2<f64>,
    /// Decoded embeddings aligned with `y_clip`.
    pub y_brain: Array2<f64>,
    pub participant_of_row: Vec<String>,
}

impl PooledValSet {
    pub fn new(
        y_clip: Array2<f64>,
        y_brain: Array2<f64>,
        participant_of_row: Vec<String>,
    ) -> Result<Self> {
        if y_clip.dim() != y_brain.dim() {
            return Err(Error::Shape(format!(
                "pooled pair mismatch: {:?} vs {:?}",
                y_clip.dim(),
                y_brain.dim()
            )));
        }
        if y_clip.nrows() != participant_of_row.len() {
            return Err(Error::Shape(format!(
                "{} pooled rows vs {} participant labels",
                y_clip.nrows(),
                participant_of_row.len()
            )));
        }
        if y_clip.iter().chain(y_brain.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerics("pooled embeddings must be finite".into()));
        }
        Ok(Self { y_clip, y_brain, participant_of_row })
    }

    /// Stack per-participant (true, decoded) validation pairs.
    pub fn concat(parts: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>, &str)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Data("no validation pairs to pool".into()));
        }
        let d = parts[0].0.ncols();
        let total: usize = parts.iter().map(|(a, _, _)| a.nrows()).sum();
        let mut y_clip = Array2::zeros((total, d));
        let mut y_brain = Array2::zeros((total, d));
        let mut labels = Vec::with_capacity(total);
        let mut at = 0;
        for (yc, yb, pid) in parts {
            if yc.dim() != yb.dim() || yc.ncols() != d {
                return Err(Error::Shape(format!(
                    "participant {pid}: pair {:?} vs {:?} (want width {d})",
                    yc.dim(),
                    yb.dim()
                )));
            }
            for r in 0..yc.nrows() {
                y_clip.row_mut(at).assign(&yc.row(r));
                y_brain.row_mut(at).assign(&yb.row(r));
                labels.push(pid.to_string());
                at += 1;
            }
        }
        Self::new(y_clip, y_brain, labels)
    }

    pub fn rows(&self) -> usize {
        self.y_clip.nrows()
    }
}

/// Closed-form ridge map from averaged embeddings onto a target space:
/// `W = argmin ||U W^T - T||^2 + alpha ||W||^2`, no intercept.
pub fn fit_things_map(
    u_avg: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<ProjectionHead> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("ridge alpha {alpha} must be > 0")));
    }
    let wt = ridge_solve(u_avg, targets, alpha)?; // d x c
    ProjectionHead::new(wt.t().to_owned(), DEFAULT_TRAIN_SLOPE, "things".into())
}

/// Mean squared rectified-prediction error: `||relu(U W^T) - T||^2 / (2n)`.
fn relu_fit_loss(w: &Array2<f64>, u: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> f64 {
    let z = u.dot(&w.t());
    let n = u.nrows() as f64;
    z.indexed_iter()
        .map(|((i, j), zv)| {
            let r = zv.max(0.0) - t[[i, j]];
            r * r
        })
        .sum::<f64>()
        / (2.0 * n)
}

/// Polish a ridge head by gradient descent through the inference ReLU.
///
/// Returns the best iterate seen (including the starting point), so the
/// fitting loss never increases. `steps = 0` returns the head unchanged.
pub fn finetune_relu_head(
    head: &ProjectionHead,
    u_avg: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    steps: usize,
    lr: f64,
) -> Result<ProjectionHead> {
    if u_avg.nrows() != targets.nrows() {
        return Err(Error::Shape(format!(
            "{} embedding rows vs {} target rows",
            u_avg.nrows(),
            targets.nrows()
        )));
    }
    if u_avg.ncols() != head.embed_dim() || targets.ncols() != head.components() {
        return Err(Error::Shape(format!(
            "head is {}x{} but data is {:?} -> {:?}",
            head.components(),
            head.embed_dim(),
            u_avg.dim(),
            targets.dim()
        )));
    }
    let mut w = head.weights.clone();
    let mut best_w = w.clone();
    let mut best_loss = relu_fit_loss(&w, u_avg, targets);
    let n = u_avg.nrows() as f64;
    for _ in 0..steps {
        let z = u_avg.dot(&w.t()); // n x c
        let mut dz = Array2::<f64>::zeros(z.dim());
        for ((i, j), zv) in z.indexed_iter() {
            if *zv > 0.0 {
                dz[[i, j]] = (zv - targets[[i, j]]) / n;
            }
        }
        let grad = dz.t().dot(&u_avg); // c x d
        w.zip_mut_with(&grad, |wv, g| *wv -= lr * g);
        let loss = relu_fit_loss(&w, u_avg, targets);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "rectified fine-tune produced non-finite loss (lr {lr})"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best_w = w.clone();
        }
    }
    ProjectionHead::new(best_w, head.train_slope, head.space_tag.clone())
}

/// Project through the head: `relu` at inference, leaky at train time.
pub fn apply_head(
    head: &ProjectionHead,
    y: ArrayView2<'_, f64>,
    mode: Activation,
) -> Result<Array2<f64>> {
    if y.ncols() != head.embed_dim() {
        return Err(Error::Shape(format!(
            "input width {} does not match head width {}",
            y.ncols(),
            head.embed_dim()
        )));
    }
    let mut z = y.dot(&head.weights.t());
    match mode {
        Activation::Inference => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Train => {
            let s = head.train_slope;
            z.mapv_inplace(|v| if v >= 0.0 { v } else { s * v });
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdcConfig {
    pub components: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub slope: f64,
    pub tau: f64,
    /// Average the loss over both retrieval directions instead of using
    /// true-embedding queries only.
    pub symmetrize: bool,
    /// Frozen-batch loss probe interval, in iterations.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for SdcConfig {
    fn default() -> Self {
        Self {
            components: 128,
            iters: 10_000,
            batch: 3_000,
            lr: 2e-4,
            slope: DEFAULT_TRAIN_SLOPE,
            tau: 1.0,
            symmetrize: false,
            probe_every: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub iter: usize,
    pub loss: f64,
}

/// Loss trace on a frozen probe batch, recorded through the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdcTrainRecord {
    pub probe: Vec<ProbePoint>,
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

fn leaky_grad(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Contrastive head objective and its gradient with respect to `w`.
///
/// Queries are leaky projections of the true embeddings, keys of the decoded
/// ones; with `symmetrize` the two directions are averaged.
pub fn sdc_objective_grads(
    w: &Array2<f64>,
    y_clip: ArrayView2<'_, f64>,
    y_brain: ArrayView2<'_, f64>,
    slope: f64,
    tau: f64,
    symmetrize: bool,
) -> Result<(f64, Array2<f64>)> {
    let zc = y_clip.dot(&w.t());
    let zb = y_brain.dot(&w.t());
    let q = zc.mapv(|v| leaky(v, slope));
    let k = zb.mapv(|v| leaky(v, slope));
    let (loss_fwd, gq_fwd, gk_fwd) = infonce_with_grads(q.view(), k.view(), tau)?;
    let (loss, gq, gk) = if symmetrize {
        let (loss_rev, gk_rev, gq_rev) = infonce_with_grads(k.view(), q.view(), tau)?;
        let mut gq = gq_fwd;
        gq.zip_mut_with(&gq_rev, |a, b| *a = 0.5 * (*a + b));
        let mut gk = gk_fwd;
        gk.zip_mut_with(&gk_rev, |a, b| *a = 0.5 * (*a + b));
        (0.5 * (loss_fwd + loss_rev), gq, gk)
    } else {
        (loss_fwd, gq_fwd, gk_fwd)
    };
    let mut dzc = gq;
    dzc.zip_mut_with(&zc, |g, z| *g *= leaky_grad(*z, slope));
    let mut dzb = gk;
    dzb.zip_mut_with(&zb, |g, z| *g *= leaky_grad(*z, slope));
    let grad = dzc.t().dot(&y_clip) + dzb.t().dot(&y_brain);
    Ok((loss, grad))
}

/// Fit the contrastive head on pooled validation pairs.
///
/// The weight matrix starts Gaussian with scale `1/sqrt(d)` and is updated by
/// Adam on uniformly sampled batches; a frozen probe batch is scored every
/// `probe_every` iterations (plus start and end) into the returned record.
pub fn fit_sdc(pooled: &PooledValSet, cfg: &SdcConfig) -> Result<(ProjectionHead, SdcTrainRecord)> {
    let rows = pooled.rows();
    let d = pooled.y_clip.ncols();
    if cfg.components == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive batches need at least two rows, got {}",
            cfg.batch
        )));
    }
    if rows < cfg.batch {
        return Err(Error::Data(format!(
            "pooled set has {rows} rows, fewer than the batch size {}",
            cfg.batch
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::mix_tag(cfg.seed, "sdc-init"));
    let normal = StandardNormal;
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = Array2::<f64>::from_shape_fn((cfg.components, d), |_| {
        let g: f64 = normal.sample(&mut init_rng);
        g * scale
    });

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seeds::mix_tag(cfg.seed, "sdc-probe"));
    let probe_idx: Vec<usize> =
        rand::seq::index::sample(&mut probe_rng, rows, cfg.batch.min(rows)).into_vec();
    let probe_clip = pooled.y_clip.select(Axis(0), &probe_idx);
    let probe_brain = pooled.y_brain.select(Axis(0), &probe_idx);
    let probe_loss = |w: &Array2<f64>| -> Result<f64> {
        let (loss, _) = sdc_objective_grads(
            w,
            probe_clip.view(),
            probe_brain.view(),
            cfg.slope,
            cfg.tau,
            cfg.symmetrize,
        )?;
        Ok(loss)
    };

    let mut record = SdcTrainRecord { probe: vec![ProbePoint { iter: 0, loss: probe_loss(&w)? }] };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seeds::mix_tag(cfg.seed, "sdc-batches"));
    let mut adam = crate::decoder::Adam::new(
        crate::decoder::AdamParams::with_lr(cfg.lr),
        &[cfg.components * d],
    );
    for iter in 1..=cfg.iters {
        let idx: Vec<usize> = rand::seq::index::sample(&mut batch_rng, rows, cfg.batch).into_vec();
        let yc = pooled.y_clip.select(Axis(0), &idx);
        let yb = pooled.y_brain.select(Axis(0), &idx);
        let (loss, grad) =
            sdc_objective_grads(&w, yc.view(), yb.view(), cfg.slope, cfg.tau, cfg.symmetrize)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "contrastive head loss became non-finite at iteration {iter}"
            )));
        }
        {
            let w_flat = w.as_slice_mut().expect("contiguous weights");
            let g_flat = grad.as_slice().expect("contiguous gradient");
            adam.step(&mut [w_flat], &[g_flat]);
        }
        if iter % cfg.probe_every == 0 || iter == cfg.iters {
            record.probe.push(ProbePoint { iter, loss: probe_loss(&w)? });
        }
    }

    let head = ProjectionHead::new(w, cfg.slope, "sdc".into())?;
    Ok((head, record))
}

/// Retrieval accuracy measured after projecting both sides through the head.
pub fn space_topk(
    head: &ProjectionHead,
    y_true: ArrayView2<'_, f64>,
    y_pred: ArrayView2<'_, f64>,
    k: usize,
) -> Result<f64> {
    let t = apply_head(head, y_true, Activation::Inference)?;
    let p = apply_head(head, y_pred, Activation::Inference)?;
    topk_accuracy(p.view(), t.view(), k)
}
