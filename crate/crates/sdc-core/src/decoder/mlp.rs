//! Single-hidden-layer decoder from voxel space to embedding space, trained
//! with the contrastive objective.
//!
//! Architecture: `y = W2 * leakyrelu(W1 x + b1) + b2`, leaky slope 0.01.
//! Training follows a fixed recipe: Adam, batches reshuffled each epoch, and
//! a step learning-rate schedule that divides by `lr_drop_factor` after each
//! epoch listed in `lr_drop_epochs`.

use crate::decoder::adam::{Adam, AdamParams};
use crate::decoder::infonce::infonce_with_grads;
use crate::error::{Error, Result};
use crate::seeds;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMlp {
    pub w1: Array2<f64>, // h x v
    pub b1: Array1<f64>, // h
    pub w2: Array2<f64>, // d x h
    pub b2: Array1<f64>, // d
    pub leaky_slope: f64,
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

fn leaky_deriv(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl DecoderMlp {
    /// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` per tensor.
    pub fn init(v: usize, hidden: usize, d: usize, leaky_slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / (v as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let draw = |b: f64, rng: &mut ChaCha8Rng| rng.gen_range(-b..b);
        let w1 = Array2::from_shape_fn((hidden, v), |_| draw(bound1, &mut rng));
        let b1 = Array1::from_shape_fn(hidden, |_| draw(bound1, &mut rng));
        let w2 = Array2::from_shape_fn((d, hidden), |_| draw(bound2, &mut rng));
        let b2 = Array1::from_shape_fn(d, |_| draw(bound2, &mut rng));
        Self { w1, b1, w2, b2, leaky_slope }
    }

    pub fn n_voxels(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Pre-activations and decoded embeddings for a batch.
    fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let z1 = x.dot(&self.w1.t()) + &self.b1;
        let a1 = z1.mapv(|z| leaky(z, self.leaky_slope));
        let y = a1.dot(&self.w2.t()) + &self.b2;
        (z1, a1, y)
    }

    /// Decode a batch of voxel rows into embedding rows.
    pub fn decode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_voxels() {
            return Err(Error::Shape(format!(
                "decode input has {} voxels, model expects {}",
                x.ncols(),
                self.n_voxels()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("non-finite input to decode".into()));
        }
        let (_, _, y) = self.forward(x);
        Ok(y)
    }

    /// Backpropagate a loss gradient on the decoded batch into all parameters.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        z1: &Array2<f64>,
        a1: &Array2<f64>,
        grad_y: &Array2<f64>,
    ) -> MlpGrads {
        let gw2 = grad_y.t().dot(a1);
        let gb2 = grad_y.sum_axis(Axis(0));
        let ga1 = grad_y.dot(&self.w2);
        let slope = self.leaky_slope;
        let gz1 = ndarray::Zip::from(&ga1)
            .and(z1)
            .map_collect(|g, z| g * leaky_deriv(*z, slope));
        let gw1 = gz1.t().dot(&x);
        let gb1 = gz1.sum_axis(Axis(0));
        MlpGrads { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub tau: f64,
    pub leaky_slope: f64,
    /// L2-normalize embedding targets before training. Off by default: raw
    /// embeddings enter the dot products as-is.
    pub normalize_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 12,
            batch_size: 128,
            lr_init: 1e-4,
            lr_drop_epochs: vec![3, 6, 9],
            lr_drop_factor: 10.0,
            tau: 1.0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            normalize_embeddings: false,
            seed: 0,
        }
    }
}

/// Learning rate in force during a 1-based epoch: the initial rate divided by
/// `lr_drop_factor` once per listed epoch already completed.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|e| **e < epoch).count();
    cfg.lr_init / cfg.lr_drop_factor.powi(drops as i32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Mean contrastive loss per epoch (weighted by batch size).
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
}

/// Train a decoder on per-trial voxel rows `x` against embedding rows `y`.
///
/// Batches are drawn without replacement under a per-epoch shuffle; a
/// trailing batch is kept when it still has at least two rows (a singleton
/// has no negatives) and dropped otherwise. Fixed seed implies bit-identical
/// parameters.
pub fn train_mlp(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(DecoderMlp, TrainRecord)> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} x rows vs {} y rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two training rows".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    let y_owned = if cfg.normalize_embeddings {
        let mut y2 = y.to_owned();
        for mut row in y2.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        y2
    } else {
        y.to_owned()
    };

    let n = x.nrows();
    let mut model = DecoderMlp::init(
        x.ncols(),
        cfg.hidden,
        y.ncols(),
        cfg.leaky_slope,
        seeds::mix_tag(cfg.seed, "mlp-init"),
    );
    let mut adam = Adam::new(
        AdamParams::with_lr(cfg.lr_init),
        &[model.w1.len(), model.b1.len(), model.w2.len(), model.b2.len()],
    );

    let mut record = TrainRecord { epoch_losses: Vec::with_capacity(cfg.epochs), final_lr: cfg.lr_init };
    let shuffle_seed = seeds::mix_tag(cfg.seed, "mlp-epochs");
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        adam.set_lr(lr);
        record.final_lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut rows_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // trailing singleton: no negatives to contrast against
            }
            let xb = x.select(Axis(0), batch);
            let yb = y_owned.select(Axis(0), batch);
            let (z1, a1, decoded) = model.forward(xb.view());
            let (loss, grad_q, _) = infonce_with_grads(decoded.view(), yb.view(), cfg.tau)
                .map_err(|e| match e {
                    Error::Numerics(msg) => {
                        Error::TrainingDiverged(format!("epoch {epoch}: {msg}"))
                    }
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!("epoch {epoch}: loss {loss}")));
            }
            let grads = model.backward(xb.view(), &z1, &a1, &grad_q);
            adam.step(
                &mut [
                    model.w1.as_slice_mut().expect("contiguous w1"),
                    model.b1.as_slice_mut().expect("contiguous b1"),
                    model.w2.as_slice_mut().expect("contiguous w2"),
                    model.b2.as_slice_mut().expect("contiguous b2"),
                ],
                &[
                    grads.w1.as_slice().expect("contiguous gw1"),
                    grads.b1.as_slice().expect("contiguous gb1"),
                    grads.w2.as_slice().expect("contiguous gw2"),
                    grads.b2.as_slice().expect("contiguous gb2"),
                ],
            );
            loss_sum += loss * batch.len() as f64;
            rows_seen += batch.len();
        }
        if rows_seen == 0 {
            return Err(Error::InvalidArgument("no usable batches".into()));
        }
        record.epoch_losses.push(loss_sum / rows_seen as f64);
    }
    Ok((model, record))
}
