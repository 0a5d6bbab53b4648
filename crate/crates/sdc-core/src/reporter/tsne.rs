//! Exact t-SNE for small point sets.
//!
//! This is the classic O(m^2) algorithm, suitable for the few hundred points
//! the report stage embeds: per-point Gaussian bandwidths found by binary
//! search against a target perplexity, symmetrized input affinities, a
//! Student-t low-dimensional kernel, and momentum gradient descent with an
//! early exaggeration phase (factor 12 for the first 250 iterations,
//! momentum 0.5 switching to 0.8 at 250, learning rate 200).
//!
//! The bandwidth search is best effort: rows whose neighborhood cannot reach
//! the target perplexity (ties, tiny m) keep the last bracketed bandwidth.
//! Only a row at distance zero from every other point is fatal, since no
//! bandwidth gives it a usable neighborhood.
//!
//! Initial coordinates are drawn per point from an RNG keyed either by row
//! index (default) or by the row's content hash; the latter makes layouts
//! equivariant to row permutation, which is how the property is tested.

use crate::error::{Error, Result};
use crate::seeds;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const TSNE_LR: f64 = 200.0;
pub const TSNE_EXAGGERATION: f64 = 12.0;
pub const TSNE_EXAGGERATION_ITERS: usize = 250;
pub const TSNE_MOMENTUM_EARLY: f64 = 0.5;
pub const TSNE_MOMENTUM_LATE: f64 = 0.8;
const BANDWIDTH_SEARCH_ITERS: usize = 50;
const BANDWIDTH_TOL: f64 = 1e-5;
const INIT_STD: f64 = 1e-2;
// per-parameter gain schedule; the fixed learning rate is only stable with it
const GAIN_UP: f64 = 0.2;
const GAIN_DOWN: f64 = 0.8;
const GAIN_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneRngMode {
    /// Each point's init stream is keyed by its row index.
    RowIndex,
    /// Keyed by a hash of the row's bits: permutation-equivariant.
    ContentHash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub rng_mode: TsneRngMode,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 30.0, iterations: 1000, seed: 0, rng_mode: TsneRngMode::RowIndex }
    }
}

#[derive(Debug, Clone)]
pub struct TsneLayout {
    /// `m x 2` embedding coordinates.
    pub points: Array2<f64>,
    pub perplexity: f64,
    pub iterations: usize,
    /// Divergence against the unexaggerated affinities, after each iteration.
    pub kl_history: Vec<f64>,
    /// Final entry of `kl_history`.
    pub kl: f64,
}

/// Squared Euclidean distances between rows.
fn pairwise_sq(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = x.nrows();
    let mut d = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let diff = &x.row(i) - &x.row(j);
            let v = diff.dot(&diff);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional probabilities and entropy (nats) for one row at inverse
/// bandwidth `beta`, with the self term excluded.
fn row_probs(dist_row: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min_d = dist_row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, d) in dist_row.iter().enumerate() {
        if j == i {
            out[j] = 0.0;
            continue;
        }
        let p = (-beta * (d - min_d)).exp();
        out[j] = p;
        sum += p;
    }
    // entropy of p/sum in nats: ln(sum) + beta * E[d - min_d]
    let mut weighted = 0.0;
    for (j, d) in dist_row.iter().enumerate() {
        if j != i {
            weighted += out[j] * (d - min_d);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if j != i {
            *o /= sum;
        }
    }
    sum.ln() + beta * weighted / sum
}

/// Symmetrized affinity matrix matching the target perplexity per row.
fn affinities(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>> {
    let m = x.nrows();
    let d = pairwise_sq(x);
    let target_h = perplexity.ln();
    let mut cond = Array2::<f64>::zeros((m, m));
    let mut row = vec![0.0; m];
    for i in 0..m {
        let dist_row: Vec<f64> = d.row(i).to_vec();
        if dist_row.iter().enumerate().all(|(j, v)| j == i || *v == 0.0) {
            return Err(Error::DegenerateInput(format!(
                "point {i} is at distance zero from every other point; \
                 no bandwidth can shape its neighborhood"
            )));
        }
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..BANDWIDTH_SEARCH_ITERS {
            let h = row_probs(&dist_row, i, beta, &mut row);
            let diff = h - target_h;
            if diff.abs() < BANDWIDTH_TOL {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() { 0.5 * (beta + beta_max) } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() { 0.5 * (beta + beta_min) } else { beta * 0.5 };
            }
        }
        // best effort: `row` holds the probabilities of the last evaluation
        for j in 0..m {
            cond[[i, j]] = row[j];
        }
    }
    // symmetrize and normalize over all ordered pairs
    let mut p = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                p[[i, j]] = (cond[[i, j]] + cond[[j, i]]) / (2.0 * m as f64);
            }
        }
    }
    Ok(p)
}

fn init_points(x: ArrayView2<'_, f64>, cfg: &TsneConfig) -> Array2<f64> {
    let m = x.nrows();
    let normal = StandardNormal;
    let mut y = Array2::<f64>::zeros((m, 2));
    for i in 0..m {
        let key = match cfg.rng_mode {
            TsneRngMode::RowIndex => seeds::mix(cfg.seed, i as u64),
            TsneRngMode::ContentHash => {
                let mut bytes = Vec::with_capacity(x.ncols() * 8);
                for v in x.row(i) {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                seeds::mix_bytes(cfg.seed, &bytes)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let gx: f64 = normal.sample(&mut rng);
        let gy: f64 = normal.sample(&mut rng);
        y[[i, 0]] = INIT_STD * gx;
        y[[i, 1]] = INIT_STD * gy;
    }
    y
}

/// Embed rows of `x` into the plane.
pub fn tsne(x: ArrayView2<'_, f64>, cfg: &TsneConfig) -> Result<TsneLayout> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::Data(format!("t-sne needs at least two points, got {m}")));
    }
    if !(cfg.perplexity > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} must be positive",
            cfg.perplexity
        )));
    }
    if cfg.perplexity >= m as f64 / 3.0 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} too large for {m} points (needs m >= 3*perplexity)",
            cfg.perplexity
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("t-sne input must be finite".into()));
    }

    let p = affinities(x, cfg.perplexity)?;
    let mut y = init_points(x, cfg);
    let mut vel = Array2::<f64>::zeros((m, 2));
    let mut gains = Array2::<f64>::ones((m, 2));
    let mut kl_history = Vec::with_capacity(cfg.iterations);
    let mut w = Array2::<f64>::zeros((m, m));
    let mut grad = Array2::<f64>::zeros((m, 2));

    for iter in 1..=cfg.iterations {
        // Student-t kernel on current layout
        let mut z = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                w[[i, j]] = v;
                w[[j, i]] = v;
                z += 2.0 * v;
            }
        }

        let exaggeration =
            if iter <= TSNE_EXAGGERATION_ITERS { TSNE_EXAGGERATION } else { 1.0 };
        grad.fill(0.0);
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let q = w[[i, j]] / z;
                let coeff = 4.0 * (exaggeration * p[[i, j]] - q) * w[[i, j]];
                grad[[i, 0]] += coeff * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
        }

        let momentum =
            if iter <= TSNE_EXAGGERATION_ITERS { TSNE_MOMENTUM_EARLY } else { TSNE_MOMENTUM_LATE };
        for i in 0..m {
            for k in 0..2 {
                let g = grad[[i, k]];
                gains[[i, k]] = if (g > 0.0) == (vel[[i, k]] > 0.0) {
                    (gains[[i, k]] * GAIN_DOWN).max(GAIN_MIN)
                } else {
                    gains[[i, k]] + GAIN_UP
                };
                vel[[i, k]] = momentum * vel[[i, k]] - TSNE_LR * gains[[i, k]] * g;
                y[[i, k]] += vel[[i, k]];
            }
        }

        // divergence against the true (unexaggerated) affinities
        let mut z_now = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                w[[i, j]] = v;
                w[[j, i]] = v;
                z_now += 2.0 * v;
            }
        }
        let mut kl = 0.0;
        for i in 0..m {
            for j in 0..m {
                let pij = p[[i, j]];
                if i != j && pij > 0.0 {
                    kl += pij * (pij / (w[[i, j]] / z_now)).ln();
                }
            }
        }
        if !kl.is_finite() {
            return Err(Error::Numerics(format!(
                "t-sne diverged at iteration {iter} (non-finite divergence)"
            )));
        }
        kl_history.push(kl);
    }

    let kl = *kl_history.last().expect("at least one iteration");
    Ok(TsneLayout {
        points: y,
        perplexity: cfg.perplexity,
        iterations: cfg.iterations,
        kl_history,
        kl,
    })
}

/// Mean fraction of each point's `k` nearest layout neighbors sharing its
/// label; the clustering oracle used by tests.
pub fn knn_label_purity(points: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> f64 {
    let m = points.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let mut dist: Vec<(f64, usize)> = (0..m)
            .filter(|j| *j != i)
            .map(|j| {
                let dx = points[[i, 0]] - points[[j, 0]];
                let dy = points[[i, 1]] - points[[j, 1]];
                (dx * dx + dy * dy, j)
            })
            .collect();
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let same = dist.iter().take(k).filter(|(_, j)| labels[*j] == labels[i]).count();
        total += same as f64 / k.min(m - 1) as f64;
    }
    total / m as f64
}
