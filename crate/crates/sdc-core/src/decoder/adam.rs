//! Adam with bias correction, operating on flat parameter slots so one
//! optimizer instance drives tensors of mixed shapes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams, slot_sizes: &[usize]) -> Self {
        Self {
            params,
            t: 0,
            m: slot_sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: slot_sizes.iter().map(|s| vec![0.0; *s]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update across all slots. `thetas[s]` and `grads[s]` must have the
    /// slot size given at construction.
    pub fn step(&mut self, thetas: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(thetas.len(), self.m.len(), "slot count mismatch");
        assert_eq!(grads.len(), self.m.len(), "grad slot count mismatch");
        self.t += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for s in 0..self.m.len() {
            let (m, v) = (&mut self.m[s], &mut self.v[s]);
            let theta = &mut *thetas[s];
            let g = grads[s];
            assert_eq!(theta.len(), m.len(), "slot {s} size mismatch");
            assert_eq!(g.len(), m.len(), "slot {s} grad size mismatch");
            for i in 0..m.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_bias_corrected_closed_form() {
        // From zero moments, step 1 reduces to theta -= lr * g / (|g| + eps).
        let p = AdamParams::with_lr(0.01);
        let mut adam = Adam::new(p, &[3]);
        let mut theta = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -0.1, 0.0];
        let expect: Vec<f64> = theta
            .iter()
            .zip(&g)
            .map(|(t, gi)| t - p.lr * gi / (gi.abs() + p.eps))
            .collect();
        adam.step(&mut [&mut theta], &[&g]);
        for i in 0..3 {
            assert!((theta[i] - expect[i]).abs() < 1e-15, "component {i}");
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new(AdamParams::with_lr(0.05), &[1]);
        let mut x = vec![3.0];
        for _ in 0..400 {
            let g = vec![2.0 * x[0]];
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);
    }
}
