//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First moments, one buffer per parameter in store order.
    pub m: Vec<Vec<f64>>,
    /// Second moments.
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = ps
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn update(&mut self, ps: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != ps.params().len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                ps.params().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in ps.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((w, g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm of all gradients taken together.
pub fn grad_norm(ps: &ParamStore) -> f64 {
    ps.params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(ps);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for p in ps.params_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}
