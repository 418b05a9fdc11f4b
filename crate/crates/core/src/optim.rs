use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 6.25e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new(params: &ParamStore, hyper: AdamWHyper) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper,
        }
    }

    /// Zero the moments of selected rows of parameter `index` (used when
    /// codebook rows are re-seeded).
    pub fn reset_rows(&mut self, index: usize, rows: &[usize]) {
        for t in [&mut self.m[index], &mut self.v[index]] {
            let c = t.cols();
            for &r in rows {
                t.data_mut()[r * c..(r + 1) * c].fill(0.0);
            }
        }
    }
}

/// One decoupled-weight-decay Adam step at learning rate `lr`:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1−β1)·g,   v ← β2·v + (1−β2)·g²
/// p ← p − lr · m̂ / (√v̂ + ε),  m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ)
/// ```
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((id, _, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() || state.m[id.index()].shape() != p.shape() {
            return Err(shape_err(
                "adamw_step",
                format!("{}: param {:?} grad {:?}", params.name(id), p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            p[j] -= lr * h.weight_decay * p[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Linear warmup over `warmup_frac` of `total` steps, then cosine to zero.
pub fn warmup_cosine(base_lr: f64, step: u64, total: u64, warmup_frac: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * warmup_frac).round() as u64;
    if step < warm {
        return base_lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(w));
        p
    }

    fn hyper(wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = single(1.0);
        let mut s = AdamWState::new(&p, hyper(0.0));
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.1).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(crate::params::ParamId(0)).item() - want).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_only_step() {
        let mut p = single(1.0);
        let mut s = AdamWState::new(&p, hyper(0.04));
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert!((p.get(crate::params::ParamId(0)).item() - 0.996).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_iteration() {
        let (lr, b1, b2, eps, wd, g) = (0.1, 0.9, 0.999, 1e-8, 0.01, 0.5);
        let mut w = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            w -= lr * wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = single(2.0);
        let mut s = AdamWState::new(&p, hyper(wd));
        for _ in 0..2 {
            adamw_step(&mut p, &[Tensor::scalar(g)], &mut s, lr).unwrap();
        }
        assert!((p.get(crate::params::ParamId(0)).item() - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut s = AdamWState::new(&p, hyper(0.0));
        assert!(adamw_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut s, 0.1).is_err());
        assert!(adamw_step(&mut p, &[], &mut s, 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let lr = 1.0;
        assert!((warmup_cosine(lr, 0, 100, 0.1) - 0.1).abs() < 1e-12);
        assert!((warmup_cosine(lr, 9, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!((warmup_cosine(lr, 10, 100, 0.1) - 1.0).abs() < 1e-12);
        assert!(warmup_cosine(lr, 99, 100, 0.1) < 0.01);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let x = warmup_cosine(lr, s, 100, 0.1);
            assert!(x <= prev);
            prev = x;
        }
    }
}
