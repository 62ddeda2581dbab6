//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup/linear-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// One AdamW update. `decay[i]` says whether parameter `i` is weight-decayed.
/// Parameters without a gradient (`None`) are left untouched, moments
/// included. `step` is only used to name the offending step in errors.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Vec<f64>>],
    decay: &[bool],
    state: &mut OptimizerState,
    hp: &AdamW,
    lr: f64,
    step: u64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(TrainError::Optimizer(format!(
            "{} parameters, {} gradients, {} moment slots, {} decay flags",
            params.len(),
            grads.len(),
            state.m.len(),
            decay.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(TrainError::Optimizer(format!("parameter {i}: shape mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let shrink = if decay[i] { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = g[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            *w = *w * shrink - lr * update;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of
/// `total_steps`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (w, total) = (self.warmup_steps(), self.total_steps);
        if step >= total {
            0.0
        } else if step < w {
            self.peak * step as f64 / w as f64
        } else {
            self.peak * (total - step) as f64 / (total - w) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_vertices() {
        let s = Schedule { peak: 4e-4, warmup_fraction: 0.1, total_steps: 1000 };
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert_eq!(s.lr(0), 0.0);
        assert!(close(s.lr(100), 4e-4));
        assert_eq!(s.lr(1000), 0.0);
        assert!(close(s.lr(50), 2e-4));
        assert!(close(s.lr(550), 2e-4));
        let flat = Schedule { peak: 1.0, warmup_fraction: 0.0, total_steps: 4 };
        assert_eq!((flat.lr(0), flat.lr(2)), (1.0, 0.5));
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!(g[1].is_none());
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], Some(vec![0.1]));
    }
}
