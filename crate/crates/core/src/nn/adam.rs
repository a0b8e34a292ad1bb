use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Initial learning rate of every stage.
pub const ADAM_LR: f64 = 5e-4;
/// Per-epoch learning-rate multiplier.
pub const LR_DECAY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new() }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(ADAM_LR)
    }
}

/// One bias-corrected Adam update. Moment buffers are allocated on the first
/// call and must keep matching the parameter shapes afterwards.
pub fn adam_step(params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(invalid("gradient shapes do not match parameters"));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(invalid("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Halves the learning rate; applied after every epoch.
pub fn lr_decay(mut state: AdamState) -> AdamState {
    state.lr *= LR_DECAY;
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::default();
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        let mut p = vec![0.5];
        let g = 0.2;
        let mut s = AdamState::new(5e-4);
        adam_step(&mut [&mut p], &[vec![g]], &mut s).unwrap();
        // m = 0.1 g, v = 0.001 g²; bias corrected m̂ = g, v̂ = g²
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let want = 0.5 - 5e-4 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!(((0.5 - p[0]) - 5e-4).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.3, 0.1, -0.7];
            let mut s = AdamState::default();
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0).sin()).collect();
                adam_step(&mut [&mut p], &[g], &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::default();
        assert!(adam_step(&mut [&mut p], &[vec![0.0; 2]], &mut s).is_err());
        adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut s).unwrap();
        let mut q = vec![0.0; 4];
        assert!(adam_step(&mut [&mut q], &[vec![0.0; 4]], &mut s).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let mut s = AdamState::default();
        s = lr_decay(s);
        assert_eq!(s.lr, 2.5e-4);
        for k in 2..40 {
            s = lr_decay(s);
            assert!((s.lr - 5e-4 * 0.5f64.powi(k)).abs() <= 1e-18);
            assert!(s.lr > 0.0);
        }
    }
}
