use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Bias-corrected ADAM update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        for g in [0.3, -7.0, 1e-3] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1, cfg);
            adam_step(&mut p, &[g], &mut s).unwrap();
            // m_hat = g, v_hat = g^2 after bias correction.
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] + cfg.lr * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        // With lr = 1e-3 each step moves at most ~1e-3, so starting at 5 the
        // run uses lr = 0.1.
        let mut s = AdamState::new(1, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut x = vec![5.0];
        let mut reached = None;
        for step in 0..2000 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut s).unwrap();
            if x[0].abs() < 1e-2 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());
        assert!(x[0].abs() < 1e-2, "ended at {}", x[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s).is_err());
    }
}
