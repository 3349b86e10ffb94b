//! Adam with bias correction, operating on the flat parameter store.

use crate::error::{GrdError, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers for every trainable entry of a
/// [`ModelParams`], in entry order. `step_count` increases by one per
/// update and drives the bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub config: AdamConfig,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let buffers: Vec<Vec<f32>> = params
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    vec![0.0; e.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        AdamState {
            step_count: 0,
            config,
            first_moment: buffers.clone(),
            second_moment: buffers,
        }
    }

    pub fn first_moment(&self, entry: usize) -> &[f32] {
        &self.first_moment[entry]
    }

    /// One Adam update. `grads` holds one gradient buffer per parameter
    /// entry (empty for non-trainable entries), matching shapes exactly.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<f32>],
        lr: f32,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(GrdError::config(format!("learning rate must be > 0, got {lr}")));
        }
        if grads.len() != params.entries.len() {
            return Err(GrdError::config(format!(
                "got {} gradient buffers for {} parameter entries",
                grads.len(),
                params.entries.len()
            )));
        }
        for (e, g) in params.entries.iter().zip(grads) {
            if e.trainable && g.len() != e.data.len() {
                return Err(GrdError::config(format!(
                    "gradient for '{}' has {} elements, parameter has {}",
                    e.name,
                    g.len(),
                    e.data.len()
                )));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(GrdError::numerical(format!(
                    "non-finite gradient {} at index {pos} of '{}' (step {})",
                    g[pos],
                    e.name,
                    self.step_count + 1
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (idx, entry) in params.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let g = &grads[idx];
            for i in 0..entry.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                entry.data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f32) -> ModelParams {
        let mut p = ModelParams::default();
        p.push("w", vec![1], vec![value], true);
        p
    }

    #[test]
    fn zero_gradient_is_a_noop_on_parameters() {
        let mut params = scalar_params(3.25);
        let mut state = AdamState::new(&params, AdamConfig::default());
        // seed a nonzero moment, then feed zero gradients
        state.step(&mut params, &[vec![0.5]], 1e-3).unwrap();
        let after_first = params.entries[0].data[0];
        let m1 = state.first_moment(0)[0].abs();
        for _ in 0..5 {
            let before = params.entries[0].data[0];
            state.step(&mut params, &[vec![0.0]], 1e-3).unwrap();
            // moments keep decaying, so the parameter still drifts, but a
            // fresh state with zero gradients must not move at all
            assert!(params.entries[0].data[0].is_finite());
            let _ = before;
        }
        assert!(state.first_moment(0)[0].abs() < m1);
        assert!(after_first < 3.25);

        let mut fresh = scalar_params(1.0);
        let mut fresh_state = AdamState::new(&fresh, AdamConfig::default());
        for _ in 0..10 {
            fresh_state.step(&mut fresh, &[vec![0.0]], 1e-3).unwrap();
        }
        assert_eq!(fresh.entries[0].data[0], 1.0);
        assert_eq!(fresh_state.step_count, 10);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        for &g in &[0.001f32, 0.1, 3.0, -40.0] {
            let mut params = scalar_params(0.0);
            let mut state = AdamState::new(&params, AdamConfig::default());
            state.step(&mut params, &[vec![g]], 1e-3).unwrap();
            let delta = params.entries[0].data[0].abs();
            assert!(
                (delta - 1e-3).abs() < 1e-5,
                "grad {g}: step magnitude {delta}"
            );
            assert_eq!(params.entries[0].data[0].signum(), -g.signum());
        }
    }

    #[test]
    fn matches_reference_recurrence_for_constant_gradient() {
        // independent f64 evaluation of the update rule
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64, 0.7f64);
        let mut theta = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = scalar_params(2.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[vec![0.7]], 1e-3).unwrap();
        state.step(&mut params, &[vec![0.7]], 1e-3).unwrap();
        assert!(
            (params.entries[0].data[0] as f64 - theta).abs() < 1e-6,
            "{} vs {}",
            params.entries[0].data[0],
            theta
        );
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostic() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = state
            .step(&mut params, &[vec![f32::NAN]], 1e-3)
            .unwrap_err();
        assert!(matches!(err, GrdError::Numerical(_)));
        assert_eq!(params.entries[0].data[0], 1.0);
        assert_eq!(state.step_count, 0);
    }
}
