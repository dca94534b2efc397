//! Adam with bias correction, operating on named parameter sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers and the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: usize,
    moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn buffers(&mut self, name: &str, len: usize) -> &mut (String, Vec<f32>, Vec<f32>) {
        if let Some(i) = self.moments.iter().position(|(n, _, _)| n == name) {
            return &mut self.moments[i];
        }
        self.moments
            .push((name.to_string(), vec![0.0; len], vec![0.0; len]));
        self.moments.last_mut().unwrap()
    }
}

/// One Adam update over every trainable parameter in `params`. `grads`
/// pairs parameter names with gradient tensors; shapes must mirror the
/// parameters, and every gradient must be finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(String, Tensor<f32>)],
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, grad) in grads {
        let value = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("adam_step on unknown parameter {name}")))?;
        if grad.shape() != value.shape() {
            return Err(Error::Dim(format!(
                "gradient shape {:?} vs parameter {name} {:?}",
                grad.shape(),
                value.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Training {
                step,
                name: name.clone(),
                msg: "non-finite gradient".into(),
            });
        }
        let (_, m, v) = state.buffers(name, grad.len());
        let g = grad.data();
        params.update(name, |t| {
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v), true);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias corrections cancel on step 1: update is ~lr for unit grad.
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new();
        let g = vec![("x".to_string(), Tensor::scalar(1.0f32))];
        adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        let x = p.get("x").unwrap().item();
        assert!((x + 1e-3).abs() < 1e-8, "x = {x}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_set(0.7);
        let mut st = AdamState::new();
        let g = vec![("x".to_string(), Tensor::scalar(0.0f32))];
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 0.7);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Reference run: 200 steps on (x-3)^2 from 0 with lr 0.1.
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new();
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            let g = vec![("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)))];
            adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        let x = p.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 0.1, "x = {x}");
    }

    #[test]
    fn non_finite_gradient_names_step_and_parameter() {
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new();
        let g = vec![("x".to_string(), Tensor::scalar(1.0f32))];
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        // Bypass the Tensor constructor's finiteness check to simulate a
        // numeric blow-up in a gradient buffer.
        let mut bad = Tensor::scalar(1.0f32);
        bad.data_mut()[0] = f32::NAN;
        let g = vec![("x".to_string(), bad)];
        match adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()) {
            Err(Error::Training { step, name, .. }) => {
                assert_eq!(step, 2);
                assert_eq!(name, "x");
            }
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
