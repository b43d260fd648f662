use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state: first/second moment accumulators per named parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64) -> OptimState {
        OptimState {
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One Adam update over named parameter maps. Counts as a single step;
    /// parameters without a gradient entry are left untouched.
    pub fn step_map(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step(params.iter_mut().filter_map(|(name, p)| {
            grads.get(name).map(|g| (name.as_str(), p, g))
        }))
    }

    /// One Adam update over `(name, param, grad)` triples. Counts as a
    /// single step; every gradient must be finite.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, param, grad) in params {
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "adam: parameter {name} has shape {:?} but gradient {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            for (mi, gi) in m.data_mut().iter_mut().zip(grad.data()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            }
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            }
            let m = &self.first[name];
            let v = &self.second[name];
            for ((p, mi), vi) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = OptimState::new(1e-3);
        let mut p = Tensor::row_vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(1, 2);
        let before = p.clone();
        state
            .step([("w", &mut p, &g)].into_iter().map(|(n, p, g)| (n, p, g)))
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With constant gradient g, bias correction makes m_hat = g and
        // v_hat = g^2, so the first update is lr * g / (|g| + eps) ~ lr.
        let mut state = OptimState::new(1e-2);
        let mut p = Tensor::row_vector(vec![0.0]);
        let g = Tensor::row_vector(vec![0.3]);
        state.step([("w", &mut p, &g)].into_iter()).unwrap();
        assert!((p.get(0, 0) + 1e-2).abs() < 1e-6, "{}", p.get(0, 0));
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut state = OptimState::new(1e-3);
        let mut p = Tensor::row_vector(vec![1.0]);
        let g = Tensor::row_vector(vec![f64::NAN]);
        let err = state.step([("w", &mut p, &g)].into_iter()).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn quadratic_descent_is_monotone_after_warmup() {
        // f(w) = |w|^2, grad = 2w.
        let mut state = OptimState::new(1e-2);
        let mut w = Tensor::row_vector(vec![1.0, 1.0]);
        let mut norms = Vec::new();
        for _ in 0..200 {
            let g = w.map(|x| 2.0 * x);
            state.step([("w", &mut w, &g)].into_iter()).unwrap();
            norms.push(w.frobenius_sq().sqrt());
        }
        for pair in norms[10..].windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
        assert!(norms.last().unwrap() < &1.0);
    }
}
