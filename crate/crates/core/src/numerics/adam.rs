use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one set of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Matrix], config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::dim(
                "adam_step (tensor count)",
                (params.len(), grads.len()),
                (self.first_moment.len(), 0),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam_step (grad)", p.shape(), g.shape()));
            }
            if p.shape() != m.shape() {
                return Err(Error::dim("adam_step (state)", p.shape(), m.shape()));
            }
        }

        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Matrix::filled(2, 3, 0.7)];
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[Matrix::zeros(2, 3)]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Matrix::scalar(1.0)];
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&params, cfg);
        state.step(&mut params, &[Matrix::scalar(1.0)]).unwrap();
        let moved = 1.0 - params[0].item().unwrap();
        assert!((moved - cfg.lr / (1.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = state.step(&mut params, &[Matrix::zeros(2, 3)]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert_eq!(state.step_count, 0);
        assert!(state.step(&mut params, &[]).is_err());
    }

    /// Ten steps on f(w) = w² against a hand-unrolled Adam recurrence.
    #[test]
    fn matches_scripted_reference_on_quadratic() {
        let cfg = AdamConfig::default();
        let mut params = vec![Matrix::scalar(1.0)];
        let mut state = AdamState::new(&params, cfg);

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 1e-4 * mh / (vh.sqrt() + 1e-8);

            let grad = Matrix::scalar(2.0 * params[0].item().unwrap());
            state.step(&mut params, &[grad]).unwrap();
        }
        assert!((params[0].item().unwrap() - w).abs() < 1e-12);
        assert_eq!(state.step_count, 10);
    }
}
