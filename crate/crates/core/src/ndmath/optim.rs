//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Optimizer state for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    m: Matrix<T>,
    v: Matrix<T>,
    step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(shape: (usize, usize), config: AdamWConfig) -> Self {
        Self {
            config,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix<T>, config: AdamWConfig) -> Self {
        Self::new(param.shape(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clears both moments of one row, e.g. after a codebook entry is re-seeded.
    pub fn reset_row(&mut self, r: usize) {
        self.m.row_mut(r).fill(T::zero());
        self.v.row_mut(r).fill(T::zero());
    }
}

pub fn adamw_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut AdamWState<T>,
) -> Result<()> {
    param.ensure_same_shape("adamw_step", grad)?;
    if state.m.shape() != param.shape() {
        return Err(Error::Dimension {
            op: "adamw_step(state)",
            left: state.m.shape(),
            right: param.shape(),
        });
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr = T::lit(c.lr);
    let decay = T::lit(1.0 - c.lr * c.weight_decay);
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let eps = T::lit(c.eps);
    let one = T::one();
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        if c.weight_decay != 0.0 {
            p[i] *= decay;
        }
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// One [`AdamWState`] per parameter of a model, kept in parameter order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub states: Vec<AdamWState<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[&Matrix<T>], configs: impl Fn(usize) -> AdamWConfig) -> Self {
        Self {
            states: params
                .iter()
                .enumerate()
                .map(|(i, p)| AdamWState::for_param(p, configs(i)))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.states.len() {
            return Err(Error::invalid(format!(
                "optimizer has {} states, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adamw_step(p, g, s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Matrix::<f64>::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamWState::for_param(&p, AdamWConfig::default().with_lr(0.1));
        for _ in 0..5 {
            adamw_step(&mut p, &Matrix::zeros(1, 3), &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_hand_trace() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g| + ε).
        let mut p = Matrix::<f64>::from_f64(1, 1, &[1.0]).unwrap();
        let mut s = AdamWState::for_param(&p, AdamWConfig::default().with_lr(0.1));
        adamw_step(&mut p, &Matrix::from_f64(1, 1, &[1.0]).unwrap(), &mut s).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks_param() {
        let mut p = Matrix::<f64>::from_f64(1, 2, &[2.0, -4.0]).unwrap();
        let cfg = AdamWConfig::default().with_lr(0.1).with_weight_decay(0.5);
        let mut s = AdamWState::for_param(&p, cfg);
        adamw_step(&mut p, &Matrix::zeros(1, 2), &mut s).unwrap();
        assert!((p.get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
        assert!((p.get(0, 1) - (-4.0 + 0.1 * 0.5 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Matrix::<f32>::zeros(1, 2);
        let mut s = AdamWState::for_param(&p, AdamWConfig::default());
        assert!(adamw_step(&mut p, &Matrix::zeros(2, 1), &mut s).is_err());
        let mut s = AdamWState::new((3, 3), AdamWConfig::default());
        assert!(adamw_step(&mut p, &Matrix::zeros(1, 2), &mut s).is_err());
    }
}
