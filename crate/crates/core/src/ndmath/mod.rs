//! Minimal dense numerics: matrices, a fixed set of differentiable layers,
//! AdamW, and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use gradcheck::grad_check;
pub use layers::{
    linear_backward, linear_forward, mse_loss, relu, relu_backward, row_sq_errors, Linear,
    LinearGrads, Mlp, MlpCache,
};
pub use matrix::{dot, sq_dist, Matrix};
pub use optim::{adamw_step, AdamW, AdamWConfig, AdamWState};

/// Floating-point element type. `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Concatenates matrices into one flat `f64` vector (for gradient checks).
pub fn flatten<T: Real>(mats: &[&Matrix<T>]) -> Vec<f64> {
    mats.iter().flat_map(|m| m.data().iter().map(|v| v.as_f64())).collect()
}

/// Inverse of [`flatten`]: writes consecutive values into each matrix in turn.
pub fn unflatten_into<T: Real>(values: &[f64], mats: &mut [&mut Matrix<T>]) {
    let mut off = 0;
    for m in mats.iter_mut() {
        for v in m.data_mut() {
            *v = T::lit(values[off]);
            off += 1;
        }
    }
    debug_assert_eq!(off, values.len());
}
