//! The fixed set of differentiable layers used by the models: affine maps,
//! ReLU, squared-error loss, and MLP stacks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// `y = xW + b`, with `b` broadcast over the rows of `x`.
pub fn linear_forward<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::Dimension {
            op: "linear_forward(bias)",
            left: b.shape(),
            right: (1, w.cols()),
        });
    }
    let mut y = x.matmul(w)?;
    let bias = b.data();
    for r in 0..y.rows() {
        for (v, &bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub x: Matrix<T>,
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

pub fn linear_backward<T: Real>(
    grad_y: &Matrix<T>,
    x: &Matrix<T>,
    w: &Matrix<T>,
) -> Result<LinearGrads<T>> {
    grad_y.ensure_shape("linear_backward", (x.rows(), w.cols()))?;
    if x.cols() != w.rows() {
        return Err(Error::Dimension {
            op: "linear_backward",
            left: x.shape(),
            right: w.shape(),
        });
    }
    Ok(LinearGrads {
        x: grad_y.matmul_t(w)?,
        weight: x.t_matmul(grad_y)?,
        bias: grad_y.column_sum(),
    })
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at 0 is taken as 0.
pub fn relu_backward<T: Real>(grad_y: &Matrix<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    grad_y.ensure_same_shape("relu_backward", x)?;
    let data = grad_y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// Mean over rows of the squared L2 distance, and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Real>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    pred.ensure_same_shape("mse_loss", target)?;
    let n = T::lit(pred.rows().max(1) as f64);
    let diff = pred.sub(target)?;
    let loss = diff.sq_norm() / n;
    let grad = diff.scaled(T::lit(2.0) / n);
    Ok((loss, grad))
}

/// Per-row squared L2 distance.
pub fn row_sq_errors<T: Real>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<Vec<T>> {
    pred.ensure_same_shape("row_sq_errors", target)?;
    Ok((0..pred.rows())
        .map(|r| super::sq_dist(pred.row(r), target.row(r)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    /// Gaussian init with variance `gain / fan_in`; zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            weight: Matrix::new(input, output, data).expect("sized"),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        linear_forward(x, &self.weight, &self.bias)
    }
}

/// Multi-layer perceptron: affine layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Linear<T>>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    pre_activations: Vec<Matrix<T>>,
}

impl<T: Real> Mlp<T> {
    /// `sizes` lists every width from input to output, e.g. `[64, 256, 16]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad MLP sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 1 < n { 2.0 } else { 1.0 };
                Linear::new(w[0], w[1], gain, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if i < last { relu(&pre) } else { pre.clone() };
            cache.pre_activations.push(pre);
        }
        Ok((h, cache))
    }

    /// Returns the input gradient and parameter gradients in [`Mlp::params`] order.
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        grad_out: &Matrix<T>,
    ) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
        let n = self.layers.len();
        let mut grads: Vec<Matrix<T>> = Vec::with_capacity(2 * n);
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            if i < n - 1 {
                g = relu_backward(&g, &cache.pre_activations[i])?;
            }
            let lg = linear_backward(&g, &cache.inputs[i], &self.layers[i].weight)?;
            grads.push(lg.bias);
            grads.push(lg.weight);
            g = lg.x;
        }
        grads.reverse();
        Ok((g, grads))
    }

    /// Parameters as `[w0, b0, w1, b1, …]`.
    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}
