use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{affine_backward, affine_forward, Activation};
use crate::error::{Error, Result};

/// A stateful dense layer `act(h·W + b)` with gradient accumulators.
///
/// `forward` caches its input and output; `backward` consumes the cache and
/// adds into `grad_weight` / `grad_bias` until [`DenseLayer::zero_grad`].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    pub activation: Activation,
    cache: Option<(Array2<f64>, Array2<f64>)>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self::from_params(Array2::zeros((input, output)), Array1::zeros(output), activation)
    }

    pub fn from_params(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Self {
        Self {
            grad_weight: Array2::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(bias.raw_dim()),
            weight,
            bias,
            activation,
            cache: None,
        }
    }

    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array2::from_shape_simple_fn((input, output), || normal.sample(rng));
        Self::from_params(weight, Array1::zeros(output), activation)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&mut self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = affine_forward(h, self.weight.view(), self.bias.view(), self.activation)?;
        self.cache = Some((h.to_owned(), out.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (input, output) = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called before forward".into()))?;
        let grads = affine_backward(
            input.view(),
            output.view(),
            self.weight.view(),
            self.activation,
            upstream,
        )?;
        self.grad_weight += &grads.weight;
        self.grad_bias += &grads.bias;
        Ok(grads.input)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}
