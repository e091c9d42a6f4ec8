//! Dense numerical kernel for the fixed auto-encoder architecture.
//!
//! Everything here is hand-differentiated: each forward kernel has a matching
//! backward kernel, and [`gradcheck`] verifies them against central finite
//! differences. Matrices are row-major `ndarray` arrays of `f64`; a batch of
//! users is always laid out one user per row.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layer;
mod norm;
mod params;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, BlockError, GradCheckConfig, GradCheckReport};
pub use layer::DenseLayer;
pub use norm::{scalar_bn, scalar_bn_backward, BatchStats, ScalarBatchNorm};
pub use params::{BlockId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Computes `act(input · weight + bias)`.
pub fn affine_forward(
    input: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    if input.ncols() != weight.nrows() {
        return Err(Error::dimension(
            "affine input width",
            weight.nrows(),
            input.ncols(),
        ));
    }
    if bias.len() != weight.ncols() {
        return Err(Error::dimension(
            "affine bias length",
            weight.ncols(),
            bias.len(),
        ));
    }
    let mut out = input.dot(&weight);
    out += &bias;
    if activation != Activation::Identity {
        out.mapv_inplace(|x| activation.apply(x));
    }
    Ok(out)
}

/// Gradients produced by [`affine_backward`].
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

/// Upstream gradient with respect to the pre-activation.
pub fn preactivation_grad(
    output: ArrayView2<f64>,
    activation: Activation,
    upstream: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if output.dim() != upstream.dim() {
        return Err(Error::dimension(
            "affine upstream gradient",
            format!("{:?}", output.dim()),
            format!("{:?}", upstream.dim()),
        ));
    }
    Ok(match activation {
        Activation::Identity => upstream.to_owned(),
        Activation::Sigmoid => {
            let mut g = upstream.to_owned();
            Zip::from(&mut g)
                .and(&output)
                .for_each(|g, &y| *g *= activation.derivative_from_output(y));
            g
        }
    })
}

/// Backward pass of [`affine_forward`] given the cached input and output.
pub fn affine_backward(
    input: ArrayView2<f64>,
    output: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    activation: Activation,
    upstream: ArrayView2<f64>,
) -> Result<AffineGrads> {
    let pre = preactivation_grad(output, activation, upstream)?;
    Ok(AffineGrads {
        weight: input.t().dot(&pre),
        bias: pre.sum_axis(Axis(0)),
        input: pre.dot(&weight.t()),
    })
}

/// Input gradient only, for layers whose parameters are frozen.
pub fn affine_backward_input(
    output: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    activation: Activation,
    upstream: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let pre = preactivation_grad(output, activation, upstream)?;
    Ok(pre.dot(&weight.t()))
}

/// First layer over sparse binary rows: a gather-sum of the weight rows of the
/// active items, optionally scaled per row, plus bias.
pub fn sparse_affine_forward(
    rows: &[&[usize]],
    scales: Option<&[f64]>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    let width = weight.ncols();
    if bias.len() != width {
        return Err(Error::dimension("sparse affine bias length", width, bias.len()));
    }
    if let Some(s) = scales {
        if s.len() != rows.len() {
            return Err(Error::dimension("sparse affine scales", rows.len(), s.len()));
        }
    }
    let mut out = Array2::zeros((rows.len(), width));
    for (u, (items, mut out_row)) in rows.iter().zip(out.rows_mut()).enumerate() {
        for &j in items.iter() {
            if j >= weight.nrows() {
                return Err(Error::dimension(
                    "sparse affine item index",
                    format!("< {}", weight.nrows()),
                    j,
                ));
            }
            out_row += &weight.row(j);
        }
        if let Some(s) = scales {
            out_row *= s[u];
        }
        out_row += &bias;
        if activation != Activation::Identity {
            out_row.mapv_inplace(|x| activation.apply(x));
        }
    }
    Ok(out)
}

/// Accumulates the parameter gradients of [`sparse_affine_forward`]; only the
/// weight rows of active items are touched.
pub fn sparse_affine_backward(
    rows: &[&[usize]],
    scales: Option<&[f64]>,
    output: ArrayView2<f64>,
    activation: Activation,
    upstream: ArrayView2<f64>,
    grad_weight: &mut Array2<f64>,
    grad_bias: &mut Array1<f64>,
) -> Result<()> {
    let pre = preactivation_grad(output, activation, upstream)?;
    for (u, (items, g)) in rows.iter().zip(pre.rows()).enumerate() {
        *grad_bias += &g;
        let scale = scales.map_or(1.0, |s| s[u]);
        for &j in items.iter() {
            grad_weight.row_mut(j).scaled_add(scale, &g);
        }
    }
    Ok(())
}

/// Row-wise log-softmax, stabilized by subtracting the row maximum.
pub fn softmax_logprob(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits in softmax".into()));
    }
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    Ok(out)
}

/// Squared Frobenius norm.
pub fn sq_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}
