use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch normalization of a single scalar feature, without affine parameters.
///
/// Variances use the population convention (divide by the batch size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarBatchNorm {
    pub running_mean: f64,
    pub running_var: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for ScalarBatchNorm {
    fn default() -> Self {
        Self {
            running_mean: 0.0,
            running_var: 1.0,
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }
}

/// Mean and population variance of one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub var: f64,
}

impl BatchStats {
    pub fn of(x: &[f64]) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::Numeric(format!(
                "batch normalization needs at least 2 samples in training mode, got {}",
                x.len()
            )));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, var })
    }
}

impl ScalarBatchNorm {
    pub fn with_momentum(momentum: f64) -> Self {
        Self {
            momentum,
            ..Self::default()
        }
    }

    /// Training-mode normalization with batch statistics. Pure: running
    /// statistics are not touched.
    pub fn normalize_batch(&self, x: &[f64]) -> Result<(Vec<f64>, BatchStats)> {
        let stats = BatchStats::of(x)?;
        let inv = 1.0 / (stats.var + self.epsilon).sqrt();
        Ok((x.iter().map(|v| (v - stats.mean) * inv).collect(), stats))
    }

    /// Eval-mode normalization with the running statistics.
    pub fn normalize_running(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (self.running_var + self.epsilon).sqrt();
        x.iter().map(|v| (v - self.running_mean) * inv).collect()
    }

    pub fn update_running(&mut self, stats: BatchStats) {
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * stats.mean;
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * stats.var;
    }
}

/// Normalizes `x`; in training mode the batch statistics are used and folded
/// into the running averages, in eval mode the running averages are used as is.
pub fn scalar_bn(x: &[f64], bn: &mut ScalarBatchNorm, training: bool) -> Result<Vec<f64>> {
    if training {
        let (y, stats) = bn.normalize_batch(x)?;
        bn.update_running(stats);
        Ok(y)
    } else {
        Ok(bn.normalize_running(x))
    }
}

/// Gradient through training-mode normalization, given the normalized output
/// and the batch variance.
pub fn scalar_bn_backward(normalized: &[f64], var: f64, epsilon: f64, upstream: &[f64]) -> Vec<f64> {
    let n = normalized.len() as f64;
    let inv = 1.0 / (var + epsilon).sqrt();
    let mean_g = upstream.iter().sum::<f64>() / n;
    let mean_gx = upstream
        .iter()
        .zip(normalized)
        .map(|(g, x)| g * x)
        .sum::<f64>()
        / n;
    upstream
        .iter()
        .zip(normalized)
        .map(|(g, x)| inv * (g - mean_g - x * mean_gx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_batch() {
        let mut bn = ScalarBatchNorm::default();
        let y = scalar_bn(&[1.0, 3.0], &mut bn, true).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-5);
        assert!((y[1] - 1.0).abs() < 1e-5);
        assert!((bn.running_mean - 0.02).abs() < 1e-12);
    }

    #[test]
    fn constant_batch_is_centered() {
        let mut bn = ScalarBatchNorm::default();
        let y = scalar_bn(&[5.0, 5.0, 5.0], &mut bn, true).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_uses_running_stats_unchanged() {
        let mut bn = ScalarBatchNorm {
            running_mean: 2.0,
            running_var: 1.0,
            ..Default::default()
        };
        let before = bn;
        let y = scalar_bn(&[2.0], &mut bn, false).unwrap();
        assert_eq!(y, vec![0.0]);
        assert_eq!(bn, before);
    }

    #[test]
    fn single_sample_training_batch_is_rejected() {
        let mut bn = ScalarBatchNorm::default();
        assert!(scalar_bn(&[1.0], &mut bn, true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = [0.3, 1.7, -0.4, 2.2, 0.9];
        let w = [0.5, -1.0, 2.0, 0.25, 1.5];
        let bn = ScalarBatchNorm::default();
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = bn.normalize_batch(x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b * a + b * a).sum()
        };
        let (y, stats) = bn.normalize_batch(&x).unwrap();
        let upstream: Vec<f64> = y.iter().zip(&w).map(|(a, b)| 2.0 * a * b + b).collect();
        let analytic = scalar_bn_backward(&y, stats.var, bn.epsilon, &upstream);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let numeric = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-6, "{i}: {numeric} vs {}", analytic[i]);
        }
    }

    proptest! {
        #[test]
        fn training_output_is_standardized(x in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
            let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1.0);
            let bn = ScalarBatchNorm::default();
            let (y, stats) = bn.normalize_batch(&x).unwrap();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let expected = stats.var / (stats.var + bn.epsilon);
            prop_assert!((var - expected).abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
