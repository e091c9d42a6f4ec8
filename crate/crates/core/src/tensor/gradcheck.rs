//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::params::{BlockId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per block.
    pub max_entries_per_block: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_block: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` over the listed
/// blocks of `params`. Every perturbation is undone before returning.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    analytic: &ParamStore,
    blocks: &[BlockId],
    config: GradCheckConfig,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = Vec::with_capacity(blocks.len());
    for &id in blocks {
        let len = params.get(id).len();
        let stride = match config.max_entries_per_block {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        let mut block = BlockError {
            name: params.name(id).to_string(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for flat in (0..len).step_by(stride) {
            let orig = params.get(id).as_slice().expect("standard layout")[flat];
            params.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + config.step;
            let plus = loss(params);
            params.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - config.step;
            let minus = loss(params);
            params.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.get(id).as_slice().expect("standard layout")[flat];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.floor);
            block.max_abs_error = block.max_abs_error.max(abs);
            block.max_rel_error = block.max_rel_error.max(rel);
            block.checked += 1;
        }
        report.push(block);
    }
    GradCheckReport { blocks: report }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_loss() {
        let mut p = ParamStore::new();
        let id = p.push("p", array![[0.5, -1.5, 2.0], [3.0, 0.0, -0.25]]);
        let analytic = p.clone();
        let before = p.clone();
        let report = finite_diff_check(&mut p, &analytic, &[id], GradCheckConfig::default(), |p| {
            p.get(id).iter().map(|x| 0.5 * x * x).sum()
        });
        assert!(report.passes(1e-6), "{report:?}");
        assert_eq!(report.blocks[0].checked, 6);
        assert_eq!(p, before);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamStore::new();
        let id = p.push("p", array![[1.0, 2.0]]);
        let wrong = ParamStore::new();
        let mut wrong = wrong;
        wrong.push("p", array![[1.0, 3.0]]);
        let report = finite_diff_check(&mut p, &wrong, &[id], GradCheckConfig::default(), |p| {
            p.get(id).iter().map(|x| 0.5 * x * x).sum()
        });
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn subsampling_limits_entries() {
        let mut p = ParamStore::new();
        let id = p.push("p", ndarray::Array2::from_elem((10, 10), 1.0));
        let g = p.clone();
        let cfg = GradCheckConfig {
            max_entries_per_block: Some(7),
            ..Default::default()
        };
        let report = finite_diff_check(&mut p, &g, &[id], cfg, |p| {
            p.get(id).iter().map(|x| 0.5 * x * x).sum()
        });
        assert!(report.blocks[0].checked <= 7);
    }
}
