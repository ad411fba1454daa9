use serde::{Deserialize, Serialize};

use crate::error::{MovaError, Result};
use crate::numerics::tensor::Tensor;

/// Denominator floor for relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub compared: usize,
    pub eps: f64,
    /// Flat index of the worst element, if any element was compared.
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Combine several reports into one carrying the overall maximum.
    pub fn merge(op: impl Into<String>, reports: &[GradCheckReport]) -> GradCheckReport {
        let mut out = GradCheckReport {
            op: op.into(),
            max_rel_error: 0.0,
            compared: 0,
            eps: reports.first().map_or(0.0, |r| r.eps),
            worst_index: None,
        };
        for r in reports {
            out.compared += r.compared;
            if r.max_rel_error > out.max_rel_error || out.worst_index.is_none() {
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                out.worst_index = r.worst_index;
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference check of `analytic` against `scalar_fn` over every
/// element of `param_block`.
pub fn finite_diff_check<F>(
    op: &str,
    param_block: &Tensor,
    scalar_fn: F,
    analytic: &Tensor,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    let all: Vec<usize> = (0..param_block.len()).collect();
    finite_diff_check_at(op, param_block, scalar_fn, analytic, eps, &all)
}

/// Like [`finite_diff_check`] but probes only the listed flat indices.
pub fn finite_diff_check_at<F>(
    op: &str,
    param_block: &Tensor,
    mut scalar_fn: F,
    analytic: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    if analytic.dims() != param_block.dims() {
        return Err(MovaError::Shape(format!(
            "analytic gradient dims {:?} differ from parameter dims {:?}",
            analytic.dims(),
            param_block.dims()
        )));
    }
    if !(eps > 0.0) {
        return Err(MovaError::Validation(format!("step must be positive, got {eps}")));
    }
    let mut probe = param_block.clone();
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        compared: 0,
        eps,
        worst_index: None,
    };
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = scalar_fn(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = scalar_fn(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(MovaError::Numeric {
                context: format!("finite-difference probe of {op}"),
                index: i,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.data()[i], numeric);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.compared += 1;
    }
    Ok(report)
}
