//! Evaluation metrics: overlap, ranking, error reduction, risk-coverage
//! analysis and per-image statistics.

pub mod auc;
pub mod overlap;
pub mod risk;
pub mod stats;

pub use auc::{error_indicator, roc_auc, roc_auc_binned, unc_auroc, BinnedAuc, DEFAULT_AUC_BINS};
pub use overlap::{dice, iou, Confusion};
pub use risk::{
    aucc, default_grid, operating_points, risk_coverage_curve, CurveInput, CurvePoint, MetricKind,
    OperatingPoint, RiskCoverageCurve, Target,
};
pub use stats::{bootstrap_ci, paired_ttest, BootstrapCi, TTest};

use crate::error::{Error, Result};

/// Error reduction ratio `(e_before - e_after) / e_before`.
pub fn err(e_before: f64, e_after: f64) -> Result<f64> {
    if !e_before.is_finite() || !e_after.is_finite() {
        return Err(Error::NonFinite(format!("error rates {e_before}, {e_after}")));
    }
    if e_before == 0.0 {
        return Err(Error::UndefinedErr);
    }
    if e_before < 0.0 || e_after < 0.0 {
        return Err(Error::domain(format!(
            "error rates must be nonnegative, got {e_before} and {e_after}"
        )));
    }
    Ok((e_before - e_after) / e_before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn err_examples() {
        assert!((err(0.0640, 0.0131).unwrap() - 0.7953).abs() < 1e-4);
        assert!((err(0.0658, 0.0337).unwrap() - 0.4879).abs() < 1e-4);
        assert_eq!(err(0.05, 0.05).unwrap(), 0.0);
        assert!(matches!(err(0.0, 0.0), Err(Error::UndefinedErr)));
    }
}
