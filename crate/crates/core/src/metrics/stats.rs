use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numeric::percentile_sorted;
use crate::synth::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    pub mean_diff: f64,
}

/// Paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired lists of {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::domain("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if let Some(v) = d.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("paired difference {v}")));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::DegenerateTest);
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::domain(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p, mean_diff: mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

pub const MIN_RESAMPLES: usize = 100;

/// Percentile bootstrap CI of the mean over images.
///
/// The interval is widened to include the point estimate when resampling
/// noise would otherwise leave it outside.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if values.is_empty() {
        return Err(Error::domain("bootstrap of an empty list"));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::domain(format!(
            "bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("confidence level {level} outside (0, 1)")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bootstrap value {v}")));
    }
    let n = values.len();
    let estimate = values.iter().sum::<f64>() / n as f64;
    let mut rng = CounterRng::new(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_unstable_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0 * 100.0;
    let lo = percentile_sorted(&means, tail).min(estimate);
    let hi = percentile_sorted(&means, 100.0 - tail).max(estimate);
    Ok(BootstrapCi {
        estimate,
        lo,
        hi,
        level,
        resamples,
    })
}
