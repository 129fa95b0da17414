//! Scalar helpers shared by every module: binary entropy in nats,
//! interpolated percentiles, and the clamped logit/sigmoid pair.

use crate::error::{Error, Result};

/// Probabilities are clipped to `[LOGIT_EPS, 1 - LOGIT_EPS]` before taking a
/// logit so that saturated 32-bit sigmoid outputs still map to finite values.
pub const LOGIT_EPS: f64 = 1e-7;

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("binary entropy of {p}: not a probability")));
    }
    Ok(entropy_unchecked(p))
}

/// [`binary_entropy`] without the domain check, for inner loops over
/// already-validated maps.
#[inline]
pub(crate) fn entropy_unchecked(p: f64) -> f64 {
    let q = 1.0 - p;
    let a = if p > 0.0 { -p * p.ln() } else { 0.0 };
    let b = if q > 0.0 { -q * q.ln() } else { 0.0 };
    a + b
}

/// Linear-interpolation percentile on `(n - 1)`-scaled ranks.
///
/// `alpha = 0` gives the minimum and `alpha = 100` the maximum.
pub fn percentile(values: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(Error::domain("percentile of an empty sequence"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("percentile input contains {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, alpha))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=100.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::domain(format!("percentile {alpha} outside [0, 100]")))
    }
}

/// Percentile of data that is already sorted ascending and nonempty.
pub(crate) fn percentile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let pos = alpha / 100.0 * (n - 1) as f64;
    let lo = (pos.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)
}

/// `ln(p / (1 - p))` on the clamped probability.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
