//! Deliberately naive reference implementations, used only to check the
//! production code. Each one follows its formula literally, with nested
//! loops and no sorting tricks, and refuses inputs too large to finish
//! quickly.

use crate::error::{Error, Result};

/// Largest map (in pixels) any per-pixel oracle accepts.
pub const MAX_PIXELS: usize = 64 * 64;
/// Largest sample for pairwise AUC.
pub const MAX_AUC_SAMPLES: usize = 2000;
/// Largest calibration set for the temperature grid search.
pub const MAX_GRID_PIXELS: usize = 1 << 18;

fn guard(n: usize, limit: usize, what: &str) -> Result<()> {
    if n > limit {
        return Err(Error::SizeGuard(format!("{what}: {n} > {limit}")));
    }
    Ok(())
}

fn h(p: f64) -> f64 {
    let mut s = 0.0;
    if p > 0.0 {
        s -= p * p.ln();
    }
    if p < 1.0 {
        s -= (1.0 - p) * (1.0 - p).ln();
    }
    s
}

/// Mean and mutual information of one pixel's passes.
pub fn oracle_mi(passes: &[f64]) -> (f64, f64) {
    let t = passes.len() as f64;
    let mut mean = 0.0;
    for &p in passes {
        mean += p;
    }
    mean /= t;
    let mut expected = 0.0;
    for &p in passes {
        expected += h(p);
    }
    (mean, h(mean) - expected / t)
}

/// Mean, population variance and entropy of the mean for one pixel.
pub fn oracle_tta_var(values: &[f64]) -> (f64, f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let mut var = 0.0;
    for &v in values {
        var += (v - mean) * (v - mean);
    }
    (mean, var / k, h(mean))
}

/// `P(score_pos > score_neg) + P(tie) / 2` over all pairs.
pub fn oracle_auc_paircount(pos: &[f64], neg: &[f64]) -> Result<f64> {
    guard(pos.len() + neg.len(), MAX_AUC_SAMPLES, "pairwise AUC")?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc("one class is empty".into()));
    }
    let mut wins = 0.0;
    for &a in pos {
        for &b in neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// ECE with positive-frequency accuracy; each bin scans every pixel.
pub fn oracle_ece(p: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    guard(p.len(), MAX_PIXELS * 30, "ECE")?;
    let n = p.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        let (mut count, mut conf, mut pos) = (0.0, 0.0, 0.0);
        for (i, &v) in p.iter().enumerate() {
            let mut bin = (v * bins as f64).floor() as usize;
            if bin >= bins {
                bin = bins - 1;
            }
            if bin == b {
                count += 1.0;
                conf += v;
                if labels[i] {
                    pos += 1.0;
                }
            }
        }
        if count > 0.0 {
            ece += count / n * (conf / count - pos / count).abs();
        }
    }
    Ok(ece)
}

/// Dice and IoU of boolean sets; both 1 when the sets are empty.
pub fn oracle_dice(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        match (pred[i], gt[i]) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
}

pub fn oracle_err(e_before: f64, e_after: f64) -> f64 {
    (e_before - e_after) / e_before
}

/// Precision, recall and F1 of the deferred set against error pixels.
pub fn oracle_deferral_f1(deferred: &[bool], error: &[bool]) -> (f64, f64, f64) {
    let (mut d, mut e, mut both) = (0.0, 0.0, 0.0);
    for i in 0..deferred.len() {
        if deferred[i] {
            d += 1.0;
        }
        if error[i] {
            e += 1.0;
        }
        if deferred[i] && error[i] {
            both += 1.0;
        }
    }
    let prec = if d > 0.0 { both / d } else { 0.0 };
    let rec = if e > 0.0 { both / e } else { 0.0 };
    let f1 = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    (prec, rec, f1)
}

/// Linear-interpolation percentile after an insertion sort.
pub fn oracle_percentile(values: &[f64], alpha: f64) -> Result<f64> {
    guard(values.len(), MAX_PIXELS * 30, "percentile")?;
    let mut v = values.to_vec();
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let pos = alpha / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= v.len() {
        return Ok(v[v.len() - 1]);
    }
    let frac = pos - lo as f64;
    Ok(if frac == 0.0 {
        v[lo]
    } else {
        v[lo] + frac * (v[lo + 1] - v[lo])
    })
}

/// Accept/defer by the adaptive rule, via [`oracle_percentile`].
pub fn oracle_defer_adaptive(u: &[f64], alpha: f64) -> Result<Vec<bool>> {
    let tau = oracle_percentile(u, alpha)?;
    Ok(u.iter().map(|&x| x <= tau).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridFit {
    pub t: f64,
    pub nll: f64,
    pub flat: bool,
}

fn bce(z: &[f64], y: &[bool], t: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..z.len() {
        let p = 1.0 / (1.0 + (-z[i] / t).exp());
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        s -= if y[i] { p.ln() } else { (1.0 - p).ln() };
    }
    s / z.len() as f64
}

/// Grid search for the temperature on `[0.05, 10]`.
///
/// A 0.01 grid locates the basin and a 0.001 grid refines it. Because the
/// objective is unimodal in `T` this finds the best point of the full
/// 0.001 grid.
pub fn oracle_temperature_grid(z: &[f64], y: &[bool]) -> Result<GridFit> {
    guard(z.len(), MAX_GRID_PIXELS, "temperature grid")?;
    if z.iter().all(|&v| v == 0.0) {
        return Ok(GridFit {
            t: 1.0,
            nll: std::f64::consts::LN_2,
            flat: true,
        });
    }
    let mut best = (0.05, bce(z, y, 0.05));
    let mut k = 5;
    while k <= 1000 {
        let t = k as f64 / 100.0;
        let v = bce(z, y, t);
        if v < best.1 {
            best = (t, v);
        }
        k += 1;
    }
    let centre = (best.0 * 1000.0).round() as i64;
    for m in (centre - 10).max(50)..=(centre + 10).min(10_000) {
        let t = m as f64 / 1000.0;
        let v = bce(z, y, t);
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(GridFit {
        t: best.0,
        nll: best.1,
        flat: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        assert_eq!(oracle_auc_paircount(&[0.5, 0.9], &[0.5, 0.1]).unwrap(), 0.875);
        let (m, mi) = oracle_mi(&[0.2, 0.8]);
        assert_eq!(m, 0.5);
        assert!((mi - 0.192_744_757_021_757_43).abs() < 1e-15);
        assert!(oracle_temperature_grid(&[0.0; 8], &[true; 8]).unwrap().flat);
        assert_eq!(oracle_percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        let (p, r, f) = oracle_deferral_f1(
            &[true, true, true, true, false, false, false],
            &[true, true, true, false, true, true, true],
        );
        assert_eq!((p, r), (0.75, 0.5));
        assert!((f - 0.6).abs() < 1e-15);
    }

    #[test]
    fn size_guard() {
        let big = vec![0.5; MAX_AUC_SAMPLES];
        assert!(matches!(
            oracle_auc_paircount(&big, &[0.1]),
            Err(Error::SizeGuard(_))
        ));
    }
}
