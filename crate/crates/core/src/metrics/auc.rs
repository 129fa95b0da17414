use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{GroundTruthMask, ProbMap, UncertaintyMap};
use crate::par;

/// Bin count of the approximate AUC.
pub const DEFAULT_AUC_BINS: usize = 1 << 16;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("AUC score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{pos} positive and {neg} negative labels"
        )));
    }
    Ok((pos, neg))
}

/// Twice the Mann-Whitney U of the positives: every (positive, negative)
/// pair counts 2 when the positive scores higher and 1 on a tie.
pub(crate) fn twice_u(scores: &[f64], labels: &[bool]) -> u128 {
    // `+ 0.0` folds -0.0 into +0.0 so the two land in one tie group.
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s + 0.0, l))
        .collect();
    par::sort_by(&mut pairs, |a, b| a.0.total_cmp(&b.0));
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        let (mut p, mut q) = (0u128, 0u128);
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                p += 1;
            } else {
                q += 1;
            }
            i += 1;
        }
        u2 += p * (2 * neg_below + q);
        neg_below += q;
    }
    u2
}

/// Exact ROC AUC with midrank ties, computed in integers and divided once.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let u2 = twice_u(scores, labels);
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedAuc {
    pub auc: f64,
    /// Largest possible distance to the exact AUC: half the share of
    /// positive/negative pairs that fell into a common bin.
    pub bound: f64,
}

/// Histogram AUC over `bins` equal-width bins on `[lo, hi]`.
///
/// Pairs sharing a bin count as ties, so the result can differ from the
/// exact statistic by at most the returned bound.
pub fn roc_auc_binned(
    scores: &[f64],
    labels: &[bool],
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<BinnedAuc> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::domain(format!(
            "binned AUC needs bins >= 1 and lo < hi, got {bins} bins on [{lo}, {hi}]"
        )));
    }
    let scale = bins as f64 / (hi - lo);
    // Counts are integers, so any block split gives the same histogram; blocks
    // are large enough that allocating one histogram each stays cheap.
    let block = (16 * bins).max(par::CHUNK_LEN);
    let blocks = scores.len().div_ceil(block).max(1);
    let parts = par::map_indices(blocks, |k| {
        let mut h = vec![[0u64; 2]; bins];
        let end = ((k + 1) * block).min(scores.len());
        for i in k * block..end {
            let b = (((scores[i] - lo) * scale).floor().max(0.0) as usize).min(bins - 1);
            h[b][labels[i] as usize] += 1;
        }
        h
    });
    let mut parts = parts.into_iter();
    let mut h = parts.next().unwrap_or_default();
    for p in parts {
        for (acc, x) in h.iter_mut().zip(p) {
            acc[0] += x[0];
            acc[1] += x[1];
        }
    }
    let (mut u2, mut same, mut neg_below) = (0u128, 0u128, 0u128);
    for &[q, p] in &h {
        let (p, q) = (p as u128, q as u128);
        u2 += p * (2 * neg_below + q);
        same += p * q;
        neg_below += q;
    }
    let pairs = (pos as u128 * neg as u128) as f64;
    Ok(BinnedAuc {
        auc: u2 as f64 / (2.0 * pairs),
        bound: same as f64 / (2.0 * pairs),
    })
}

/// `1[p > 0.5] != y` per pixel.
pub fn error_indicator(pred: &ProbMap, gt: &GroundTruthMask) -> Result<Vec<bool>> {
    pred.shape().ensure_same(&gt.shape(), "prediction vs ground truth")?;
    Ok(pred
        .values()
        .iter()
        .enumerate()
        .map(|(i, &p)| (p > 0.5) != gt.is_positive(i))
        .collect())
}

/// AUC of uncertainty as a detector of prediction errors.
pub fn unc_auroc(unc: &UncertaintyMap, pred: &ProbMap, gt: &GroundTruthMask) -> Result<f64> {
    unc.shape().ensure_same(&pred.shape(), "uncertainty vs prediction")?;
    let errors = error_indicator(pred, gt)?;
    roc_auc(unc.values(), &errors)
}
