//! Deferral policies and validation-set threshold fitting.
//!
//! Three policies turn an uncertainty map (and the mean prediction) into an
//! accept/defer map:
//!
//! * **global**: accept `u <= tau` with one threshold for every image;
//! * **adaptive**: accept `u <= tau_n` where `tau_n` is the image's own
//!   `alpha`-th uncertainty percentile;
//! * **confidence-aware**: accept `s <= tau_s` with `s = u (1 - 2|p - 0.5|)`.
//!
//! Ties at the threshold are accepted everywhere.
//!
//! Thresholds are fit on a validation set by sweeping a fixed grid and
//! picking either the best deferral F1 (`max_f1`) or the highest coverage
//! whose accepted-pixel Dice clears a floor (`coverage_dice`). Ties go to
//! the candidate with higher coverage.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::maps::{DecisionMap, GroundTruthMask, ProbMap, UncertaintyKind, UncertaintyMap};
use crate::numeric::{check_alpha, percentile_sorted};
use crate::par;
use crate::uncertainty::confidence;

/// Dice floor used by `coverage_dice` when none is given.
pub const DEFAULT_DICE_FLOOR: f64 = 0.82;

/// Pooled-percentile grid for global and confidence-aware thresholds.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..=200).map(|k| k as f64 * 0.5)
}

/// Integer percentile grid for the adaptive policy.
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (50..=100).map(|a| a as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Global,
    Adaptive,
    ConfidenceAware,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Global => "global",
            Policy::Adaptive => "adaptive",
            Policy::ConfidenceAware => "confidence_aware",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MaxF1,
    CoverageDice,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::MaxF1 => "max_f1",
            Criterion::CoverageDice => "coverage_dice",
        }
    }
}

/// Accept every pixel whose uncertainty is at most `tau`.
pub fn defer_global(unc: &UncertaintyMap, tau: f64) -> DecisionMap {
    threshold_map(unc, tau)
}

fn threshold_map(unc: &UncertaintyMap, tau: f64) -> DecisionMap {
    let accept = unc.values().iter().map(|&u| u <= tau).collect();
    DecisionMap::new(unc.shape(), accept).expect("same shape")
}

/// Per-image percentile threshold: accept `u <= percentile(u, alpha)`.
pub fn defer_adaptive(unc: &UncertaintyMap, alpha: f64) -> Result<DecisionMap> {
    check_alpha(alpha)?;
    let mut sorted = unc.values().to_vec();
    par::sort_by(&mut sorted, f64::total_cmp);
    let tau = percentile_sorted(&sorted, alpha);
    Ok(threshold_map(unc, tau))
}

/// `s = u (1 - c)`: uncertain pixels near the decision boundary score highest.
#[inline]
pub fn confidence_aware(u: f64, p: f64) -> f64 {
    u * (1.0 - confidence(p))
}

pub fn confidence_aware_score(unc: &UncertaintyMap, mean: &ProbMap) -> Result<UncertaintyMap> {
    unc.shape().ensure_same(&mean.shape(), "uncertainty vs mean")?;
    let values = unc
        .values()
        .iter()
        .zip(mean.values())
        .map(|(&u, &p)| confidence_aware(u, p))
        .collect();
    UncertaintyMap::new(unc.shape(), values, UncertaintyKind::ConfidenceAwareScore)
}

pub fn defer_confidence_aware(score: &UncertaintyMap, tau_s: f64) -> Result<DecisionMap> {
    if score.kind() != UncertaintyKind::ConfidenceAwareScore {
        return Err(Error::domain(format!(
            "confidence-aware deferral expects a confidence_aware_score map, got {}",
            score.kind()
        )));
    }
    Ok(threshold_map(score, tau_s))
}

/// Precision/recall of the deferred set as a detector of prediction errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub deferred: u64,
    pub deferred_errors: u64,
    pub errors: u64,
}

impl DeferralF1 {
    /// Empty denominators give 0, so every sweep candidate has a score.
    pub fn from_counts(deferred: u64, deferred_errors: u64, errors: u64) -> Self {
        let precision = ratio_or_zero(deferred_errors, deferred);
        let recall = ratio_or_zero(deferred_errors, errors);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        DeferralF1 {
            precision,
            recall,
            f1,
            deferred,
            deferred_errors,
            errors,
        }
    }
}

fn ratio_or_zero(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Error pixels are those where `p > 0.5` disagrees with the label.
pub fn deferral_f1(
    decision: &DecisionMap,
    pred: &ProbMap,
    gt: &GroundTruthMask,
) -> Result<DeferralF1> {
    decision.shape().ensure_same(&pred.shape(), "decision vs prediction")?;
    decision.shape().ensure_same(&gt.shape(), "decision vs ground truth")?;
    let (mut deferred, mut deferred_errors, mut errors) = (0u64, 0u64, 0u64);
    for (idx, &p) in pred.values().iter().enumerate() {
        let err = (p > 0.5) != gt.is_positive(idx);
        let def = !decision.is_accepted(idx);
        errors += err as u64;
        deferred += def as u64;
        deferred_errors += (err && def) as u64;
    }
    Ok(DeferralF1::from_counts(deferred, deferred_errors, errors))
}

/// Dice `2TP / (2TP + FP + FN)`, 1.0 when both sets are empty.
pub(crate) fn dice_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// One validation image.
#[derive(Clone, Debug)]
pub struct ValidationItem {
    pub prob: ProbMap,
    pub unc: UncertaintyMap,
    pub gt: GroundTruthMask,
}

impl ValidationItem {
    pub fn new(prob: ProbMap, unc: UncertaintyMap, gt: GroundTruthMask) -> Result<Self> {
        prob.shape().ensure_same(&unc.shape(), "validation prob vs uncertainty")?;
        prob.shape().ensure_same(&gt.shape(), "validation prob vs ground truth")?;
        Ok(ValidationItem { prob, unc, gt })
    }

    fn scores(&self, policy: Policy) -> Vec<f64> {
        match policy {
            Policy::ConfidenceAware => self
                .unc
                .values()
                .iter()
                .zip(self.prob.values())
                .map(|(&u, &p)| confidence_aware(u, p))
                .collect(),
            Policy::Global | Policy::Adaptive => self.unc.values().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValidationSet {
    items: Vec<ValidationItem>,
}

impl ValidationSet {
    pub fn new(items: Vec<ValidationItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::domain("empty validation set"));
        }
        Ok(ValidationSet { items })
    }

    pub fn items(&self) -> &[ValidationItem] {
        &self.items
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.tag("validation-set");
        for it in &self.items {
            fp.floats(it.prob.values())
                .floats(it.unc.values())
                .bytes(it.gt.values());
        }
        fp.finish()
    }
}

/// A fitted policy, applied unchanged at test time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeferralModel {
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub criterion: Criterion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice_floor: Option<f64>,
    pub fitted_on: String,
}

impl DeferralModel {
    /// Checks that exactly the active policy's parameters are present.
    pub fn validate(&self) -> Result<()> {
        match self.policy {
            Policy::Global | Policy::ConfidenceAware => {
                let tau = self
                    .tau
                    .ok_or_else(|| Error::domain(format!("{} model without tau", self.policy)))?;
                if !(tau >= 0.0) {
                    return Err(Error::domain(format!("tau {tau} must be >= 0")));
                }
                if self.alpha.is_some() {
                    return Err(Error::domain(format!("{} model with alpha", self.policy)));
                }
            }
            Policy::Adaptive => {
                let alpha = self
                    .alpha
                    .ok_or_else(|| Error::domain("adaptive model without alpha"))?;
                check_alpha(alpha)?;
                if self.tau.is_some() {
                    return Err(Error::domain("adaptive model with tau"));
                }
            }
        }
        match (self.criterion, self.dice_floor) {
            (Criterion::CoverageDice, Some(f)) => check_floor(f),
            (Criterion::CoverageDice, None) => {
                Err(Error::domain("coverage_dice model without dice_floor"))
            }
            (Criterion::MaxF1, Some(_)) => Err(Error::domain("max_f1 model with dice_floor")),
            (Criterion::MaxF1, None) => Ok(()),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: DeferralModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// The score map the policy thresholds (`u`, or `s` for confidence-aware).
    pub fn score(&self, unc: &UncertaintyMap, mean: &ProbMap) -> Result<UncertaintyMap> {
        match self.policy {
            Policy::ConfidenceAware => confidence_aware_score(unc, mean),
            Policy::Global | Policy::Adaptive => {
                unc.shape().ensure_same(&mean.shape(), "uncertainty vs mean")?;
                Ok(unc.clone())
            }
        }
    }

    pub fn apply(&self, unc: &UncertaintyMap, mean: &ProbMap) -> Result<DecisionMap> {
        self.validate()?;
        match self.policy {
            Policy::Global => {
                unc.shape().ensure_same(&mean.shape(), "uncertainty vs mean")?;
                Ok(defer_global(unc, self.tau.unwrap()))
            }
            Policy::Adaptive => {
                unc.shape().ensure_same(&mean.shape(), "uncertainty vs mean")?;
                defer_adaptive(unc, self.alpha.unwrap())
            }
            Policy::ConfidenceAware => {
                defer_confidence_aware(&confidence_aware_score(unc, mean)?, self.tau.unwrap())
            }
        }
    }
}

fn check_floor(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::domain(format!("dice floor {f} outside [0, 1]")))
    }
}

/// Validation statistics of one sweep candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    /// `tau` for global/confidence-aware, `alpha` for adaptive.
    pub threshold: f64,
    pub coverage: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dice: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: DeferralModel,
    pub selected: CandidateStats,
    pub candidates: Vec<CandidateStats>,
}

/// Pixel counts of one candidate, summed over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    pixels: u64,
    accepted: u64,
    errors: u64,
    deferred_errors: u64,
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.pixels += o.pixels;
        self.accepted += o.accepted;
        self.errors += o.errors;
        self.deferred_errors += o.deferred_errors;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl Counts {
    fn stats(&self, threshold: f64) -> CandidateStats {
        let f = DeferralF1::from_counts(
            self.pixels - self.accepted,
            self.deferred_errors,
            self.errors,
        );
        CandidateStats {
            threshold,
            coverage: self.accepted as f64 / self.pixels as f64,
            precision: f.precision,
            recall: f.recall,
            f1: f.f1,
            dice: dice_from_counts(self.tp, self.fp, self.fn_),
        }
    }
}

/// Pixels sorted by score with prefix counts, so the counts for any
/// threshold come from one binary search.
struct Ranked {
    scores: Vec<f64>,
    // prefix[k] = counts over the k lowest-scoring pixels
    err: Vec<u32>,
    tp: Vec<u32>,
    fp: Vec<u32>,
    fn_: Vec<u32>,
}

impl Ranked {
    fn new(pixels: Vec<(f64, bool, bool)>) -> Self {
        let mut pixels = pixels;
        par::sort_by(&mut pixels, |a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let n = pixels.len();
        let mut scores = Vec::with_capacity(n);
        let mut err = Vec::with_capacity(n + 1);
        let mut tp = Vec::with_capacity(n + 1);
        let mut fp = Vec::with_capacity(n + 1);
        let mut fn_ = Vec::with_capacity(n + 1);
        let (mut e, mut t, mut f, mut m) = (0u32, 0u32, 0u32, 0u32);
        err.push(0);
        tp.push(0);
        fp.push(0);
        fn_.push(0);
        for (s, hard, label) in pixels {
            scores.push(s);
            e += (hard != label) as u32;
            t += (hard && label) as u32;
            f += (hard && !label) as u32;
            m += (!hard && label) as u32;
            err.push(e);
            tp.push(t);
            fp.push(f);
            fn_.push(m);
        }
        Ranked {
            scores,
            err,
            tp,
            fp,
            fn_,
        }
    }

    fn counts_at(&self, tau: f64) -> Counts {
        let n = self.scores.len();
        let k = self.scores.partition_point(|&s| s <= tau);
        Counts {
            pixels: n as u64,
            accepted: k as u64,
            errors: self.err[n] as u64,
            deferred_errors: (self.err[n] - self.err[k]) as u64,
            tp: self.tp[k] as u64,
            fp: self.fp[k] as u64,
            fn_: self.fn_[k] as u64,
        }
    }
}

fn ranked_pixels(items: &[&ValidationItem], policy: Policy) -> Ranked {
    let mut pixels = Vec::with_capacity(items.iter().map(|it| it.prob.len()).sum());
    for it in items {
        let scores = it.scores(policy);
        for (idx, (&s, &p)) in scores.iter().zip(it.prob.values()).enumerate() {
            pixels.push((s, p > 0.5, it.gt.is_positive(idx)));
        }
    }
    Ranked::new(pixels)
}

/// Sweeps the policy's grid on `val` and returns the selected model.
///
/// `dice_floor` is only used by [`Criterion::CoverageDice`] and defaults to
/// [`DEFAULT_DICE_FLOOR`]. An unreachable floor yields
/// [`Error::Infeasible`] carrying the best Dice any candidate achieved.
pub fn fit_threshold(
    val: &ValidationSet,
    policy: Policy,
    criterion: Criterion,
    dice_floor: Option<f64>,
) -> Result<FitReport> {
    let floor = match criterion {
        Criterion::CoverageDice => {
            let f = dice_floor.unwrap_or(DEFAULT_DICE_FLOOR);
            check_floor(f)?;
            Some(f)
        }
        Criterion::MaxF1 => None,
    };

    let candidates = match policy {
        Policy::Global | Policy::ConfidenceAware => {
            let refs: Vec<&ValidationItem> = val.items().iter().collect();
            let ranked = ranked_pixels(&refs, policy);
            let taus: Vec<f64> = threshold_grid()
                .map(|a| percentile_sorted(&ranked.scores, a))
                .collect();
            par::map_indices(taus.len(), |i| ranked.counts_at(taus[i]).stats(taus[i]))
        }
        Policy::Adaptive => {
            let per_image: Vec<Ranked> =
                par::map_indices(val.items().len(), |i| ranked_pixels(&[&val.items()[i]], policy));
            let alphas: Vec<f64> = alpha_grid().collect();
            par::map_indices(alphas.len(), |i| {
                let mut total = Counts::default();
                for r in &per_image {
                    total += r.counts_at(percentile_sorted(&r.scores, alphas[i]));
                }
                total.stats(alphas[i])
            })
        }
    };

    let selected = select(&candidates, criterion, floor)?;
    let (tau, alpha) = match policy {
        Policy::Adaptive => (None, Some(selected.threshold)),
        _ => (Some(selected.threshold), None),
    };
    let model = DeferralModel {
        policy,
        tau,
        alpha,
        criterion,
        dice_floor: floor,
        fitted_on: val.fingerprint(),
    };
    Ok(FitReport {
        model,
        selected,
        candidates,
    })
}

fn select(
    candidates: &[CandidateStats],
    criterion: Criterion,
    floor: Option<f64>,
) -> Result<CandidateStats> {
    // Later-in-grid candidates have higher thresholds, so `>=` on the final
    // key keeps the higher one on a full tie.
    let mut best: Option<CandidateStats> = None;
    match criterion {
        Criterion::MaxF1 => {
            for c in candidates {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        c.f1 > b.f1 || (c.f1 == b.f1 && c.coverage >= b.coverage)
                    }
                };
                if better {
                    best = Some(*c);
                }
            }
        }
        Criterion::CoverageDice => {
            let floor = floor.unwrap_or(DEFAULT_DICE_FLOOR);
            for c in candidates.iter().filter(|c| c.dice >= floor) {
                if best.is_none_or(|b| c.coverage >= b.coverage) {
                    best = Some(*c);
                }
            }
            if best.is_none() {
                let best_dice = candidates.iter().map(|c| c.dice).fold(0.0, f64::max);
                return Err(Error::Infeasible { floor, best_dice });
            }
        }
    }
    best.ok_or_else(|| Error::domain("empty candidate grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Shape;

    fn unc(vals: &[f64]) -> UncertaintyMap {
        UncertaintyMap::new(
            Shape::new(1, vals.len()).unwrap(),
            vals.to_vec(),
            UncertaintyKind::ConfidenceAwareScore,
        )
        .unwrap()
    }

    fn var_map(vals: Vec<f64>, h: usize, w: usize) -> UncertaintyMap {
        UncertaintyMap::new(Shape::new(h, w).unwrap(), vals, UncertaintyKind::Variance).unwrap()
    }

    #[test]
    fn global_ties_accept() {
        let d = defer_global(&unc(&[0.1, 0.5, 0.9]), 0.5);
        assert_eq!(d.accepted(), &[true, true, false]);
        let u = unc(&[0.1, 0.2]);
        assert_eq!(defer_global(&u, 0.2).coverage(), 1.0);
        assert_eq!(defer_global(&u, 0.0).coverage(), 0.0);
    }

    #[test]
    fn adaptive_examples() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.002).collect();
        let u = var_map(vals, 10, 10);
        assert_eq!(defer_adaptive(&u, 75.0).unwrap().deferred_count(), 25);
        assert_eq!(defer_adaptive(&u, 100.0).unwrap().coverage(), 1.0);
        let flat = var_map(vec![0.01; 16], 4, 4);
        assert_eq!(defer_adaptive(&flat, 60.0).unwrap().coverage(), 1.0);
        assert!(defer_adaptive(&u, 101.0).is_err());
    }

    #[test]
    fn worked_example_scores() {
        assert!((confidence_aware(0.05, 0.52) - 0.048).abs() < 1e-15);
        assert!((confidence_aware(0.05, 0.92) - 0.008).abs() < 1e-15);
        assert_eq!(confidence_aware(0.3, 0.0), 0.0);
        assert_eq!(confidence_aware(0.3, 1.0), 0.0);
        let s = unc(&[0.048, 0.008]);
        assert_eq!(defer_confidence_aware(&s, 0.01).unwrap().accepted(), &[false, true]);
    }

    #[test]
    fn confidence_deferral_requires_score_kind() {
        let u = var_map(vec![0.01], 1, 1);
        assert!(defer_confidence_aware(&u, 0.1).is_err());
    }

    #[test]
    fn f1_from_counts() {
        let f = DeferralF1::from_counts(4, 3, 6);
        assert_eq!((f.precision, f.recall), (0.75, 0.5));
        assert!((f.f1 - 0.6).abs() < 1e-15);
        let none = DeferralF1::from_counts(0, 0, 6);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let perfect = DeferralF1::from_counts(6, 6, 6);
        assert_eq!(perfect.f1, 1.0);
    }

    #[test]
    fn model_json_round_trip_and_validation() {
        let m = DeferralModel {
            policy: Policy::Adaptive,
            tau: None,
            alpha: Some(75.0),
            criterion: Criterion::CoverageDice,
            dice_floor: Some(0.82),
            fitted_on: "abc".into(),
        };
        let json = m.to_json();
        assert!(!json.contains("\"tau\""));
        assert_eq!(DeferralModel::from_json(&json).unwrap(), m);
        let bad = r#"{"policy":"global","criterion":"max_f1","fitted_on":"x"}"#;
        assert!(DeferralModel::from_json(bad).is_err());
        let extra = r#"{"policy":"global","tau":0.1,"criterion":"max_f1","fitted_on":"x","bogus":1}"#;
        assert!(DeferralModel::from_json(extra).is_err());
    }

    #[test]
    fn selection_prefers_coverage_on_ties() {
        let c = |t, cov, f1, dice| CandidateStats {
            threshold: t,
            coverage: cov,
            precision: 0.0,
            recall: 0.0,
            f1,
            dice,
        };
        let cands = [c(1.0, 0.5, 0.7, 0.9), c(2.0, 0.8, 0.7, 0.85), c(3.0, 0.9, 0.6, 0.8)];
        assert_eq!(select(&cands, Criterion::MaxF1, None).unwrap().threshold, 2.0);
        assert_eq!(
            select(&cands, Criterion::CoverageDice, Some(0.82)).unwrap().threshold,
            2.0
        );
        match select(&cands, Criterion::CoverageDice, Some(0.95)) {
            Err(Error::Infeasible { best_dice, .. }) => assert_eq!(best_dice, 0.9),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
