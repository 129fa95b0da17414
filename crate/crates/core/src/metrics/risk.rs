//! Metric-versus-coverage curves, their area, and operating points.
//!
//! Coverage level `q` accepts the `round(q N)` pixels with the lowest score,
//! pooled over every image. Ties are broken by image order and then by
//! row-major pixel index, so the accepted set at each level is unique.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::deferral::dice_from_counts;
use crate::error::{Error, Result};
use crate::maps::{GroundTruthMask, ProbMap, UncertaintyMap};
use crate::metrics::overlap::Confusion;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dice,
    Auc,
    ErrorRate,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Dice => "dice",
            MetricKind::Auc => "auc",
            MetricKind::ErrorRate => "error_rate",
        }
    }

    pub const ALL: [MetricKind; 3] = [MetricKind::Dice, MetricKind::Auc, MetricKind::ErrorRate];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    /// `None` where the metric is undefined on the accepted set.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    pub metric: MetricKind,
    pub points: Vec<CurvePoint>,
    pub aucc: Option<f64>,
    pub notes: Vec<String>,
}

impl RiskCoverageCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coverage,value,defined\n");
        for p in &self.points {
            match p.value {
                Some(v) => writeln!(out, "{},{},1", p.coverage, v),
                None => writeln!(out, "{},,0", p.coverage),
            }
            .expect("write to string");
        }
        out
    }

    pub fn value_at(&self, coverage: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.coverage == coverage)
            .and_then(|p| p.value)
    }
}

/// `0, 0.01, ..., 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::domain("empty coverage grid"));
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::domain("coverage grid must be strictly increasing"));
        }
    }
    if !(grid[0] >= 0.0 && grid[grid.len() - 1] <= 1.0) {
        return Err(Error::domain("coverage grid must lie in [0, 1]"));
    }
    Ok(())
}

/// Score, prediction and labels of one image.
#[derive(Clone, Copy, Debug)]
pub struct CurveInput<'a> {
    pub score: &'a UncertaintyMap,
    pub pred: &'a ProbMap,
    pub gt: &'a GroundTruthMask,
}

/// Pooled pixels in acceptance order.
struct Ordered {
    pred: Vec<f64>,
    label: Vec<bool>,
}

fn order(inputs: &[CurveInput<'_>]) -> Result<Ordered> {
    if inputs.is_empty() {
        return Err(Error::domain("risk-coverage curve of an empty set"));
    }
    let mut keys = Vec::new();
    let mut pred = Vec::new();
    let mut label = Vec::new();
    for inp in inputs {
        inp.score.shape().ensure_same(&inp.pred.shape(), "score vs prediction")?;
        inp.score.shape().ensure_same(&inp.gt.shape(), "score vs ground truth")?;
        let off = keys.len();
        keys.extend(
            inp.score
                .values()
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, off + i)),
        );
        pred.extend_from_slice(inp.pred.values());
        label.extend((0..inp.gt.len()).map(|i| inp.gt.is_positive(i)));
    }
    par::sort_by(&mut keys, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(Ordered {
        pred: keys.iter().map(|&(_, i)| pred[i]).collect(),
        label: keys.iter().map(|&(_, i)| label[i]).collect(),
    })
}

/// Accepted-pixel count at coverage `q` of `n` pixels.
pub fn accepted_at(q: f64, n: usize) -> usize {
    ((q * n as f64).round() as usize).min(n)
}

pub fn risk_coverage_curve(
    inputs: &[CurveInput<'_>],
    metric: MetricKind,
    grid: &[f64],
) -> Result<RiskCoverageCurve> {
    check_grid(grid)?;
    let ord = order(inputs)?;
    let n = ord.pred.len();
    let ks: Vec<usize> = grid.iter().map(|&q| accepted_at(q, n)).collect();
    let values = match metric {
        MetricKind::Dice | MetricKind::ErrorRate => prefix_confusion(&ord, &ks)
            .into_iter()
            .zip(&ks)
            .map(|(c, &k)| {
                if k == 0 {
                    return None;
                }
                match metric {
                    MetricKind::Dice => {
                        (!c.both_empty()).then(|| dice_from_counts(c.tp, c.fp, c.fn_))
                    }
                    _ => c.error_rate(),
                }
            })
            .collect(),
        MetricKind::Auc => incremental_auc(&ord, &ks),
    };
    let points: Vec<CurvePoint> = grid
        .iter()
        .zip(values)
        .map(|(&coverage, value)| CurvePoint { coverage, value })
        .collect();
    let mut notes = Vec::new();
    let undefined = points.iter().filter(|p| p.value.is_none()).count();
    if undefined > 0 {
        notes.push(format!(
            "{undefined} coverage levels have an undefined {} and are excluded from AUCC",
            metric.name()
        ));
    }
    let aucc = aucc(&points, None);
    Ok(RiskCoverageCurve {
        metric,
        points,
        aucc,
        notes,
    })
}

fn prefix_confusion(ord: &Ordered, ks: &[usize]) -> Vec<Confusion> {
    let mut out = Vec::with_capacity(ks.len());
    let mut c = Confusion::default();
    let mut done = 0;
    for &k in ks {
        while done < k {
            c.add(ord.pred[done] > 0.5, ord.label[done]);
            done += 1;
        }
        out.push(c);
    }
    out
}

/// Fenwick tree of counts over prediction ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count at ranks `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Prediction AUC on each accepted prefix, updated one pixel at a time.
fn incremental_auc(ord: &Ordered, ks: &[usize]) -> Vec<Option<f64>> {
    let mut distinct = ord.pred.clone();
    par::sort_by(&mut distinct, f64::total_cmp);
    distinct.dedup();
    let rank: Vec<usize> = ord
        .pred
        .iter()
        .map(|p| distinct.partition_point(|d| d < p))
        .collect();

    let m = distinct.len();
    let mut pos = Fenwick::new(m);
    let mut neg = Fenwick::new(m);
    let (mut np, mut nn, mut u2) = (0u64, 0u64, 0u128);
    let mut out = Vec::with_capacity(ks.len());
    let mut done = 0;
    for &k in ks {
        while done < k {
            let r = rank[done];
            if ord.label[done] {
                let below = neg.below(r);
                let equal = neg.below(r + 1) - below;
                u2 += (2 * below + equal) as u128;
                pos.add(r);
                np += 1;
            } else {
                let not_above = pos.below(r + 1);
                let equal = not_above - pos.below(r);
                let above = np - not_above;
                u2 += (2 * above + equal) as u128;
                neg.add(r);
                nn += 1;
            }
            done += 1;
        }
        out.push((np > 0 && nn > 0).then(|| u2 as f64 / (2 * np as u128 * nn as u128) as f64));
    }
    out
}

/// Trapezoidal area under the defined points over `[0, 1]`.
///
/// The curve is extended to coverage 0 with `extension`, or with the first
/// defined value when none is given, and held flat after its last point.
pub fn aucc(points: &[CurvePoint], extension: Option<f64>) -> Option<f64> {
    let defined: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.coverage > 0.0)
        .filter_map(|p| p.value.map(|v| (p.coverage, v)))
        .collect();
    let first = defined.first()?;
    let mut prev = (0.0, extension.unwrap_or(first.1));
    let mut area = 0.0;
    for &(c, v) in &defined {
        area += (c - prev.0) * (prev.1 + v) / 2.0;
        prev = (c, v);
    }
    if prev.0 < 1.0 {
        area += (1.0 - prev.0) * prev.1;
    }
    Some(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    /// Largest coverage whose metric is at least the value.
    MetricAtLeast(f64),
    /// Largest coverage whose metric is at most the value.
    MetricAtMost(f64),
    /// Metric at the given coverage.
    Coverage(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target: Target,
    pub reachable: bool,
    pub coverage: Option<f64>,
    pub value: Option<f64>,
}

impl OperatingPoint {
    fn unreachable(target: Target) -> Self {
        OperatingPoint {
            target,
            reachable: false,
            coverage: None,
            value: None,
        }
    }
}

/// Reads each target off the curve, interpolating linearly between
/// adjacent defined points.
pub fn operating_points(curve: &RiskCoverageCurve, targets: &[Target]) -> Result<Vec<OperatingPoint>> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.value.map(|v| (p.coverage, v)))
        .collect();
    if pts.is_empty() {
        return Err(Error::domain("operating points of a curve with no defined points"));
    }
    Ok(targets.iter().map(|&t| operating_point(&pts, t)).collect())
}

fn operating_point(pts: &[(f64, f64)], target: Target) -> OperatingPoint {
    let hit = |coverage: f64, value: f64| OperatingPoint {
        target,
        reachable: true,
        coverage: Some(coverage),
        value: Some(value),
    };
    match target {
        Target::Coverage(c) => {
            for (i, &(x, v)) in pts.iter().enumerate() {
                if x == c {
                    return hit(c, v);
                }
                if i > 0 && pts[i - 1].0 < c && c < x {
                    let (x0, v0) = pts[i - 1];
                    return hit(c, v0 + (c - x0) / (x - x0) * (v - v0));
                }
            }
            OperatingPoint::unreachable(target)
        }
        Target::MetricAtLeast(goal) | Target::MetricAtMost(goal) => {
            let ok = |v: f64| match target {
                Target::MetricAtLeast(_) => v >= goal,
                _ => v <= goal,
            };
            // Walk down from full coverage; the first satisfying point or
            // crossing is the largest coverage meeting the goal.
            for i in (0..pts.len()).rev() {
                let (x, v) = pts[i];
                if ok(v) {
                    if i + 1 < pts.len() {
                        let (x1, v1) = pts[i + 1];
                        if v != v1 {
                            let c = x + (goal - v) / (v1 - v) * (x1 - x);
                            if c > x {
                                return hit(c.min(x1), goal);
                            }
                        }
                    }
                    return hit(x, v);
                }
            }
            OperatingPoint::unreachable(target)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{Shape, UncertaintyKind};

    fn pt(c: f64, v: Option<f64>) -> CurvePoint {
        CurvePoint { coverage: c, value: v }
    }

    #[test]
    fn hand_aucc() {
        let pts = [pt(0.0, None), pt(0.5, Some(0.9)), pt(1.0, Some(0.8))];
        assert_eq!(aucc(&pts, Some(1.0)), Some(0.9));
        let default_ext = aucc(&pts, None).unwrap();
        assert!((default_ext - (0.45 + 0.425)).abs() < 1e-15);
    }

    #[test]
    fn aucc_holds_last_value_flat() {
        let pts = [pt(0.5, Some(0.4))];
        assert_eq!(aucc(&pts, None), Some(0.4));
        assert_eq!(aucc(&[pt(0.5, None)], None), None);
    }

    fn curve(values: &[(f64, f64)]) -> RiskCoverageCurve {
        RiskCoverageCurve {
            metric: MetricKind::Dice,
            points: values.iter().map(|&(c, v)| pt(c, Some(v))).collect(),
            aucc: None,
            notes: vec![],
        }
    }

    #[test]
    fn interpolated_metric_target() {
        // 0.82 is crossed 70% of the way from 0.92 to 0.93.
        let c = curve(&[(0.9, 0.9), (0.92, 0.827), (0.93, 0.817), (1.0, 0.78)]);
        let op = operating_points(&c, &[Target::MetricAtLeast(0.82)]).unwrap()[0];
        assert!(op.reachable);
        assert!((op.coverage.unwrap() - 0.927).abs() < 1e-12);
        assert_eq!(op.value, Some(0.82));
    }

    #[test]
    fn easy_and_impossible_targets() {
        let c = curve(&[(0.5, 0.9), (1.0, 0.8)]);
        let ops = operating_points(
            &c,
            &[
                Target::MetricAtLeast(0.7),
                Target::MetricAtLeast(0.95),
                Target::Coverage(0.75),
                Target::MetricAtMost(0.85),
            ],
        )
        .unwrap();
        assert_eq!(ops[0].coverage, Some(1.0));
        assert!(!ops[1].reachable);
        assert!((ops[2].value.unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(ops[3].coverage, Some(1.0));
    }

    #[test]
    fn error_score_gives_zero_risk_below_error_rate() {
        let s = Shape::new(1, 10).unwrap();
        let gt = GroundTruthMask::new(s, vec![1, 0, 1, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        let pred = ProbMap::new(s, vec![0.9, 0.1, 0.1, 0.9, 0.1, 0.2, 0.8, 0.3, 0.4, 0.1]).unwrap();
        let err: Vec<f64> = crate::metrics::auc::error_indicator(&pred, &gt)
            .unwrap()
            .iter()
            .map(|&e| e as u8 as f64)
            .collect();
        let score = UncertaintyMap::new(s, err, UncertaintyKind::ConfidenceAwareScore).unwrap();
        let inp = [CurveInput { score: &score, pred: &pred, gt: &gt }];
        let c = risk_coverage_curve(&inp, MetricKind::ErrorRate, &default_grid()).unwrap();
        for p in &c.points {
            // below 10% coverage nothing is accepted yet
            if p.coverage >= 0.1 && p.coverage <= 0.8 {
                assert_eq!(p.value, Some(0.0));
            }
        }
        assert_eq!(c.value_at(1.0), Some(0.2));
        assert_eq!(c.points[0].value, None);
    }
}
