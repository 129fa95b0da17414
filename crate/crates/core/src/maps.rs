//! Per-pixel planes and prediction stacks.
//!
//! All planes are row-major and validated on construction; once built they
//! are immutable, so the rest of the crate can rely on their invariants.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::numeric;
use crate::uncertainty::GeomTransform;

/// Slack allowed on the analytic upper bounds of uncertainty values.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty plane {height}x{width}")));
        }
        Ok(Shape { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn ensure_same(&self, other: &Shape, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {self} vs {other}")))
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

fn check_len(shape: Shape, n: usize) -> Result<()> {
    if shape.len() != n {
        return Err(Error::shape(format!(
            "{shape} plane needs {} values, got {n}",
            shape.len()
        )));
    }
    Ok(())
}

fn check_probabilities(values: &[f64], what: &str) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what}[{i}] = {v}")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{what}[{i}] = {v} is not in [0, 1]")));
        }
    }
    Ok(())
}

macro_rules! plane_accessors {
    ($t:ty, $elem:ty, $field:ident) => {
        impl $t {
            pub fn shape(&self) -> Shape {
                self.shape
            }
            pub fn height(&self) -> usize {
                self.shape.height
            }
            pub fn width(&self) -> usize {
                self.shape.width
            }
            pub fn len(&self) -> usize {
                self.$field.len()
            }
            pub fn is_empty(&self) -> bool {
                self.$field.is_empty()
            }
            pub fn get(&self, row: usize, col: usize) -> $elem {
                self.$field[row * self.shape.width + col]
            }
        }
    };
}

/// Per-pixel probability of the positive class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    shape: Shape,
    values: Vec<f64>,
}

plane_accessors!(ProbMap, f64, values);

impl ProbMap {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        check_len(shape, values.len())?;
        check_probabilities(&values, "probability")?;
        Ok(ProbMap { shape, values })
    }

    /// Caller guarantees every value is a probability.
    pub(crate) fn from_trusted(shape: Shape, values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        ProbMap { shape, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Hard prediction `p > 0.5`.
    pub fn hard(&self) -> BinaryMap {
        BinaryMap {
            shape: self.shape,
            values: self.values.iter().map(|&p| p > 0.5).collect(),
        }
    }
}

/// Per-pixel logits; always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    shape: Shape,
    values: Vec<f64>,
}

plane_accessors!(LogitMap, f64, values);

impl LogitMap {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        check_len(shape, values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit[{i}] = {v}")));
        }
        Ok(LogitMap { shape, values })
    }

    /// Logits of clamped probabilities.
    pub fn from_probs(p: &ProbMap) -> Self {
        LogitMap {
            shape: p.shape,
            values: p.values.iter().map(|&v| numeric::logit(v)).collect(),
        }
    }

    pub fn to_probs(&self) -> ProbMap {
        ProbMap::from_trusted(
            self.shape,
            self.values.iter().map(|&z| numeric::sigmoid(z)).collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Binary labels, stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    shape: Shape,
    values: Vec<u8>,
}

plane_accessors!(GroundTruthMask, u8, values);

impl GroundTruthMask {
    pub fn new(shape: Shape, values: Vec<u8>) -> Result<Self> {
        check_len(shape, values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::OutOfRange(format!("label[{i}] = {v} is not 0 or 1")));
        }
        Ok(GroundTruthMask { shape, values })
    }

    pub fn from_bools(shape: Shape, labels: &[bool]) -> Result<Self> {
        Self::new(shape, labels.iter().map(|&b| b as u8).collect())
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn is_positive(&self, idx: usize) -> bool {
        self.values[idx] == 1
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// A generic binary plane, used for hard predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    shape: Shape,
    values: Vec<bool>,
}

plane_accessors!(BinaryMap, bool, values);

impl BinaryMap {
    pub fn new(shape: Shape, values: Vec<bool>) -> Result<Self> {
        check_len(shape, values.len())?;
        Ok(BinaryMap { shape, values })
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    MutualInformation,
    Variance,
    Entropy,
    ConfidenceAwareScore,
}

impl UncertaintyKind {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::MutualInformation => "mutual_information",
            UncertaintyKind::Variance => "variance",
            UncertaintyKind::Entropy => "entropy",
            UncertaintyKind::ConfidenceAwareScore => "confidence_aware_score",
        }
    }

    /// Analytic upper bound of the kind, if it has one.
    pub fn upper_bound(self) -> Option<f64> {
        match self {
            UncertaintyKind::Variance => Some(0.25),
            UncertaintyKind::MutualInformation | UncertaintyKind::Entropy => {
                Some(std::f64::consts::LN_2)
            }
            UncertaintyKind::ConfidenceAwareScore => None,
        }
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for UncertaintyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mutual_information" | "mi" => Ok(UncertaintyKind::MutualInformation),
            "variance" | "var" => Ok(UncertaintyKind::Variance),
            "entropy" | "ent" => Ok(UncertaintyKind::Entropy),
            "confidence_aware_score" | "score" => Ok(UncertaintyKind::ConfidenceAwareScore),
            other => Err(Error::domain(format!("unknown uncertainty kind '{other}'"))),
        }
    }
}

/// Nonnegative per-pixel uncertainty (or deferral score).
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    shape: Shape,
    values: Vec<f64>,
    kind: UncertaintyKind,
}

plane_accessors!(UncertaintyMap, f64, values);

impl UncertaintyMap {
    pub fn new(shape: Shape, values: Vec<f64>, kind: UncertaintyKind) -> Result<Self> {
        check_len(shape, values.len())?;
        let bound = kind.upper_bound().map(|b| b + BOUND_SLACK);
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{kind}[{i}] = {v}")));
            }
            if v < 0.0 {
                return Err(Error::OutOfRange(format!("{kind}[{i}] = {v} is negative")));
            }
            if let Some(b) = bound {
                if v > b {
                    return Err(Error::OutOfRange(format!(
                        "{kind}[{i}] = {v} exceeds its bound {b}"
                    )));
                }
            }
        }
        Ok(UncertaintyMap { shape, values, kind })
    }

    pub fn kind(&self) -> UncertaintyKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Accept (`true`) / defer (`false`) per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionMap {
    shape: Shape,
    accept: Vec<bool>,
}

plane_accessors!(DecisionMap, bool, accept);

impl DecisionMap {
    pub fn new(shape: Shape, accept: Vec<bool>) -> Result<Self> {
        check_len(shape, accept.len())?;
        Ok(DecisionMap { shape, accept })
    }

    pub fn all_accept(shape: Shape) -> Self {
        DecisionMap {
            shape,
            accept: vec![true; shape.len()],
        }
    }

    pub fn accepted(&self) -> &[bool] {
        &self.accept
    }

    #[inline]
    pub fn is_accepted(&self, idx: usize) -> bool {
        self.accept[idx]
    }

    pub fn accepted_count(&self) -> usize {
        self.accept.iter().filter(|&&a| a).count()
    }

    pub fn deferred_count(&self) -> usize {
        self.len() - self.accepted_count()
    }

    /// Fraction of accepted pixels.
    pub fn coverage(&self) -> f64 {
        self.accepted_count() as f64 / self.len() as f64
    }
}

/// `c = 2 |p - 0.5|` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    shape: Shape,
    values: Vec<f64>,
}

plane_accessors!(ConfidenceMap, f64, values);

impl ConfidenceMap {
    pub(crate) fn from_trusted(shape: Shape, values: Vec<f64>) -> Self {
        ConfidenceMap { shape, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    McDropout,
    Tta,
    Ensemble,
    #[default]
    Other,
}

impl SourceTag {
    pub fn name(self) -> &'static str {
        match self {
            SourceTag::McDropout => "mc_dropout",
            SourceTag::Tta => "tta",
            SourceTag::Ensemble => "ensemble",
            SourceTag::Other => "other",
        }
    }
}

/// `T` per-pass probability planes of one image, stored pass-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStack {
    passes: usize,
    shape: Shape,
    values: Vec<f64>,
    source: SourceTag,
    transforms: Option<Vec<GeomTransform>>,
}

impl PredictionStack {
    pub fn new(
        passes: usize,
        shape: Shape,
        values: Vec<f64>,
        source: SourceTag,
        transforms: Option<Vec<GeomTransform>>,
    ) -> Result<Self> {
        if passes == 0 {
            return Err(Error::domain("prediction stack has no passes"));
        }
        if values.len() != passes * shape.len() {
            return Err(Error::shape(format!(
                "{passes} planes of {shape} need {} values, got {}",
                passes * shape.len(),
                values.len()
            )));
        }
        check_probabilities(&values, "stack")?;
        if let Some(ids) = &transforms {
            if source != SourceTag::Tta {
                return Err(Error::domain(format!(
                    "transform ids given for a {} stack",
                    source.name()
                )));
            }
            check_transform_ids(ids, passes)?;
            if ids.iter().any(|t| t.is_rotation()) && !shape.is_square() {
                return Err(Error::shape(format!(
                    "rotated TTA planes require a square shape, got {shape}"
                )));
            }
        }
        Ok(PredictionStack {
            passes,
            shape,
            values,
            source,
            transforms,
        })
    }

    /// Builds a stack from separate planes.
    pub fn from_planes(
        planes: &[ProbMap],
        source: SourceTag,
        transforms: Option<Vec<GeomTransform>>,
    ) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::domain("prediction stack has no passes"))?;
        let shape = first.shape();
        let mut values = Vec::with_capacity(planes.len() * shape.len());
        for p in planes {
            shape.ensure_same(&p.shape(), "stack planes")?;
            values.extend_from_slice(p.values());
        }
        Self::new(planes.len(), shape, values, source, transforms)
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn transforms(&self) -> Option<&[GeomTransform]> {
        self.transforms.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, t: usize) -> &[f64] {
        let n = self.shape.len();
        &self.values[t * n..(t + 1) * n]
    }
}

pub(crate) fn check_transform_ids(ids: &[GeomTransform], passes: usize) -> Result<()> {
    if ids.len() != passes {
        return Err(Error::domain(format!(
            "{} transform ids for {passes} passes",
            ids.len()
        )));
    }
    for (i, t) in ids.iter().enumerate() {
        if ids[..i].contains(t) {
            return Err(Error::domain(format!("duplicate transform id '{}'", t.name())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(h: usize, w: usize) -> Shape {
        Shape::new(h, w).unwrap()
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(s(1, 2), vec![0.0, 1.0]).is_ok());
        assert!(matches!(
            ProbMap::new(s(1, 2), vec![0.0, 1.5]),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            ProbMap::new(s(1, 2), vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(ProbMap::new(s(2, 2), vec![0.0]), Err(Error::Shape(_))));
        assert!(Shape::new(0, 3).is_err());
    }

    #[test]
    fn uncertainty_bounds_per_kind() {
        let sh = s(1, 1);
        assert!(UncertaintyMap::new(sh, vec![0.25], UncertaintyKind::Variance).is_ok());
        assert!(UncertaintyMap::new(sh, vec![0.26], UncertaintyKind::Variance).is_err());
        assert!(UncertaintyMap::new(sh, vec![0.7], UncertaintyKind::Entropy).is_err());
        assert!(UncertaintyMap::new(sh, vec![0.7], UncertaintyKind::ConfidenceAwareScore).is_ok());
        assert!(UncertaintyMap::new(sh, vec![-1e-3], UncertaintyKind::ConfidenceAwareScore).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(GroundTruthMask::new(s(1, 3), vec![0, 1, 1]).is_ok());
        assert!(matches!(
            GroundTruthMask::new(s(1, 3), vec![0, 1, 255]),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn decision_coverage() {
        let d = DecisionMap::new(s(2, 2), vec![true, false, true, true]).unwrap();
        assert_eq!(d.accepted_count(), 3);
        assert_eq!(d.deferred_count(), 1);
        assert_eq!(d.coverage(), 0.75);
    }

    #[test]
    fn stack_transform_ids_checked() {
        let sh = s(2, 2);
        let vals = vec![0.5; 8];
        let ok = PredictionStack::new(
            2,
            sh,
            vals.clone(),
            SourceTag::Tta,
            Some(vec![GeomTransform::Identity, GeomTransform::Rot90]),
        );
        assert!(ok.is_ok());
        let dup = PredictionStack::new(
            2,
            sh,
            vals.clone(),
            SourceTag::Tta,
            Some(vec![GeomTransform::Hflip, GeomTransform::Hflip]),
        );
        assert!(matches!(dup, Err(Error::Domain(_))));
        let wrong_len = PredictionStack::new(
            2,
            sh,
            vals.clone(),
            SourceTag::Tta,
            Some(vec![GeomTransform::Hflip]),
        );
        assert!(wrong_len.is_err());
        let not_tta = PredictionStack::new(
            2,
            sh,
            vals,
            SourceTag::McDropout,
            Some(vec![GeomTransform::Identity, GeomTransform::Hflip]),
        );
        assert!(not_tta.is_err());
        let rect = PredictionStack::new(
            2,
            s(2, 3),
            vec![0.5; 12],
            SourceTag::Tta,
            Some(vec![GeomTransform::Identity, GeomTransform::Rot90]),
        );
        assert!(matches!(rect, Err(Error::Shape(_))));
    }

    #[test]
    fn logit_map_round_trip_inside_clamp() {
        let p = ProbMap::new(s(1, 3), vec![0.2, 0.5, 0.9]).unwrap();
        let back = LogitMap::from_probs(&p).to_probs();
        for (a, b) in p.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(LogitMap::new(s(1, 1), vec![f64::INFINITY]).is_err());
    }
}
