use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::maps::{BinaryMap, DecisionMap, GroundTruthMask};

/// Pixel confusion counts, optionally restricted to accepted pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_maps(
        pred: &BinaryMap,
        gt: &GroundTruthMask,
        roi: Option<&DecisionMap>,
    ) -> Result<Self> {
        pred.shape().ensure_same(&gt.shape(), "prediction vs ground truth")?;
        if let Some(r) = roi {
            pred.shape().ensure_same(&r.shape(), "prediction vs decision")?;
        }
        let mut c = Confusion::default();
        for (i, &p) in pred.values().iter().enumerate() {
            if roi.is_some_and(|r| !r.is_accepted(i)) {
                continue;
            }
            c.add(p, gt.is_positive(i));
        }
        Ok(c)
    }

    #[inline]
    pub fn add(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn errors(&self) -> u64 {
        self.fp + self.fn_
    }

    /// Prediction and ground truth are both empty.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `2TP / (2TP + FP + FN)`; 1.0 when both sets are empty.
    pub fn dice(&self) -> f64 {
        crate::deferral::dice_from_counts(self.tp, self.fp, self.fn_)
    }

    /// `TP / (TP + FP + FN)`; 1.0 when both sets are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// Fraction of misclassified pixels, `None` on an empty set.
    pub fn error_rate(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.errors() as f64 / n as f64)
    }
}

pub fn dice(pred: &BinaryMap, gt: &GroundTruthMask, roi: Option<&DecisionMap>) -> Result<f64> {
    Ok(Confusion::from_maps(pred, gt, roi)?.dice())
}

pub fn iou(pred: &BinaryMap, gt: &GroundTruthMask, roi: Option<&DecisionMap>) -> Result<f64> {
    Ok(Confusion::from_maps(pred, gt, roi)?.iou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Shape;

    fn maps(pred: &[bool], gt: &[u8]) -> (BinaryMap, GroundTruthMask) {
        let s = Shape::new(1, pred.len()).unwrap();
        (
            BinaryMap::new(s, pred.to_vec()).unwrap(),
            GroundTruthMask::new(s, gt.to_vec()).unwrap(),
        )
    }

    #[test]
    fn hand_counts() {
        // TP = 2, FP = 1, FN = 1
        let (p, g) = maps(&[true, true, true, false, false], &[1, 1, 0, 1, 0]);
        assert!((dice(&p, &g, None).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&p, &g, None).unwrap(), 0.5);
    }

    #[test]
    fn conventions() {
        let (p, g) = maps(&[false, false], &[0, 0]);
        assert_eq!(dice(&p, &g, None).unwrap(), 1.0);
        assert_eq!(iou(&p, &g, None).unwrap(), 1.0);
        let (p, g) = maps(&[true, false], &[0, 1]);
        assert_eq!(dice(&p, &g, None).unwrap(), 0.0);
        assert_eq!(iou(&p, &g, None).unwrap(), 0.0);
        let (p, g) = maps(&[true, false, true], &[1, 0, 1]);
        assert_eq!(dice(&p, &g, None).unwrap(), 1.0);
    }

    #[test]
    fn roi_restricts_pixels() {
        let (p, g) = maps(&[true, true, false], &[1, 0, 1]);
        let roi = DecisionMap::new(p.shape(), vec![true, false, false]).unwrap();
        assert_eq!(dice(&p, &g, Some(&roi)).unwrap(), 1.0);
        let c = Confusion::from_maps(&p, &g, Some(&roi)).unwrap();
        assert_eq!(c.error_rate(), Some(0.0));
    }

    #[test]
    fn dice_iou_identity() {
        let c = Confusion { tp: 37, fp: 11, fn_: 5, tn: 100 };
        let (d, j) = (c.dice(), c.iou());
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-15);
        assert!(j <= d);
    }
}
