//! Aggregation of prediction stacks into a mean map plus uncertainty.
//!
//! MC Dropout stacks yield mutual information (predictive entropy minus the
//! mean per-pass entropy). TTA stacks yield the population variance across
//! aligned planes and the entropy of the mean. Pixels are treated
//! independently throughout.

mod transform;

pub use transform::{apply_transform, invert_transform, GeomTransform};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{
    ConfidenceMap, PredictionStack, ProbMap, Shape, SourceTag, UncertaintyKind, UncertaintyMap,
};
use crate::numeric::entropy_unchecked;
use crate::par;

/// Negative MI below this is treated as a bug rather than rounding.
const MI_NEGATIVE_LIMIT: f64 = -1e-9;

/// How a TTA stack's planes were aligned before aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Planes arrived in transformed orientation and were inverted here.
    InvertedInEngine,
    /// Planes arrived already aligned (no transform ids).
    PreAligned,
}

#[derive(Clone, Debug)]
pub struct McAggregate {
    pub mean: ProbMap,
    pub mutual_information: UncertaintyMap,
}

#[derive(Clone, Debug)]
pub struct TtaAggregate {
    pub mean: ProbMap,
    pub variance: UncertaintyMap,
    pub entropy: UncertaintyMap,
    pub alignment: Alignment,
}

/// Mean prediction and mutual information of an MC Dropout (or ensemble) stack.
pub fn mc_aggregate(stack: &PredictionStack) -> Result<McAggregate> {
    if stack.source() == SourceTag::Tta || stack.transforms().is_some() {
        return Err(Error::domain(
            "MC aggregation of a TTA stack; use tta_aggregate",
        ));
    }
    let shape = stack.shape();
    let n = shape.len();
    let passes = stack.passes();
    let data = stack.values();
    let inv_t = 1.0 / passes as f64;

    let mut mean = vec![0.0; n];
    let mut mi = vec![0.0; n];
    par::fill_chunks2(&mut mean, &mut mi, |off, mean, mi| {
        let len = mean.len();
        let mut sum = vec![0.0; len];
        let mut ent = vec![0.0; len];
        for t in 0..passes {
            let plane = &data[t * n + off..t * n + off + len];
            for k in 0..len {
                sum[k] += plane[k];
                ent[k] += entropy_unchecked(plane[k]);
            }
        }
        for k in 0..len {
            let m = sum[k] * inv_t;
            mean[k] = m;
            mi[k] = entropy_unchecked(m) - ent[k] * inv_t;
        }
    });

    if let Some((i, &v)) = mi
        .iter()
        .enumerate()
        .find(|(_, &v)| v < MI_NEGATIVE_LIMIT)
    {
        return Err(Error::Consistency(format!(
            "mutual information {v} at pixel {i} is below rounding tolerance"
        )));
    }
    for v in &mut mi {
        *v = v.max(0.0);
    }

    Ok(McAggregate {
        mean: ProbMap::from_trusted(shape, mean),
        mutual_information: UncertaintyMap::new(shape, mi, UncertaintyKind::MutualInformation)?,
    })
}

/// Mean, population variance and entropy-of-mean for a TTA stack.
///
/// When the stack carries transform ids its planes are taken to be in
/// transformed orientation and are mapped back through each inverse first.
pub fn tta_aggregate(stack: &PredictionStack) -> Result<TtaAggregate> {
    if matches!(stack.source(), SourceTag::McDropout | SourceTag::Ensemble) {
        return Err(Error::domain(format!(
            "TTA aggregation of a {} stack; use mc_aggregate",
            stack.source().name()
        )));
    }
    let shape = stack.shape();
    let (aligned, alignment) = match stack.transforms() {
        Some(ids) => (align_planes(stack, ids)?, Alignment::InvertedInEngine),
        None => (stack.values().to_vec(), Alignment::PreAligned),
    };
    let (mean, variance, entropy) = tta_stats(shape, stack.passes(), &aligned);
    Ok(TtaAggregate {
        mean: ProbMap::from_trusted(shape, mean),
        variance: UncertaintyMap::new(shape, variance, UncertaintyKind::Variance)?,
        entropy: UncertaintyMap::new(shape, entropy, UncertaintyKind::Entropy)?,
        alignment,
    })
}

fn align_planes(stack: &PredictionStack, ids: &[GeomTransform]) -> Result<Vec<f64>> {
    let shape = stack.shape();
    let mut out = Vec::with_capacity(stack.values().len());
    for (t, id) in ids.iter().enumerate() {
        out.extend(id.inverse().apply_slice(shape, stack.plane(t))?);
    }
    Ok(out)
}

fn tta_stats(shape: Shape, passes: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = shape.len();
    let inv_k = 1.0 / passes as f64;
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    par::fill_chunks2(&mut mean, &mut var, |off, mean, var| {
        let len = mean.len();
        for t in 0..passes {
            let plane = &data[t * n + off..t * n + off + len];
            for k in 0..len {
                mean[k] += plane[k];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_k;
        }
        for t in 0..passes {
            let plane = &data[t * n + off..t * n + off + len];
            for k in 0..len {
                let d = plane[k] - mean[k];
                var[k] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v = (*v * inv_k).min(0.25);
        }
    });
    let entropy = mean.iter().map(|&m| entropy_unchecked(m)).collect();
    (mean, var, entropy)
}

/// Prediction confidence `2 |p - 0.5|`.
#[inline]
pub fn confidence(p: f64) -> f64 {
    2.0 * (p - 0.5).abs()
}

/// Confidence of every pixel of a mean map.
pub fn confidence_map(mean: &ProbMap) -> ConfidenceMap {
    ConfidenceMap::from_trusted(
        mean.shape(),
        mean.values().iter().map(|&p| confidence(p)).collect(),
    )
}
