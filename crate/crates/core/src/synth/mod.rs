//! Deterministic synthetic fixtures with planted structure.
//!
//! Each image gets a smoothed-noise ground truth, an exact set of planted
//! prediction errors, calibrated per-pixel confidences (optionally sharpened
//! or softened by a planted temperature), and per-pass spreads whose
//! uncertainty ranks errors with a chosen strength.
//!
//! The uncertainty/error rank correlation is measured as Somers' D between
//! the uncertainty and the binary error indicator, i.e. `2 AUC - 1`. For a
//! binary variable this is the rank correlation that can actually reach 1.

pub mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryMap, GroundTruthMask, PredictionStack, ProbMap, Shape, SourceTag};
use crate::numeric::{entropy_unchecked, logit, sigmoid};
use crate::par;
use crate::uncertainty::GeomTransform;
use rng::CounterRng;

/// Fraction of ground-truth positives per image.
pub const POSITIVE_FRACTION: f64 = 0.125;
const BLUR_RADIUS: usize = 2;
/// Calibrated distance to the decision boundary is kept in this range.
const W_MIN: f64 = 1e-3;
const W_MAX: f64 = 0.499;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationMode {
    Calibrated,
    /// Logits are `t_plant` times too large (`t_plant > 1`).
    Overconfident { t_plant: f64 },
    /// Logits are `t_plant` times too large with `t_plant < 1`.
    Underconfident { t_plant: f64 },
}

impl CalibrationMode {
    /// The temperature that undoes the planted miscalibration.
    pub fn planted_temperature(self) -> f64 {
        match self {
            CalibrationMode::Calibrated => 1.0,
            CalibrationMode::Overconfident { t_plant } | CalibrationMode::Underconfident { t_plant } => {
                t_plant
            }
        }
    }
}

fn default_source() -> SourceTag {
    SourceTag::McDropout
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub n_images: usize,
    pub error_rate: f64,
    pub unc_error_corr: f64,
    pub calibration: CalibrationMode,
    pub passes: usize,
    pub seed: u64,
    /// `mc_dropout` (aligned passes) or `tta` (planes stored transformed).
    #[serde(default = "default_source")]
    pub source: SourceTag,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, n_images: usize, seed: u64) -> Self {
        SynthSpec {
            height,
            width,
            n_images,
            error_rate: 0.05,
            unc_error_corr: 0.8,
            calibration: CalibrationMode::Calibrated,
            passes: 10,
            seed,
            source: SourceTag::McDropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Shape::new(self.height, self.width)?;
        if self.n_images == 0 || self.passes == 0 {
            return Err(Error::domain("n_images and passes must be >= 1"));
        }
        if !(self.error_rate > 0.0 && self.error_rate < 1.0) {
            return Err(Error::domain(format!(
                "error_rate {} outside (0, 1)",
                self.error_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.unc_error_corr) {
            return Err(Error::domain(format!(
                "unc_error_corr {} is not achievable; supported range is [0, 1]",
                self.unc_error_corr
            )));
        }
        if self.passes < 2 && self.unc_error_corr > 0.0 {
            return Err(Error::domain(
                "a single pass has no spread; unc_error_corr > 0 needs passes >= 2",
            ));
        }
        match self.calibration {
            CalibrationMode::Calibrated => {}
            CalibrationMode::Overconfident { t_plant } if !(t_plant > 1.0 && t_plant <= 2.5) => {
                return Err(Error::domain(format!(
                    "overconfident t_plant {t_plant} must be in (1, 2.5]"
                )))
            }
            CalibrationMode::Underconfident { t_plant } if !(0.1..1.0).contains(&t_plant) => {
                return Err(Error::domain(format!(
                    "underconfident t_plant {t_plant} must be in [0.1, 1)"
                )))
            }
            _ => {}
        }
        match self.source {
            SourceTag::McDropout => {}
            SourceTag::Tta => {
                if self.passes > GeomTransform::ALL.len() {
                    return Err(Error::domain(format!(
                        "TTA fixtures support at most {} passes",
                        GeomTransform::ALL.len()
                    )));
                }
                if self.passes > 3 && self.height != self.width {
                    return Err(Error::shape("TTA fixtures with rotations need square images"));
                }
            }
            other => {
                return Err(Error::domain(format!(
                    "synthetic source must be mc_dropout or tta, got {}",
                    other.name()
                )))
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape {
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub stack: PredictionStack,
    pub gt: GroundTruthMask,
    /// The planted mean prediction before splitting into passes.
    pub mean: ProbMap,
    /// Planted error pixels (`1[mean > 0.5] != gt`).
    pub errors: BinaryMap,
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    spec.validate()?;
    par::map_indices(spec.n_images, |i| generate_image(spec, i))
        .into_iter()
        .collect()
}

/// Image `index` of the fixture, independent of every other image.
pub fn generate_image(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    spec.validate()?;
    let shape = spec.shape();
    let n = shape.len();
    let mut rng = CounterRng::stream(spec.seed, index as u64);

    let labels = ground_truth(shape, &mut rng);
    let errors = plant_errors(n, spec.error_rate, &mut rng);
    let hard: Vec<bool> = labels.iter().zip(&errors).map(|(&y, &e)| y != e).collect();

    let w = boundary_distances(&hard, &errors, &mut rng)?;
    let t_plant = spec.calibration.planted_temperature();
    let mean: Vec<f64> = hard
        .iter()
        .zip(&w)
        .map(|(&h, &w)| {
            let p = if h { 1.0 - w } else { w };
            if t_plant == 1.0 {
                p
            } else {
                sigmoid(t_plant * logit(p))
            }
        })
        .collect();

    let layout = Layout::new(spec.passes);
    let spread = if layout.pairs == 0 {
        vec![0.0; n]
    } else {
        let targets = uncertainty_targets(&mean, &errors, spec, &layout, &mut rng);
        mean.iter()
            .zip(&targets)
            .map(|(&p, &u)| layout.solve(spec.source, p, u))
            .collect()
    };

    let t = spec.passes;
    let mut values = vec![0.0; t * n];
    for i in 0..n {
        let rot = i % t;
        for pass in 0..t {
            let s = layout.sign((pass + rot) % t);
            values[pass * n + i] = (mean[i] + s * spread[i]).clamp(0.0, 1.0);
        }
    }

    let transforms = match spec.source {
        SourceTag::Tta => {
            let ids: Vec<GeomTransform> = GeomTransform::ALL[..t].to_vec();
            for (pass, id) in ids.iter().enumerate() {
                let plane = id.apply_slice(shape, &values[pass * n..(pass + 1) * n])?;
                values[pass * n..(pass + 1) * n].copy_from_slice(&plane);
            }
            Some(ids)
        }
        _ => None,
    };

    Ok(SynthImage {
        stack: PredictionStack::new(t, shape, values, spec.source, transforms)?,
        gt: GroundTruthMask::from_bools(shape, &labels)?,
        mean: ProbMap::new(shape, mean)?,
        errors: BinaryMap::new(shape, errors)?,
    })
}

/// Top `POSITIVE_FRACTION` of box-blurred uniform noise.
fn ground_truth(shape: Shape, rng: &mut CounterRng) -> Vec<bool> {
    let (h, w) = (shape.height, shape.width);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
    let blur_rows = box_blur(&noise, h, w, w, 1);
    let blurred = box_blur(&blur_rows, w, h, 1, w);
    let k = ((POSITIVE_FRACTION * (h * w) as f64).round() as usize).clamp(1, h * w);
    let mut idx: Vec<usize> = (0..h * w).collect();
    idx.sort_unstable_by(|&a, &b| blurred[b].total_cmp(&blurred[a]).then(a.cmp(&b)));
    let mut labels = vec![false; h * w];
    for &i in &idx[..k] {
        labels[i] = true;
    }
    labels
}

/// One-dimensional box mean along lines of length `len`; `step` walks
/// within a line and `stride` between lines.
fn box_blur(src: &[f64], lines: usize, len: usize, stride: usize, step: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for line in 0..lines {
        for j in 0..len {
            let lo = j.saturating_sub(BLUR_RADIUS);
            let hi = (j + BLUR_RADIUS).min(len - 1);
            let sum: f64 = (lo..=hi).map(|k| src[line * stride + k * step]).sum();
            out[line * stride + j * step] = sum / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Exactly `round(rate n)` error pixels, chosen uniformly.
fn plant_errors(n: usize, rate: f64, rng: &mut CounterRng) -> Vec<bool> {
    let m = ((rate * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for k in 0..m {
        let j = k + rng.below(n - k);
        idx.swap(k, j);
    }
    let mut e = vec![false; n];
    for &i in &idx[..m] {
        e[i] = true;
    }
    e
}

/// Distance `w` of the calibrated probability from its hard label.
///
/// Within each hard-prediction group with error rate `r`, a base draw
/// `h = Beta(1, b) / 2` with mean `r` is accepted with probability `2h` for
/// error pixels and `1 - h` for correct ones. The tilted densities make
/// `P(error | w) = w`, which is exactly calibration.
fn boundary_distances(hard: &[bool], errors: &[bool], rng: &mut CounterRng) -> Result<Vec<f64>> {
    let mut b = [0.0; 2];
    for (g, bg) in b.iter_mut().enumerate() {
        let group = hard.iter().filter(|&&h| h as usize == g).count();
        if group == 0 {
            continue;
        }
        let wrong = hard
            .iter()
            .zip(errors)
            .filter(|&(&h, &e)| h as usize == g && e)
            .count();
        let r = wrong as f64 / group as f64;
        if r >= 0.5 {
            return Err(Error::domain(format!(
                "{:.1}% of pixels predicted {g} are errors; calibrated fixtures need < 50%, \
                 lower error_rate",
                100.0 * r
            )));
        }
        *bg = 0.5 / r.max(W_MIN) - 1.0;
    }
    Ok(hard
        .iter()
        .zip(errors)
        .map(|(&h, &e)| {
            let bg = b[h as usize];
            loop {
                let x = 0.5 * rng.beta_one(bg);
                let accept = if e { 2.0 * x } else { 1.0 - x };
                if rng.next_f64() < accept {
                    break x.clamp(W_MIN, W_MAX);
                }
            }
        })
        .collect())
}

/// Target uncertainty per pixel, monotone in a latent score whose ranking
/// of errors has Somers' D equal to `unc_error_corr`.
///
/// The latent is `U + d e` with `U` uniform and `d = 1 - sqrt(1 - rho)`,
/// giving `AUC = 1 - (1 - d)^2 / 2`. It is mapped into `(0, 1)` and scaled
/// by the smallest achievable maximum among pixels ranked at or above, so
/// every target is reachable and the ranking survives exactly.
fn uncertainty_targets(
    mean: &[f64],
    errors: &[bool],
    spec: &SynthSpec,
    layout: &Layout,
    rng: &mut CounterRng,
) -> Vec<f64> {
    let n = mean.len();
    let d = 1.0 - (1.0 - spec.unc_error_corr).sqrt();
    let latent: Vec<f64> = errors
        .iter()
        .map(|&e| rng.next_f64() + if e { d } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));

    let mut targets = vec![0.0; n];
    let mut cap = f64::INFINITY;
    for &i in order.iter().rev() {
        cap = cap.min(layout.max_stat(spec.source, mean[i]));
        targets[i] = (latent[i] + 0.01) / 2.2 * cap;
    }
    targets
}

/// Sign pattern of the passes: `+a, -a, +a, ...`, with one unperturbed pass
/// when the count is odd.
struct Layout {
    passes: usize,
    pairs: usize,
}

impl Layout {
    fn new(passes: usize) -> Self {
        Layout {
            passes,
            pairs: passes / 2,
        }
    }

    fn sign(&self, slot: usize) -> f64 {
        if slot >= 2 * self.pairs {
            0.0
        } else if slot.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    fn mi(&self, p: f64, a: f64) -> f64 {
        let t = self.passes as f64;
        let np = self.pairs as f64;
        let n0 = t - 2.0 * np;
        let hp = entropy_unchecked(p);
        hp - (np * (entropy_unchecked(p + a) + entropy_unchecked(p - a)) + n0 * hp) / t
    }

    fn mi_slope(&self, p: f64, a: f64) -> f64 {
        let d = |x: f64| ((1.0 - x) / x).ln();
        -(self.pairs as f64) * (d(p + a) - d(p - a)) / self.passes as f64
    }

    fn variance(&self, a: f64) -> f64 {
        2.0 * self.pairs as f64 * a * a / self.passes as f64
    }

    fn max_stat(&self, source: SourceTag, p: f64) -> f64 {
        let a = p.min(1.0 - p);
        match source {
            SourceTag::Tta => self.variance(a),
            _ => self.mi(p, a),
        }
    }

    /// Spread `a` whose pass set has statistic `u`.
    fn solve(&self, source: SourceTag, p: f64, u: f64) -> f64 {
        if source == SourceTag::Tta {
            return (u * self.passes as f64 / (2.0 * self.pairs as f64)).sqrt();
        }
        let (mut lo, mut hi) = (0.0, p.min(1.0 - p));
        let mut a = 0.5 * hi;
        for _ in 0..100 {
            let f = self.mi(p, a) - u;
            if f == 0.0 {
                break;
            }
            if f < 0.0 {
                lo = a;
            } else {
                hi = a;
            }
            let step = a - f / self.mi_slope(p, a);
            a = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::unc_auroc;
    use crate::uncertainty::{mc_aggregate, tta_aggregate};

    fn small(rho: f64) -> SynthSpec {
        SynthSpec {
            unc_error_corr: rho,
            ..SynthSpec::new(64, 64, 2, 11)
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(0.5)).unwrap();
        let b = generate(&small(0.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.stack, y.stack);
            assert_eq!(x.gt, y.gt);
        }
    }

    #[test]
    fn planted_counts() {
        let img = generate_image(&small(0.5), 0).unwrap();
        let n = 64 * 64;
        assert_eq!(img.gt.positives(), (0.125 * n as f64).round() as usize);
        let errs = img.errors.values().iter().filter(|&&e| e).count();
        assert_eq!(errs, (0.05 * n as f64).round() as usize);
        let agg = mc_aggregate(&img.stack).unwrap();
        let hard_errs = crate::metrics::error_indicator(&agg.mean, &img.gt).unwrap();
        assert_eq!(hard_errs, img.errors.values());
    }

    #[test]
    fn perfect_correlation_separates() {
        let img = generate_image(&small(1.0), 1).unwrap();
        let agg = mc_aggregate(&img.stack).unwrap();
        assert_eq!(unc_auroc(&agg.mutual_information, &agg.mean, &img.gt).unwrap(), 1.0);
    }

    #[test]
    fn tta_fixture_is_stored_transformed() {
        let spec = SynthSpec {
            source: SourceTag::Tta,
            passes: 6,
            unc_error_corr: 1.0,
            ..SynthSpec::new(32, 32, 1, 5)
        };
        let img = generate_image(&spec, 0).unwrap();
        assert_eq!(img.stack.transforms().unwrap().len(), 6);
        let agg = tta_aggregate(&img.stack).unwrap();
        assert_eq!(unc_auroc(&agg.variance, &agg.mean, &img.gt).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(0.5);
        s.error_rate = 0.0;
        assert!(generate(&s).is_err());
        let mut s = small(1.5);
        s.passes = 4;
        assert!(generate(&s).is_err());
        let mut s = small(0.5);
        s.passes = 1;
        assert!(generate(&s).is_err());
        let mut s = small(0.5);
        s.error_rate = 0.3;
        assert!(matches!(generate(&s), Err(Error::Domain(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let s = SynthSpec {
            calibration: CalibrationMode::Overconfident { t_plant: 2.0 },
            ..small(0.3)
        };
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"mode\":\"overconfident\""));
        assert_eq!(serde_json::from_str::<SynthSpec>(&json).unwrap(), s);
    }
}
