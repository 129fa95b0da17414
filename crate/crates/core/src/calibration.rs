//! Temperature scaling, expected calibration error and reliability tables.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::maps::{GroundTruthMask, LogitMap, ProbMap};
use crate::numeric::{sigmoid, softplus};
use crate::par;

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 100.0;
pub const DEFAULT_BINS: usize = 15;

/// Logits smaller than this in magnitude everywhere make the objective flat.
const FLAT_LOGIT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureModel {
    #[serde(rename = "T")]
    pub t: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub fitted_on: String,
    pub flat: bool,
}

impl TemperatureModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && self.t >= MIN_TEMPERATURE) {
            return Err(Error::domain(format!(
                "temperature {} below {MIN_TEMPERATURE}",
                self.t
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TemperatureModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Flattened `(logit, label)` pairs of a calibration set.
struct Pairs {
    z: Vec<f64>,
    y: Vec<f64>,
}

impl Pairs {
    fn new(logits: &[LogitMap], gt: &[GroundTruthMask]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::domain("empty calibration set"));
        }
        if logits.len() != gt.len() {
            return Err(Error::shape(format!(
                "{} logit maps vs {} masks",
                logits.len(),
                gt.len()
            )));
        }
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (l, g) in logits.iter().zip(gt) {
            l.shape().ensure_same(&g.shape(), "logits vs ground truth")?;
            z.extend_from_slice(l.values());
            y.extend(g.values().iter().map(|&v| v as f64));
        }
        Ok(Pairs { z, y })
    }

    /// Mean BCE of `sigmoid(beta z)`.
    fn nll(&self, beta: f64) -> f64 {
        let s = par::sum_chunks(self.z.len(), |r| {
            r.map(|i| {
                let a = beta * self.z[i];
                softplus(a) - self.y[i] * a
            })
            .sum()
        });
        s / self.z.len() as f64
    }

    /// First and second derivative of [`Pairs::nll`] in `beta`.
    fn derivatives(&self, beta: f64) -> (f64, f64) {
        let parts = par::map_chunks(self.z.len(), |r| {
            let (mut g, mut h) = (0.0, 0.0);
            for i in r {
                let z = self.z[i];
                let s = sigmoid(beta * z);
                g += (s - self.y[i]) * z;
                h += s * (1.0 - s) * z * z;
            }
            (g, h)
        });
        let n = self.z.len() as f64;
        let (g, h) = parts
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (g, h)| (a + g, b + h));
        (g / n, h / n)
    }
}

/// Fits one temperature `T` minimising mean BCE of `sigmoid(z / T)`.
///
/// The objective is convex in `beta = 1 / T`, so the minimiser is the root
/// of its monotone derivative on `[1 / MAX_TEMPERATURE, 1 / MIN_TEMPERATURE]`,
/// found by Newton steps inside a shrinking bisection bracket.
pub fn fit_temperature(logits: &[LogitMap], gt: &[GroundTruthMask]) -> Result<TemperatureModel> {
    let pairs = Pairs::new(logits, gt)?;
    let mut fp = Fingerprint::new();
    fp.tag("calibration-set");
    for (l, g) in logits.iter().zip(gt) {
        fp.floats(l.values()).bytes(g.values());
    }
    let fitted_on = fp.finish();

    let nll_before = pairs.nll(1.0);
    let max_abs = pairs.z.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    if max_abs <= FLAT_LOGIT {
        return Ok(TemperatureModel {
            t: 1.0,
            nll_before,
            nll_after: nll_before,
            fitted_on,
            flat: true,
        });
    }

    let beta = solve_beta(&pairs);
    let mut t = 1.0 / beta;
    let mut nll_after = pairs.nll(beta);
    if nll_after > nll_before {
        // Only reachable through rounding when T = 1 is already optimal.
        t = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureModel {
        t,
        nll_before,
        nll_after,
        fitted_on,
        flat: false,
    })
}

fn solve_beta(pairs: &Pairs) -> f64 {
    let (mut lo, mut hi) = (1.0 / MAX_TEMPERATURE, 1.0 / MIN_TEMPERATURE);
    if pairs.derivatives(lo).0 >= 0.0 {
        return lo;
    }
    if pairs.derivatives(hi).0 <= 0.0 {
        return hi;
    }
    let mut beta = 1.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let (g, h) = pairs.derivatives(beta);
        if g == 0.0 {
            return beta;
        }
        if g < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        let newton = beta - g / h;
        let next = if h > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - beta).abs() <= 1e-14 * beta || hi - lo <= 1e-14 * hi {
            return next;
        }
        beta = next;
    }
    beta
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t >= MIN_TEMPERATURE {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "temperature {t} must be finite and >= {MIN_TEMPERATURE}"
        )))
    }
}

/// `sigmoid(z / t)` kept on the same side of 0.5 as `z`, so that hard
/// predictions survive rounding near the decision boundary.
#[inline]
fn scaled(z: f64, t: f64) -> f64 {
    let p = sigmoid(z / t);
    if z > 0.0 && p <= 0.5 {
        0.5f64.next_up()
    } else if z < 0.0 && p >= 0.5 {
        0.5f64.next_down()
    } else {
        p
    }
}

/// `sigmoid(logit(p) / t)` per pixel.
///
/// Works on the distance to the nearer of 0 and 1 (exact in binary64 for
/// either side) and rounds results so `1 - p` is exact too. A value and its
/// mirror image `1 - p` therefore stay mirror images, 0, 0.5 and 1 are fixed,
/// and ties in `|p - 0.5|` survive any temperature.
pub fn apply_temperature(p: &ProbMap, t: f64) -> Result<ProbMap> {
    check_temperature(t)?;
    let values = p
        .values()
        .iter()
        .map(|&v| {
            if v == 0.0 || v == 0.5 || v == 1.0 {
                return v;
            }
            let upper = v > 0.5;
            let m = if upper { 1.0 - v } else { v };
            // unclamped logit; m is in (0, 0.5)
            let z = (m / (1.0 - m)).ln().min(-f64::MIN_POSITIVE);
            let m = scaled(z, t);
            // 0.5 - 2^-53 is the largest value below 0.5 with an exact mirror
            let m = (1.0 - (1.0 - m)).min(0.5 - f64::EPSILON / 2.0);
            if upper {
                1.0 - m
            } else {
                m
            }
        })
        .collect();
    Ok(ProbMap::from_trusted(p.shape(), values))
}

pub fn apply_temperature_logits(z: &LogitMap, t: f64) -> Result<ProbMap> {
    check_temperature(t)?;
    let values = z.values().iter().map(|&v| scaled(v, t)).collect();
    Ok(ProbMap::from_trusted(z.shape(), values))
}

/// What `acc(b)` measures in a reliability bin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Observed frequency of the positive label.
    #[default]
    PositiveFrequency,
    /// Fraction of pixels whose hard prediction matches the label.
    Correctness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub frac: f64,
    /// `None` for empty bins.
    pub conf: Option<f64>,
    pub acc: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub mode: AccuracyMode,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityTable {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,frac,conf,acc,gap\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                b.lo,
                b.hi,
                b.frac,
                opt(b.conf),
                opt(b.acc),
                opt(b.gap)
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ece {
    pub ece: f64,
    pub table: ReliabilityTable,
}

#[derive(Clone, Copy, Default)]
struct BinSums {
    n: u64,
    p: f64,
    hits: u64,
}

#[inline]
pub(crate) fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor() as usize).min(bins - 1)
}

/// Equal-width-bin ECE over every pixel of every image.
pub fn ece(
    pred: &[ProbMap],
    gt: &[GroundTruthMask],
    bins: usize,
    mode: AccuracyMode,
) -> Result<Ece> {
    if bins == 0 {
        return Err(Error::domain("ECE needs at least one bin"));
    }
    if pred.is_empty() {
        return Err(Error::domain("ECE of an empty set"));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} prediction maps vs {} masks",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        p.shape().ensure_same(&g.shape(), "prediction vs ground truth")?;
    }

    let mut sums = vec![BinSums::default(); bins];
    for (p, g) in pred.iter().zip(gt) {
        let parts = par::map_chunks(p.len(), |r| {
            let mut local = vec![BinSums::default(); bins];
            for i in r {
                let v = p.values()[i];
                let label = g.is_positive(i);
                let hit = match mode {
                    AccuracyMode::PositiveFrequency => label,
                    AccuracyMode::Correctness => (v > 0.5) == label,
                };
                let b = &mut local[bin_index(v, bins)];
                b.n += 1;
                b.p += v;
                b.hits += hit as u64;
            }
            local
        });
        for part in parts {
            for (s, l) in sums.iter_mut().zip(part) {
                s.n += l.n;
                s.p += l.p;
                s.hits += l.hits;
            }
        }
    }

    let total: u64 = sums.iter().map(|s| s.n).sum();
    let mut ece = 0.0;
    let mut rows = Vec::with_capacity(bins);
    for (b, s) in sums.iter().enumerate() {
        let frac = s.n as f64 / total as f64;
        let (conf, acc, gap) = if s.n == 0 {
            (None, None, None)
        } else {
            let conf = s.p / s.n as f64;
            let acc = s.hits as f64 / s.n as f64;
            let gap = (conf - acc).abs();
            ece += frac * gap;
            (Some(conf), Some(acc), Some(gap))
        };
        rows.push(ReliabilityBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: s.n,
            frac,
            conf,
            acc,
            gap,
        });
    }
    Ok(Ece {
        ece,
        table: ReliabilityTable { mode, bins: rows },
    })
}
