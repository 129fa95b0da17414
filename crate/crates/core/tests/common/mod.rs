//! Fixtures and end-to-end checks shared by the integration tests and the
//! acceptance harness. Every check returns a short summary on success and a
//! description of the first mismatch otherwise.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use pixdefer::calibration::{apply_temperature, ece, fit_temperature, AccuracyMode};
use pixdefer::deferral::{
    confidence_aware_score, defer_adaptive, defer_confidence_aware, defer_global, deferral_f1,
    fit_threshold, Criterion, Policy, ValidationItem, ValidationSet,
};
use pixdefer::maps::{
    DecisionMap, GroundTruthMask, LogitMap, PredictionStack, ProbMap, Shape, SourceTag,
    UncertaintyKind, UncertaintyMap,
};
use pixdefer::metrics::{self, dice, iou, roc_auc, unc_auroc, Confusion};
use pixdefer::numeric::{binary_entropy, percentile};
use pixdefer::oracle;
use pixdefer::synth::rng::CounterRng;
use pixdefer::synth::{generate_image, CalibrationMode, SynthSpec};
use pixdefer::uncertainty::{mc_aggregate, tta_aggregate, GeomTransform};

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol:e})"))
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

/// A random per-pixel fixture. Every third seed quantises values to tenths
/// so ties and exact 0/1 probabilities are common.
pub struct Fixture {
    pub shape: Shape,
    pub passes: usize,
    pub planes: Vec<f64>,
    pub mean: Vec<f64>,
    pub unc: Vec<f64>,
    pub labels: Vec<bool>,
    pub rng: CounterRng,
}

impl Fixture {
    pub fn new(seed: u64, max_side: usize, max_passes: usize) -> Self {
        let mut r = CounterRng::stream(0xF1C5, seed);
        let height = 1 + r.below(max_side);
        let width = if seed.is_multiple_of(2) { height } else { 1 + r.below(max_side) };
        let passes = 1 + r.below(max_passes);
        let shape = Shape::new(height, width).unwrap();
        let n = shape.len();
        let quantised = seed.is_multiple_of(3);
        let draw = |r: &mut CounterRng| {
            if quantised {
                r.below(11) as f64 / 10.0
            } else {
                r.next_f64()
            }
        };
        let planes: Vec<f64> = (0..passes * n).map(|_| draw(&mut r)).collect();
        let mean: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let unc: Vec<f64> = (0..n).map(|_| draw(&mut r) * 0.5).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.below(3) == 0).collect();
        Fixture {
            shape,
            passes,
            planes,
            mean,
            unc,
            labels,
            rng: r,
        }
    }

    pub fn prob(&self) -> ProbMap {
        ProbMap::new(self.shape, self.mean.clone()).unwrap()
    }

    pub fn gt(&self) -> GroundTruthMask {
        GroundTruthMask::from_bools(self.shape, &self.labels).unwrap()
    }

    pub fn unc_map(&self) -> UncertaintyMap {
        UncertaintyMap::new(self.shape, self.unc.clone(), UncertaintyKind::MutualInformation).unwrap()
    }
}

pub fn check_mc(f: &Fixture) -> Result<(), String> {
    let n = f.shape.len();
    let stack = PredictionStack::new(f.passes, f.shape, f.planes.clone(), SourceTag::McDropout, None)
        .map_err(e)?;
    let agg = mc_aggregate(&stack).map_err(e)?;
    for k in 0..n {
        let px: Vec<f64> = (0..f.passes).map(|t| f.planes[t * n + k]).collect();
        let (m, mi) = oracle::oracle_mi(&px);
        close(agg.mean.values()[k], m, 1e-9, "mc mean")?;
        close(agg.mutual_information.values()[k], mi.max(0.0), 1e-9, "mutual information")?;
    }
    Ok(())
}

pub fn check_tta(f: &Fixture) -> Result<(), String> {
    let n = f.shape.len();
    let pool: &[GeomTransform] = if f.shape.is_square() {
        &GeomTransform::ALL
    } else {
        &GeomTransform::ALL[..3]
    };
    let k = f.passes.min(pool.len());
    let ids: Vec<GeomTransform> = pool[..k].to_vec();
    let mut stored = Vec::with_capacity(k * n);
    for (t, id) in ids.iter().enumerate() {
        stored.extend(id.apply_slice(f.shape, &f.planes[t * n..(t + 1) * n]).map_err(e)?);
    }
    let stack = PredictionStack::new(k, f.shape, stored, SourceTag::Tta, Some(ids)).map_err(e)?;
    let agg = tta_aggregate(&stack).map_err(e)?;
    for px in 0..n {
        let vals: Vec<f64> = (0..k).map(|t| f.planes[t * n + px]).collect();
        let (m, var, ent) = oracle::oracle_tta_var(&vals);
        close(agg.mean.values()[px], m, 1e-9, "tta mean")?;
        close(agg.variance.values()[px], var, 1e-9, "tta variance")?;
        close(agg.entropy.values()[px], ent, 1e-9, "tta entropy")?;
    }
    Ok(())
}

pub fn check_ece(f: &mut Fixture) -> Result<(), String> {
    let bins = 1 + f.rng.below(20);
    let got = ece(&[f.prob()], &[f.gt()], bins, AccuracyMode::PositiveFrequency)
        .map_err(e)?
        .ece;
    let want = oracle::oracle_ece(&f.mean, &f.labels, bins).map_err(e)?;
    close(got, want, 1e-9, &format!("ece with {bins} bins"))
}

pub fn random_decision(f: &mut Fixture) -> DecisionMap {
    let keep = f.rng.below(5);
    let accept = (0..f.shape.len()).map(|_| f.rng.below(5) >= keep).collect();
    DecisionMap::new(f.shape, accept).unwrap()
}

pub fn check_overlap(f: &mut Fixture) -> Result<(), String> {
    let hard = f.prob().hard();
    let gt = f.gt();
    let (d, j) = oracle::oracle_dice(hard.values(), &f.labels);
    close(dice(&hard, &gt, None).map_err(e)?, d, 1e-9, "dice")?;
    close(iou(&hard, &gt, None).map_err(e)?, j, 1e-9, "iou")?;

    let roi = random_decision(f);
    let keep = |v: &[bool]| -> Vec<bool> {
        v.iter().zip(roi.accepted()).filter(|(_, &a)| a).map(|(&x, _)| x).collect()
    };
    let (d, j) = oracle::oracle_dice(&keep(hard.values()), &keep(&f.labels));
    close(dice(&hard, &gt, Some(&roi)).map_err(e)?, d, 1e-9, "dice on accepted")?;
    close(iou(&hard, &gt, Some(&roi)).map_err(e)?, j, 1e-9, "iou on accepted")?;
    Ok(())
}

pub fn check_percentile(f: &mut Fixture) -> Result<(), String> {
    let alphas = [0.0, 50.0, 100.0, f.rng.next_f64() * 100.0, 0.5 * f.rng.below(201) as f64];
    for a in alphas {
        let got = percentile(&f.unc, a).map_err(e)?;
        let want = oracle::oracle_percentile(&f.unc, a).map_err(e)?;
        close(got, want, 1e-9, &format!("percentile {a}"))?;
    }
    Ok(())
}

pub fn check_policies(f: &mut Fixture) -> Result<(), String> {
    let u = f.unc_map();
    let p = f.prob();
    let gt = f.gt();

    let alpha = f.rng.next_f64() * 100.0;
    let got = defer_adaptive(&u, alpha).map_err(e)?;
    let want = oracle::oracle_defer_adaptive(&f.unc, alpha).map_err(e)?;
    ensure(got.accepted() == want.as_slice(), || format!("adaptive decision at alpha {alpha}"))?;

    let tau = f.unc[f.rng.below(f.unc.len())];
    let got = defer_global(&u, tau);
    let want: Vec<bool> = f.unc.iter().map(|&v| v <= tau).collect();
    ensure(got.accepted() == want.as_slice(), || format!("global decision at tau {tau}"))?;

    let s = confidence_aware_score(&u, &p).map_err(e)?;
    for (k, &sv) in s.values().iter().enumerate() {
        let naive = f.unc[k] * (1.0 - 2.0 * (f.mean[k] - 0.5).abs());
        close(sv, naive, 1e-15, "confidence-aware score")?;
    }
    let tau_s = s.values()[f.rng.below(f.unc.len())];
    let got = defer_confidence_aware(&s, tau_s).map_err(e)?;
    let want: Vec<bool> = s.values().iter().map(|&v| v <= tau_s).collect();
    ensure(got.accepted() == want.as_slice(), || "confidence-aware decision".into())?;

    // deferral F1 of an arbitrary decision map
    let d = random_decision(f);
    let got = deferral_f1(&d, &p, &gt).map_err(e)?;
    let deferred: Vec<bool> = d.accepted().iter().map(|&a| !a).collect();
    let errors: Vec<bool> = f
        .mean
        .iter()
        .zip(&f.labels)
        .map(|(&m, &y)| (m > 0.5) != y)
        .collect();
    let (pr, rc, f1) = oracle::oracle_deferral_f1(&deferred, &errors);
    close(got.precision, pr, 1e-12, "deferral precision")?;
    close(got.recall, rc, 1e-12, "deferral recall")?;
    close(got.f1, f1, 1e-12, "deferral f1")?;
    Ok(())
}

pub fn check_auc(seed: u64) -> Result<(), String> {
    let mut r = CounterRng::stream(0xA0C, seed);
    let n = 2 + r.below(oracle::MAX_AUC_SAMPLES - 1);
    let quantised = seed.is_multiple_of(2);
    let scores: Vec<f64> = (0..n)
        .map(|_| if quantised { r.below(20) as f64 } else { r.next_f64() })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| r.below(4) == 0).collect();
    labels[0] = true;
    labels[1] = false;
    let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let got = roc_auc(&scores, &labels).map_err(e)?;
    let want = oracle::oracle_auc_paircount(&pos, &neg).map_err(e)?;
    ensure(got == want, || format!("auc n={n}: {got} vs pair count {want}"))
}

/// Every production routine against its naive oracle on `count` fixtures.
pub fn oracle_equivalence(count: u64) -> Check {
    for seed in 0..count {
        let mut f = Fixture::new(seed, 64, 30);
        let ctx = |m: String| format!("fixture {seed} ({}, T={}): {m}", f.shape, f.passes);
        check_mc(&f).map_err(ctx)?;
        check_tta(&f).map_err(ctx)?;
        check_ece(&mut f).map_err(|m| format!("fixture {seed}: {m}"))?;
        check_overlap(&mut f).map_err(|m| format!("fixture {seed}: {m}"))?;
        check_percentile(&mut f).map_err(|m| format!("fixture {seed}: {m}"))?;
        check_policies(&mut f).map_err(|m| format!("fixture {seed}: {m}"))?;
        check_auc(seed).map_err(|m| format!("fixture {seed}: {m}"))?;
    }
    Ok(format!("{count} fixtures agree with the oracles"))
}

pub fn random_plane(seed: u64, side: usize) -> ProbMap {
    let mut r = CounterRng::stream(0x7F, seed);
    let shape = Shape::new(side, side).unwrap();
    ProbMap::new(shape, (0..shape.len()).map(|_| r.next_f64()).collect()).unwrap()
}

fn bits(m: &ProbMap) -> Vec<u64> {
    m.values().iter().map(|v| v.to_bits()).collect()
}

pub fn transform_exactness(maps: u64, side: usize) -> Check {
    use pixdefer::uncertainty::{apply_transform, invert_transform};
    for seed in 0..maps {
        let m = random_plane(seed, side);
        let want = bits(&m);
        for t in GeomTransform::ALL {
            let back = invert_transform(&apply_transform(&m, t).map_err(e)?, t).map_err(e)?;
            ensure(bits(&back) == want, || format!("map {seed}: {t} not inverted exactly"))?;
        }
        let r = apply_transform(
            &apply_transform(&m, GeomTransform::Rot90).map_err(e)?,
            GeomTransform::Rot270,
        )
        .map_err(e)?;
        ensure(bits(&r) == want, || format!("map {seed}: rot270 after rot90 is not identity"))?;
    }
    Ok(format!("{maps} maps of {side}x{side}, all six transforms bitwise"))
}

pub fn synth_images(spec: &SynthSpec) -> Vec<pixdefer::synth::SynthImage> {
    (0..spec.n_images).map(|i| generate_image(spec, i).unwrap()).collect()
}

fn entropy_map(p: &ProbMap) -> UncertaintyMap {
    let v = p.values().iter().map(|&x| binary_entropy(x).unwrap()).collect();
    UncertaintyMap::new(p.shape(), v, UncertaintyKind::Entropy).unwrap()
}

pub const DECOUPLING_TEMPERATURES: [f64; 4] = [0.25, 0.5, 2.0, 4.0];

/// Largest change of entropy-based Unc-AUROC over the test temperatures.
/// Hard predictions, Dice and IoU must not change at all.
pub fn entropy_auroc_drift(mean: &ProbMap, gt: &GroundTruthMask) -> Result<f64, String> {
    let hard = mean.hard();
    let d0 = dice(&hard, gt, None).map_err(e)?;
    let j0 = iou(&hard, gt, None).map_err(e)?;
    let a0 = unc_auroc(&entropy_map(mean), mean, gt).map_err(e)?;
    let mut drift: f64 = 0.0;
    for t in DECOUPLING_TEMPERATURES {
        let p = apply_temperature(mean, t).map_err(e)?;
        let h = p.hard();
        ensure(h == hard, || format!("T={t} changed hard predictions"))?;
        let d = dice(&h, gt, None).map_err(e)?;
        let j = iou(&h, gt, None).map_err(e)?;
        ensure(d.to_bits() == d0.to_bits() && j.to_bits() == j0.to_bits(), || {
            format!("T={t} changed dice/iou: {d} vs {d0}, {j} vs {j0}")
        })?;
        let a = unc_auroc(&entropy_map(&p), &p, gt).map_err(e)?;
        drift = drift.max((a - a0).abs());
    }
    Ok(drift)
}

/// Rescaling by any temperature leaves hard-prediction metrics bitwise
/// unchanged and entropy-based Unc-AUROC unchanged.
pub fn temperature_decoupling_on(mean: &ProbMap, gt: &GroundTruthMask) -> Result<(), String> {
    let drift = entropy_auroc_drift(mean, gt)?;
    ensure(drift <= 1e-12, || format!("entropy Unc-AUROC moved by {drift:e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbGrid {
    /// Uniform on [0.001, 0.999].
    Continuous,
    /// Uniform on [0, 1).
    FullRange,
    /// Multiples of 1/16: mirror pairs `p`, `1 - p` are exact.
    Dyadic,
    /// Multiples of 0.1: `0.1` and `0.9` are not exact mirrors.
    Decimal,
    /// `2^-k` and `1 - 2^-k` for k in 20..=50.
    NearSaturated,
}

/// Probability map with labels that make both correct and wrong pixels,
/// sprinkled with exact 0 and 1.
pub fn calibration_fixture(seed: u64, grid: ProbGrid) -> (ProbMap, GroundTruthMask) {
    let mut r = CounterRng::stream(0xDEC0, seed);
    let side = 8 + r.below(57);
    let shape = Shape::new(side, side).unwrap();
    let n = shape.len();
    let mut p = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match (r.below(20), grid) {
            (0, _) => [0.0, 1.0][r.below(2)],
            (_, ProbGrid::Continuous) => 0.001 + 0.998 * r.next_f64(),
            (_, ProbGrid::FullRange) => r.next_f64(),
            (_, ProbGrid::Dyadic) => r.below(17) as f64 / 16.0,
            (_, ProbGrid::Decimal) => r.below(11) as f64 / 10.0,
            (_, ProbGrid::NearSaturated) => {
                let v = 2f64.powi(-(20 + r.below(31) as i32));
                if r.below(2) == 0 {
                    v
                } else {
                    1.0 - v
                }
            }
        };
        let wrong = r.below(10) < 3;
        p.push(v);
        y.push((v > 0.5) != wrong);
    }
    (ProbMap::new(shape, p).unwrap(), GroundTruthMask::from_bools(shape, &y).unwrap())
}

pub struct Recovery {
    pub planted: f64,
    pub fitted: f64,
    pub grid: f64,
    pub pixels: usize,
}

/// Fits a temperature on a miscalibrated synthetic set and the grid oracle on
/// the same logits.
pub fn temperature_recovery(mode: CalibrationMode, side: usize, images: usize, seed: u64) -> Result<Recovery, String> {
    let mut spec = SynthSpec::new(side, side, images, seed);
    spec.calibration = mode;
    spec.passes = 2;
    let imgs = synth_images(&spec);
    let logits: Vec<LogitMap> = imgs.iter().map(|i| LogitMap::from_probs(&i.mean)).collect();
    let gts: Vec<GroundTruthMask> = imgs.iter().map(|i| i.gt.clone()).collect();
    let fit = fit_temperature(&logits, &gts).map_err(e)?;
    let z: Vec<f64> = logits.iter().flat_map(|l| l.values().iter().copied()).collect();
    let y: Vec<bool> = gts
        .iter()
        .flat_map(|g| (0..g.len()).map(move |k| g.is_positive(k)))
        .collect();
    let grid = oracle::oracle_temperature_grid(&z, &y).map_err(e)?;
    Ok(Recovery {
        planted: mode.planted_temperature(),
        fitted: fit.t,
        grid: grid.t,
        pixels: z.len(),
    })
}

/// Errors remaining on accepted pixels, and accepted pixels, of one image.
fn accepted_errors(d: &DecisionMap, mean: &ProbMap, gt: &GroundTruthMask) -> (u64, u64) {
    let c = Confusion::from_maps(&mean.hard(), gt, Some(d)).unwrap();
    (c.errors(), c.total())
}

/// The most any deferral of `deferred` pixels can achieve: defer errors first.
pub fn oracle_bound_err(errors: u64, pixels: u64, deferred: u64) -> f64 {
    let removed = errors.min(deferred);
    let before = errors as f64 / pixels as f64;
    if deferred >= pixels {
        return 1.0;
    }
    let after = (errors - removed) as f64 / (pixels - deferred) as f64;
    (before - after) / before
}

pub struct RandomDeferral {
    pub rate: f64,
    /// ERR (error rate on accepted pixels vs all pixels).
    pub err: f64,
    /// Fraction of error pixels that were deferred.
    pub removed: f64,
}

/// Pooled ERR and removed-error fraction when deferring by random scores.
pub fn random_deferral(images: &[pixdefer::synth::SynthImage], means: &[ProbMap], rate: f64, seed: u64) -> RandomDeferral {
    let (mut err_all, mut px_all, mut err_acc, mut px_acc) = (0u64, 0u64, 0u64, 0u64);
    for (k, (im, mean)) in images.iter().zip(means).enumerate() {
        let mut r = CounterRng::stream(seed, k as u64);
        let n = mean.len();
        let scores = UncertaintyMap::new(
            mean.shape(),
            (0..n).map(|_| r.next_f64()).collect(),
            UncertaintyKind::ConfidenceAwareScore,
        )
        .unwrap();
        let d = defer_adaptive(&scores, 100.0 * (1.0 - rate)).unwrap();
        let all = DecisionMap::all_accept(mean.shape());
        let (e0, n0) = accepted_errors(&all, mean, &im.gt);
        let (e1, n1) = accepted_errors(&d, mean, &im.gt);
        err_all += e0;
        px_all += n0;
        err_acc += e1;
        px_acc += n1;
    }
    let before = err_all as f64 / px_all as f64;
    let after = err_acc as f64 / px_acc as f64;
    RandomDeferral {
        rate,
        err: metrics::err(before, after).unwrap(),
        removed: 1.0 - err_acc as f64 / err_all as f64,
    }
}

/// Fits every policy on `val` and checks its ERR on `test` never beats the
/// error-indicator bound at the same deferral count.
pub fn oracle_bound(val: &[pixdefer::synth::SynthImage], test: &[pixdefer::synth::SynthImage]) -> Result<usize, String> {
    let agg = |imgs: &[pixdefer::synth::SynthImage]| -> Vec<(ProbMap, UncertaintyMap)> {
        imgs.iter()
            .map(|i| {
                let a = mc_aggregate(&i.stack).unwrap();
                (a.mean, a.mutual_information)
            })
            .collect()
    };
    let v = agg(val);
    let t = agg(test);
    let items = v
        .iter()
        .zip(val)
        .map(|((m, u), i)| ValidationItem::new(m.clone(), u.clone(), i.gt.clone()).unwrap())
        .collect();
    let vs = ValidationSet::new(items).map_err(e)?;
    let mut checked = 0;
    for policy in [Policy::Global, Policy::Adaptive, Policy::ConfidenceAware] {
        for (criterion, floor) in [(Criterion::MaxF1, None), (Criterion::CoverageDice, Some(0.0))] {
            let model = fit_threshold(&vs, policy, criterion, floor).map_err(e)?.model;
            let (mut e0, mut n0, mut e1, mut n1) = (0, 0, 0, 0);
            for ((m, u), im) in t.iter().zip(test) {
                let d = model.apply(u, m).map_err(e)?;
                let (a, b) = accepted_errors(&DecisionMap::all_accept(m.shape()), m, &im.gt);
                let (c, dd) = accepted_errors(&d, m, &im.gt);
                e0 += a;
                n0 += b;
                e1 += c;
                n1 += dd;
            }
            if n1 == 0 {
                continue;
            }
            let fitted = metrics::err(e0 as f64 / n0 as f64, e1 as f64 / n1 as f64).map_err(e)?;
            let bound = oracle_bound_err(e0, n0, n0 - n1);
            ensure(fitted <= bound + 1e-12, || {
                format!("{policy}/{} ERR {fitted} exceeds bound {bound}", criterion.name())
            })?;
            checked += 1;
        }
    }
    Ok(checked)
}
