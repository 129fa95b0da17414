//! Dataset-level evaluation: every scalar metric per image and pooled,
//! risk-coverage curves, the reliability table and operating points.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::calibration::{ece, AccuracyMode, ReliabilityTable, DEFAULT_BINS};
use crate::deferral::{DeferralF1, DeferralModel};
use crate::error::{Error, Result};
use crate::maps::{GroundTruthMask, ProbMap, UncertaintyMap};
use crate::metrics::{
    self, bootstrap_ci, default_grid, error_indicator, operating_points, risk_coverage_curve,
    roc_auc, roc_auc_binned, BootstrapCi, Confusion, CurveInput, MetricKind, OperatingPoint,
    RiskCoverageCurve, Target, DEFAULT_AUC_BINS,
};
use crate::par;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Aggregated outputs and labels of one image.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    pub mean: ProbMap,
    pub unc: Option<UncertaintyMap>,
    pub gt: GroundTruthMask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    #[default]
    Exact,
    Binned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingTarget {
    pub metric: MetricKind,
    pub target: Target,
}

pub fn default_targets() -> Vec<OperatingTarget> {
    vec![
        OperatingTarget {
            metric: MetricKind::Dice,
            target: Target::MetricAtLeast(0.82),
        },
        OperatingTarget {
            metric: MetricKind::Dice,
            target: Target::Coverage(0.90),
        },
        OperatingTarget {
            metric: MetricKind::Dice,
            target: Target::Coverage(0.75),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub method: String,
    pub model: Option<DeferralModel>,
    pub ece_bins: usize,
    pub accuracy_mode: AccuracyMode,
    pub auc_mode: AucMode,
    pub grid: Vec<f64>,
    pub targets: Vec<OperatingTarget>,
    pub bootstrap_resamples: Option<usize>,
    pub bootstrap_level: f64,
    pub seed: u64,
    /// How TTA planes were aligned, when known.
    pub alignment: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: "unspecified".into(),
            model: None,
            ece_bins: DEFAULT_BINS,
            accuracy_mode: AccuracyMode::PositiveFrequency,
            auc_mode: AucMode::Exact,
            grid: default_grid(),
            targets: default_targets(),
            bootstrap_resamples: None,
            bootstrap_level: 0.95,
            seed: 0,
            alignment: None,
        }
    }
}

/// Scalar metrics of one image or of a pooled set. Optional fields are
/// absent when the input lacks what they need or they are undefined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unc_auroc: Option<f64>,
    pub error_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_rate_accepted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err: Option<f64>,
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deferral_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deferral_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deferral_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub pixels: usize,
    #[serde(flatten)]
    pub scalars: Scalars,
    /// Range of the score the policy thresholds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_max: Option<f64>,
    pub empty_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub pixel: Scalars,
    pub image_mean: Scalars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledOperatingPoint {
    pub metric: MetricKind,
    #[serde(flatten)]
    pub point: OperatingPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub method: String,
    pub entropy_base: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub alignment: Option<String>,
    pub conventions: Vec<String>,
    pub notes: Vec<String>,
    pub config: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metadata: Metadata,
    pub images: Vec<ImageReport>,
    pub pooled: Pooled,
    pub reliability: ReliabilityTable,
    pub curves: Vec<RiskCoverageCurve>,
    pub operating_points: Vec<LabeledOperatingPoint>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub bootstrap: BTreeMap<String, BootstrapCi>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn curve(&self, metric: MetricKind) -> Option<&RiskCoverageCurve> {
        self.curves.iter().find(|c| c.metric == metric)
    }
}

fn conventions(cfg: &EvalConfig) -> Vec<String> {
    vec![
        "entropy and mutual information in nats".into(),
        "hard prediction is p > 0.5".into(),
        "pixels with score equal to the threshold are accepted".into(),
        "percentiles interpolate linearly on (n - 1)-scaled ranks".into(),
        "dice and iou are 1 when prediction and ground truth are both empty".into(),
        "deferral precision/recall are 0 on empty denominators".into(),
        format!(
            "reliability accuracy is {}",
            match cfg.accuracy_mode {
                AccuracyMode::PositiveFrequency => "the positive-label frequency",
                AccuracyMode::Correctness => "the fraction of correct hard predictions",
            }
        ),
        "risk-coverage accepts lowest scores first, ties by image then row-major index".into(),
        "AUCC extends each curve to coverage 0 with its first defined value".into(),
        format!(
            "pooled metrics are reported pixel-pooled and as the mean over images; AUC is {}",
            match cfg.auc_mode {
                AucMode::Exact => "exact (midrank ties)",
                AucMode::Binned => "binned (approximate)",
            }
        ),
    ]
}

struct ImageWork {
    report: ImageReport,
    confusion: Confusion,
    accepted: Confusion,
    f1: Option<DeferralF1>,
    errors: Vec<bool>,
    score: Option<UncertaintyMap>,
    notes: Vec<String>,
}

pub fn evaluate(images: &[EvalImage], cfg: &EvalConfig) -> Result<EvaluationReport> {
    if images.is_empty() {
        return Err(Error::domain("nothing to evaluate"));
    }
    let with_unc = images.iter().filter(|i| i.unc.is_some()).count();
    if with_unc != 0 && with_unc != images.len() {
        return Err(Error::domain(
            "uncertainty maps must be given for every image or for none",
        ));
    }
    if let Some(m) = &cfg.model {
        m.validate()?;
        if with_unc == 0 {
            return Err(Error::domain("a deferral model needs uncertainty maps"));
        }
    }
    for im in images {
        im.mean.shape().ensure_same(&im.gt.shape(), &format!("{}: prediction vs ground truth", im.id))?;
        if let Some(u) = &im.unc {
            u.shape().ensure_same(&im.mean.shape(), &format!("{}: uncertainty vs prediction", im.id))?;
        }
    }

    let work = par::map_indices(images.len(), |i| image_work(&images[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut notes: Vec<String> = work.iter().flat_map(|w| w.notes.iter().cloned()).collect();

    let pixel = pooled_pixel(images, &work, cfg, &mut notes)?;
    let image_mean = image_average(&work);

    let preds: Vec<ProbMap> = images.iter().map(|i| i.mean.clone()).collect();
    let gts: Vec<GroundTruthMask> = images.iter().map(|i| i.gt.clone()).collect();
    let reliability = ece(&preds, &gts, cfg.ece_bins, cfg.accuracy_mode)?.table;

    let mut curves = Vec::new();
    let mut ops = Vec::new();
    if with_unc > 0 {
        let inputs: Vec<CurveInput<'_>> = images
            .iter()
            .zip(&work)
            .map(|(im, w)| CurveInput {
                score: w.score.as_ref().expect("score present"),
                pred: &im.mean,
                gt: &im.gt,
            })
            .collect();
        for metric in MetricKind::ALL {
            let c = risk_coverage_curve(&inputs, metric, &cfg.grid)?;
            notes.extend(c.notes.iter().map(|n| format!("curve {}: {n}", metric.name())));
            curves.push(c);
        }
        for t in &cfg.targets {
            let curve = curves.iter().find(|c| c.metric == t.metric).expect("all metrics");
            match operating_points(curve, &[t.target]) {
                Ok(mut p) => ops.push(LabeledOperatingPoint {
                    metric: t.metric,
                    point: p.remove(0),
                }),
                Err(e) => notes.push(format!("operating point {:?}: {e}", t.target)),
            }
        }
    }

    let mut bootstrap = BTreeMap::new();
    if let Some(resamples) = cfg.bootstrap_resamples {
        let series: [(&str, fn(&Scalars) -> Option<f64>); 6] = [
            ("dice", |s| s.dice),
            ("iou", |s| s.iou),
            ("auc", |s| s.auc),
            ("ece", |s| s.ece),
            ("unc_auroc", |s| s.unc_auroc),
            ("err", |s| s.err),
        ];
        for (k, (name, get)) in series.iter().enumerate() {
            let vals: Vec<f64> = work.iter().filter_map(|w| get(&w.report.scalars)).collect();
            if !vals.is_empty() {
                let seed = cfg.seed.wrapping_add(k as u64);
                bootstrap.insert(
                    name.to_string(),
                    bootstrap_ci(&vals, resamples, cfg.bootstrap_level, seed)?,
                );
            }
        }
    }

    let (policy, threshold) = match &cfg.model {
        Some(m) => (Some(m.policy.name().to_string()), m.tau.or(m.alpha)),
        None => (None, None),
    };
    Ok(EvaluationReport {
        metadata: Metadata {
            version: VERSION.into(),
            method: cfg.method.clone(),
            entropy_base: "nats".into(),
            policy,
            threshold,
            alignment: cfg.alignment.clone(),
            conventions: conventions(cfg),
            notes,
            config: cfg.clone(),
        },
        images: work.into_iter().map(|w| w.report).collect(),
        pooled: Pooled { pixel, image_mean },
        reliability,
        curves,
        operating_points: ops,
        bootstrap,
    })
}

fn auc_of(scores: &[f64], labels: &[bool], mode: AucMode, notes: &mut Vec<String>, what: &str) -> Option<f64> {
    let r = match mode {
        AucMode::Exact => roc_auc(scores, labels),
        AucMode::Binned => {
            let (lo, hi) = scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let hi = if hi > lo { hi } else { lo + 1.0 };
            roc_auc_binned(scores, labels, lo, hi, DEFAULT_AUC_BINS).map(|b| {
                notes.push(format!("{what}: binned AUC within {} of exact", b.bound));
                b.auc
            })
        }
    };
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

fn image_work(im: &EvalImage, cfg: &EvalConfig) -> Result<ImageWork> {
    let mut notes = Vec::new();
    let hard = im.mean.hard();
    let confusion = Confusion::from_maps(&hard, &im.gt, None)?;
    let labels: Vec<bool> = (0..im.gt.len()).map(|i| im.gt.is_positive(i)).collect();
    let errors = error_indicator(&im.mean, &im.gt)?;

    let mut s = Scalars {
        dice: Some(confusion.dice()),
        iou: Some(confusion.iou()),
        auc: auc_of(im.mean.values(), &labels, cfg.auc_mode, &mut notes, &format!("{} auc", im.id)),
        ece: Some(
            ece(
                std::slice::from_ref(&im.mean),
                std::slice::from_ref(&im.gt),
                cfg.ece_bins,
                cfg.accuracy_mode,
            )?
            .ece,
        ),
        error_rate: confusion.error_rate(),
        coverage: Some(1.0),
        ..Scalars::default()
    };
    if confusion.both_empty() {
        notes.push(format!("{}: empty prediction and ground truth, dice = iou = 1", im.id));
    }

    let mut accepted = confusion;
    let mut f1 = None;
    let mut score = None;
    let (mut score_min, mut score_max) = (None, None);
    if let Some(u) = &im.unc {
        s.unc_auroc = auc_of(u.values(), &errors, cfg.auc_mode, &mut notes, &format!("{} unc_auroc", im.id));
        let sc = match &cfg.model {
            Some(m) => m.score(u, &im.mean)?,
            None => u.clone(),
        };
        let (lo, hi) = sc.min_max();
        score_min = Some(lo);
        score_max = Some(hi);
        if let Some(m) = &cfg.model {
            let d = m.apply(u, &im.mean)?;
            accepted = Confusion::from_maps(&hard, &im.gt, Some(&d))?;
            let f = crate::deferral::deferral_f1(&d, &im.mean, &im.gt)?;
            s.coverage = Some(d.coverage());
            s.error_rate_accepted = accepted.error_rate();
            s.err = err_of(s.error_rate, s.error_rate_accepted, &mut notes, &im.id);
            s.deferral_f1 = Some(f.f1);
            s.deferral_precision = Some(f.precision);
            s.deferral_recall = Some(f.recall);
            f1 = Some(f);
        }
        score = Some(sc);
    }

    Ok(ImageWork {
        report: ImageReport {
            id: im.id.clone(),
            pixels: im.mean.len(),
            scalars: s,
            score_min,
            score_max,
            empty_ground_truth: im.gt.positives() == 0,
        },
        confusion,
        accepted,
        f1,
        errors,
        score,
        notes,
    })
}

fn err_of(before: Option<f64>, after: Option<f64>, notes: &mut Vec<String>, id: &str) -> Option<f64> {
    match (before, after) {
        (Some(b), Some(a)) => match metrics::err(b, a) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("{id}: {e}"));
                None
            }
        },
        (_, None) => {
            notes.push(format!("{id}: every pixel deferred, ERR undefined"));
            None
        }
        _ => None,
    }
}

fn pooled_pixel(
    images: &[EvalImage],
    work: &[ImageWork],
    cfg: &EvalConfig,
    notes: &mut Vec<String>,
) -> Result<Scalars> {
    let mut all = Confusion::default();
    let mut acc = Confusion::default();
    for w in work {
        all.merge(&w.confusion);
        acc.merge(&w.accepted);
    }
    let probs: Vec<f64> = images.iter().flat_map(|i| i.mean.values().iter().copied()).collect();
    let labels: Vec<bool> = images
        .iter()
        .flat_map(|i| (0..i.gt.len()).map(move |k| i.gt.is_positive(k)))
        .collect();
    let preds: Vec<ProbMap> = images.iter().map(|i| i.mean.clone()).collect();
    let gts: Vec<GroundTruthMask> = images.iter().map(|i| i.gt.clone()).collect();

    let mut s = Scalars {
        dice: Some(all.dice()),
        iou: Some(all.iou()),
        auc: auc_of(&probs, &labels, cfg.auc_mode, notes, "pooled auc"),
        ece: Some(ece(&preds, &gts, cfg.ece_bins, cfg.accuracy_mode)?.ece),
        error_rate: all.error_rate(),
        coverage: Some(1.0),
        ..Scalars::default()
    };
    if images[0].unc.is_some() {
        let unc: Vec<f64> = images
            .iter()
            .flat_map(|i| i.unc.as_ref().unwrap().values().iter().copied())
            .collect();
        let errors: Vec<bool> = work.iter().flat_map(|w| w.errors.iter().copied()).collect();
        s.unc_auroc = auc_of(&unc, &errors, cfg.auc_mode, notes, "pooled unc_auroc");
    }
    if cfg.model.is_some() {
        let total = all.total();
        s.coverage = Some(acc.total() as f64 / total as f64);
        s.error_rate_accepted = acc.error_rate();
        s.err = err_of(s.error_rate, s.error_rate_accepted, notes, "pooled");
        let (mut d, mut de, mut e) = (0, 0, 0);
        for f in work.iter().filter_map(|w| w.f1) {
            d += f.deferred;
            de += f.deferred_errors;
            e += f.errors;
        }
        let f = DeferralF1::from_counts(d, de, e);
        s.deferral_f1 = Some(f.f1);
        s.deferral_precision = Some(f.precision);
        s.deferral_recall = Some(f.recall);
    }
    Ok(s)
}

fn image_average(work: &[ImageWork]) -> Scalars {
    let mean = |get: fn(&Scalars) -> Option<f64>| {
        let v: Vec<f64> = work.iter().filter_map(|w| get(&w.report.scalars)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Scalars {
        dice: mean(|s| s.dice),
        iou: mean(|s| s.iou),
        auc: mean(|s| s.auc),
        ece: mean(|s| s.ece),
        unc_auroc: mean(|s| s.unc_auroc),
        error_rate: mean(|s| s.error_rate),
        error_rate_accepted: mean(|s| s.error_rate_accepted),
        err: mean(|s| s.err),
        coverage: mean(|s| s.coverage),
        deferral_f1: mean(|s| s.deferral_f1),
        deferral_precision: mean(|s| s.deferral_precision),
        deferral_recall: mean(|s| s.deferral_recall),
    }
}
