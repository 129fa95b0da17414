use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pixdefer::calibration::{
    apply_temperature, apply_temperature_logits, fit_temperature, TemperatureModel,
};
use pixdefer::deferral::{fit_threshold, Criterion, DeferralModel, ValidationItem, ValidationSet};
use pixdefer::io::{self, DatasetManifest, ManifestEntry};
use pixdefer::maps::{LogitMap, SourceTag};
use pixdefer::metrics::MetricKind;
use pixdefer::report::{evaluate, EvalConfig, VERSION};
use pixdefer::synth::{generate_image, CalibrationMode, SynthSpec};
use serde_json::json;

use crate::load::{self, aggregate, alignment_name, check_kinds, default_kinds, method_for, method_name};
use crate::output::{create_dir, emit, write_json, write_text};
use crate::{
    AggregateArgs, CalibrateApplyArgs, CalibrateCmd, CalibrateFitArgs, Calibration, Cli, Command,
    DeferArgs, EvaluateArgs, FitArgs, SynthArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Aggregate(a) => cmd_aggregate(cli, a),
        Command::Calibrate(CalibrateCmd::Fit(a)) => cmd_calibrate_fit(cli, a),
        Command::Calibrate(CalibrateCmd::Apply(a)) => cmd_calibrate_apply(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Defer(a) => cmd_defer(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn cmd_aggregate(cli: &Cli, a: &AggregateArgs) -> Result<()> {
    let stacks: Vec<(String, PathBuf)> = match &a.data {
        Some(dir) => {
            let m = DatasetManifest::read(dir)?;
            m.verify(dir)?;
            m.images.iter().map(|e| (e.id.clone(), dir.join(&e.stack))).collect()
        }
        None => a.stack.iter().map(|p| (stem(p), p.clone())).collect(),
    };
    if stacks.is_empty() {
        bail!("no stacks to aggregate");
    }
    let first = io::read_stack(&stacks[0].1)?;
    let method = a.method.unwrap_or_else(|| method_for(first.source()));
    let kinds = if a.unc_kind.is_empty() {
        default_kinds(method)
    } else {
        a.unc_kind.clone()
    };
    check_kinds(method, &kinds)?;
    create_dir(&a.out_dir)?;

    // Warm-up pass on the first stack, excluded from the timings.
    aggregate(&first, method, &kinds)?;
    drop(first);

    let mut entries = Vec::new();
    let mut timings = Vec::new();
    for (id, path) in &stacks {
        let stack = io::read_stack(path)?;
        let t0 = Instant::now();
        let agg = aggregate(&stack, method, &kinds)?;
        let secs = t0.elapsed().as_secs_f64();

        let mean_name = format!("{id}_mean.npy");
        io::write_prob_map(&agg.mean, &a.out_dir.join(&mean_name))?;
        let mut unc = serde_json::Map::new();
        for (k, m) in kinds.iter().zip(&agg.maps) {
            let name = format!("{id}_{}.npy", k.name());
            io::write_uncertainty(m, &a.out_dir.join(&name))?;
            unc.insert(k.name().into(), name.into());
        }
        entries.push(json!({
            "id": id,
            "stack": path.display().to_string(),
            "source_tag": stack.source().name(),
            "passes": stack.passes(),
            "alignment": agg.alignment.map(alignment_name),
            "mean": mean_name,
            "uncertainty": unc,
        }));
        timings.push(json!({ "id": id, "seconds": secs }));
    }

    let meta = json!({
        "version": VERSION,
        "method": method_name(method),
        "entropy_base": "nats",
        "uncertainty": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
        "images": entries,
    });
    write_json(&a.out_dir.join("aggregate.json"), &meta)?;
    write_timings(&a.out_dir, cli, timings)?;
    emit(
        cli.format,
        &json!({
            "method": method_name(method),
            "images": stacks.len(),
            "out_dir": a.out_dir.display().to_string(),
        }),
    )
}

fn write_timings(dir: &Path, cli: &Cli, images: Vec<serde_json::Value>) -> Result<()> {
    let total: f64 = images.iter().filter_map(|v| v["seconds"].as_f64()).sum();
    let n = images.len().max(1) as f64;
    write_json(
        &dir.join("timings.json"),
        &json!({
            "threads": cli.threads,
            "warmup_excluded": true,
            "mean_seconds_per_image": total / n,
            "images": images,
        }),
    )
}

fn cmd_calibrate_fit(cli: &Cli, a: &CalibrateFitArgs) -> Result<()> {
    let (logits, gts) = match &a.data {
        Some(dir) => {
            let m = DatasetManifest::read(dir)?;
            m.verify(dir)?;
            let mut logits = Vec::new();
            let mut gts = Vec::new();
            for e in &m.images {
                let Some(l) = &e.logits else {
                    bail!("manifest entry {} has no logits file", e.id);
                };
                logits.push(io::read_logits(&dir.join(l))?);
                gts.push(io::read_mask(&dir.join(&e.gt))?);
            }
            (logits, gts)
        }
        None => {
            if a.logits.is_empty() || a.logits.len() != a.gt.len() {
                bail!(
                    "need matching --logits and --gt lists, got {} and {}",
                    a.logits.len(),
                    a.gt.len()
                );
            }
            let logits = a.logits.iter().map(|p| io::read_logits(p)).collect::<pixdefer::Result<Vec<_>>>()?;
            let gts = a.gt.iter().map(|p| io::read_mask(p)).collect::<pixdefer::Result<Vec<_>>>()?;
            (logits, gts)
        }
    };
    let model = fit_temperature(&logits, &gts)?;
    write_text(&a.out, &(model.to_json() + "\n"))?;
    emit(cli.format, &model)
}

fn cmd_calibrate_apply(cli: &Cli, a: &CalibrateApplyArgs) -> Result<()> {
    let model = TemperatureModel::from_json(&read_to_string(&a.model)?)
        .with_context(|| format!("loading {}", a.model.display()))?;
    let out = match (&a.input, &a.logits) {
        (Some(p), _) => apply_temperature(&io::read_prob_map(p)?, model.t)?,
        (None, Some(z)) => apply_temperature_logits(&io::read_logits(z)?, model.t)?,
        (None, None) => bail!("pass --input or --logits"),
    };
    io::write_prob_map(&out, &a.out)?;
    emit(
        cli.format,
        &json!({ "T": model.t, "pixels": out.len(), "out": a.out.display().to_string() }),
    )
}

fn read_to_string(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    if a.criterion == Criterion::MaxF1 && a.dice_floor.is_some() {
        bail!("--dice-floor only applies to --criterion coverage_dice");
    }
    let loaded = load::load(&a.inputs, true)?;
    let items = loaded
        .images
        .into_iter()
        .map(|im| ValidationItem::new(im.mean, im.unc.expect("loaded with uncertainty"), im.gt))
        .collect::<pixdefer::Result<Vec<_>>>()?;
    let val = ValidationSet::new(items)?;
    let fit = fit_threshold(&val, a.policy, a.criterion, a.dice_floor)?;
    write_text(&a.out, &(fit.model.to_json() + "\n"))?;
    if let Some(path) = &a.candidates {
        let mut csv = String::from("threshold,coverage,precision,recall,f1,dice\n");
        for c in &fit.candidates {
            csv += &format!(
                "{},{},{},{},{},{}\n",
                c.threshold, c.coverage, c.precision, c.recall, c.f1, c.dice
            );
        }
        write_text(path, &csv)?;
    }
    emit(cli.format, &json!({ "model": fit.model, "selected": fit.selected }))
}

fn cmd_defer(cli: &Cli, a: &DeferArgs) -> Result<()> {
    let model = DeferralModel::from_json(&read_to_string(&a.model)?)
        .with_context(|| format!("loading {}", a.model.display()))?;
    let mean = io::read_prob_map(&a.mean)?;
    let unc = io::read_uncertainty(&a.unc, a.kind)?;
    let d = model.apply(&unc, &mean)?;
    io::write_decision(&d, &a.out)?;
    if let Some(p) = &a.pgm {
        io::write_decision_pgm(&d, p)?;
    }
    emit(
        cli.format,
        &json!({
            "pixels": d.len(),
            "accepted": d.accepted_count(),
            "deferred": d.deferred_count(),
            "coverage": d.coverage(),
        }),
    )
}

fn eval_config(cli: &Cli, a: &EvaluateArgs) -> Result<EvalConfig> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<EvalConfig>(&read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => EvalConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.model {
        let m = DeferralModel::from_json(&read_to_string(p)?)
            .with_context(|| format!("loading {}", p.display()))?;
        cfg.model = Some(m);
    }
    if let Some(m) = &a.method {
        cfg.method = m.clone();
    }
    if let Some(b) = a.ece_bins {
        cfg.ece_bins = b;
    }
    if let Some(m) = a.accuracy_mode {
        cfg.accuracy_mode = m;
    }
    if let Some(m) = a.auc {
        cfg.auc_mode = m;
    }
    if a.bootstrap.is_some() {
        cfg.bootstrap_resamples = a.bootstrap;
    }
    if let Some(l) = a.bootstrap_level {
        cfg.bootstrap_level = l;
    }

    if cfg.ece_bins == 0 {
        bail!("ece_bins must be >= 1");
    }
    if !(cfg.bootstrap_level > 0.0 && cfg.bootstrap_level < 1.0) {
        bail!("bootstrap level {} outside (0, 1)", cfg.bootstrap_level);
    }
    if let Some(r) = cfg.bootstrap_resamples {
        if r < pixdefer::metrics::stats::MIN_RESAMPLES {
            bail!("bootstrap needs at least {} resamples, got {r}", pixdefer::metrics::stats::MIN_RESAMPLES);
        }
    }
    if cfg.grid.is_empty() || cfg.grid.iter().any(|q| !(0.0..=1.0).contains(q)) {
        bail!("coverage grid must be nonempty with levels in [0, 1]");
    }
    if let Some(m) = &cfg.model {
        m.validate()?;
    }
    Ok(cfg)
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut cfg = eval_config(cli, a)?;
    let want_unc = a.inputs.data.is_some() || !a.inputs.unc.is_empty();
    if cfg.model.is_some() && !want_unc {
        bail!("a deferral model needs uncertainty maps (--unc or --data)");
    }
    create_dir(&a.out_dir)?;

    let t0 = Instant::now();
    let loaded = load::load(&a.inputs, want_unc)?;
    let load_secs = t0.elapsed().as_secs_f64();
    if a.method.is_none() && a.config.is_none() {
        cfg.method = loaded.method.clone();
    }
    cfg.alignment = loaded.alignment.clone();

    let t1 = Instant::now();
    let report = evaluate(&loaded.images, &cfg)?;
    let eval_secs = t1.elapsed().as_secs_f64();

    let report_path = a.out_dir.join("report.json");
    write_text(&report_path, &(report.to_json() + "\n"))?;
    for metric in MetricKind::ALL {
        if let Some(c) = report.curve(metric) {
            write_text(&a.out_dir.join(format!("curve_{}.csv", metric.name())), &c.to_csv())?;
        }
    }
    write_text(&a.out_dir.join("reliability.csv"), &report.reliability.to_csv())?;
    if a.pgm {
        for im in &loaded.images {
            if let Some(u) = &im.unc {
                io::write_uncertainty_pgm(u, &a.out_dir.join(format!("{}_unc.pgm", im.id)))?;
                if let Some(m) = &cfg.model {
                    let d = m.apply(u, &im.mean)?;
                    io::write_decision_pgm(&d, &a.out_dir.join(format!("{}_decision.pgm", im.id)))?;
                }
            }
        }
    }
    write_json(
        &a.out_dir.join("timings.json"),
        &json!({
            "threads": cli.threads,
            "images": loaded.images.len(),
            "load_seconds": load_secs,
            "evaluate_seconds": eval_secs,
            "evaluate_seconds_per_image": eval_secs / loaded.images.len() as f64,
        }),
    )?;
    emit(
        cli.format,
        &json!({
            "images": report.images.len(),
            "pooled": report.pooled.pixel,
            "report": report_path.display().to_string(),
        }),
    )
}

fn synth_spec(cli: &Cli, a: &SynthArgs) -> Result<SynthSpec> {
    let mut spec = match &a.config {
        Some(p) => serde_json::from_str::<SynthSpec>(&read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let calibration = match (a.calibration, a.t_plant) {
                (Calibration::Calibrated, None) => CalibrationMode::Calibrated,
                (Calibration::Calibrated, Some(_)) => bail!("--t-plant needs a miscalibrated fixture"),
                (Calibration::Overconfident, Some(t_plant)) => CalibrationMode::Overconfident { t_plant },
                (Calibration::Underconfident, Some(t_plant)) => CalibrationMode::Underconfident { t_plant },
                (_, None) => bail!("--t-plant is required for miscalibrated fixtures"),
            };
            SynthSpec {
                height: a.height,
                width: a.width,
                n_images: a.n_images,
                error_rate: a.error_rate,
                unc_error_corr: a.corr,
                calibration,
                passes: a.passes,
                seed: 0,
                source: a.source,
            }
        }
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(cli, a)?;
    create_dir(&a.out_dir)?;
    let mut entries = Vec::with_capacity(spec.n_images);
    let mut transform_ids = None;
    let mut errors = 0usize;
    for i in 0..spec.n_images {
        let img = generate_image(&spec, i)?;
        let id = format!("img_{i:03}");
        let stack = format!("{id}_stack.npy");
        let gt = format!("{id}_gt.npy");
        let logits = format!("{id}_logits.npy");
        io::write_stack(&img.stack, &a.out_dir.join(&stack))?;
        io::write_mask(&img.gt, &a.out_dir.join(&gt))?;
        io::write_logits(&LogitMap::from_probs(&img.mean), &a.out_dir.join(&logits))?;
        transform_ids = img.stack.transforms().map(|t| t.to_vec());
        errors += img.errors.values().iter().filter(|&&e| e).count();

        let sidecar = io::sidecar_path(Path::new(&stack)).display().to_string();
        let mut checksums = std::collections::BTreeMap::new();
        for name in [&stack, &sidecar, &gt, &logits] {
            checksums.insert(name.clone(), io::sha256_file(&a.out_dir.join(name))?);
        }
        entries.push(ManifestEntry {
            id,
            stack,
            gt,
            logits: Some(logits),
            checksums,
        });
    }
    let manifest = DatasetManifest {
        dataset: "synthetic".into(),
        source_tag: spec.source,
        passes: spec.passes,
        transform_ids: if spec.source == SourceTag::Tta { transform_ids } else { None },
        images: entries,
        spec: Some(spec.clone()),
    };
    manifest.write(&a.out_dir)?;
    emit(
        cli.format,
        &json!({
            "images": spec.n_images,
            "pixels_per_image": spec.height * spec.width,
            "error_pixels": errors,
            "out_dir": a.out_dir.display().to_string(),
        }),
    )
}
