use std::path::Path;

use anyhow::{bail, Result};
use pixdefer::io::{self, DatasetManifest};
use pixdefer::maps::{PredictionStack, ProbMap, SourceTag, UncertaintyKind, UncertaintyMap};
use pixdefer::report::EvalImage;
use pixdefer::uncertainty::{mc_aggregate, tta_aggregate, Alignment};

use crate::{Inputs, Method};

pub struct Aggregated {
    pub mean: ProbMap,
    pub maps: Vec<UncertaintyMap>,
    pub alignment: Option<Alignment>,
}

pub fn default_kinds(method: Method) -> Vec<UncertaintyKind> {
    match method {
        Method::Mc => vec![UncertaintyKind::MutualInformation],
        Method::Tta => vec![UncertaintyKind::Variance, UncertaintyKind::Entropy],
    }
}

pub fn check_kinds(method: Method, kinds: &[UncertaintyKind]) -> Result<()> {
    for &k in kinds {
        let ok = match method {
            Method::Mc => k == UncertaintyKind::MutualInformation,
            Method::Tta => matches!(k, UncertaintyKind::Variance | UncertaintyKind::Entropy),
        };
        if !ok {
            bail!("method {} does not produce {} maps", method_name(method), k.name());
        }
    }
    Ok(())
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mc => "mc",
        Method::Tta => "tta",
    }
}

pub fn method_for(source: SourceTag) -> Method {
    match source {
        SourceTag::Tta => Method::Tta,
        _ => Method::Mc,
    }
}

pub fn alignment_name(a: Alignment) -> &'static str {
    match a {
        Alignment::InvertedInEngine => "inverted_in_engine",
        Alignment::PreAligned => "pre_aligned",
    }
}

/// Aggregates one stack and keeps the requested uncertainty kinds in order.
pub fn aggregate(stack: &PredictionStack, method: Method, kinds: &[UncertaintyKind]) -> Result<Aggregated> {
    check_kinds(method, kinds)?;
    Ok(match method {
        Method::Mc => {
            let a = mc_aggregate(stack)?;
            Aggregated {
                mean: a.mean,
                maps: kinds.iter().map(|_| a.mutual_information.clone()).collect(),
                alignment: None,
            }
        }
        Method::Tta => {
            let a = tta_aggregate(stack)?;
            let maps = kinds
                .iter()
                .map(|k| match k {
                    UncertaintyKind::Entropy => a.entropy.clone(),
                    _ => a.variance.clone(),
                })
                .collect();
            Aggregated {
                mean: a.mean,
                maps,
                alignment: Some(a.alignment),
            }
        }
    })
}

pub struct Loaded {
    pub images: Vec<EvalImage>,
    pub method: String,
    pub alignment: Option<String>,
}

/// Reads every image of `inp`. With a dataset directory each stack is
/// aggregated here; with file lists the maps are read as given.
pub fn load(inp: &Inputs, want_unc: bool) -> Result<Loaded> {
    match &inp.data {
        Some(dir) => load_dataset(dir, inp.kind, want_unc),
        None => load_files(inp, want_unc),
    }
}

fn load_dataset(dir: &Path, kind: Option<UncertaintyKind>, want_unc: bool) -> Result<Loaded> {
    let manifest = DatasetManifest::read(dir)?;
    manifest.verify(dir)?;
    if manifest.images.is_empty() {
        bail!("{}: manifest lists no images", dir.display());
    }
    let method = method_for(manifest.source_tag);
    let kind = kind.unwrap_or(default_kinds(method)[0]);
    check_kinds(method, &[kind])?;
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut alignment = None;
    for e in &manifest.images {
        let stack = io::read_stack(&dir.join(&e.stack))?;
        let gt = io::read_mask(&dir.join(&e.gt))?;
        let mut agg = aggregate(&stack, method, &[kind])?;
        alignment = agg.alignment.map(alignment_name).map(String::from);
        images.push(EvalImage {
            id: e.id.clone(),
            mean: agg.mean,
            unc: want_unc.then(|| agg.maps.remove(0)),
            gt,
        });
    }
    Ok(Loaded {
        images,
        method: method_name(method).into(),
        alignment,
    })
}

fn load_files(inp: &Inputs, want_unc: bool) -> Result<Loaded> {
    if inp.mean.is_empty() {
        bail!("no inputs: pass --data DIR or --mean/--gt files");
    }
    if inp.gt.len() != inp.mean.len() {
        bail!("{} mean maps but {} ground-truth masks", inp.mean.len(), inp.gt.len());
    }
    if want_unc && inp.unc.len() != inp.mean.len() {
        bail!("{} mean maps but {} uncertainty maps", inp.mean.len(), inp.unc.len());
    }
    let kind = inp.kind.unwrap_or(UncertaintyKind::MutualInformation);
    let mut images = Vec::with_capacity(inp.mean.len());
    for (i, m) in inp.mean.iter().enumerate() {
        let id = m
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image_{i}"));
        let unc = if want_unc {
            Some(io::read_uncertainty(&inp.unc[i], kind)?)
        } else {
            None
        };
        images.push(EvalImage {
            id,
            mean: io::read_prob_map(m)?,
            unc,
            gt: io::read_mask(&inp.gt[i])?,
        });
    }
    Ok(Loaded {
        images,
        method: "files".into(),
        alignment: None,
    })
}
