//! File formats: NPY arrays with JSON sidecars, PGM previews, and the
//! dataset manifest.

pub mod npy;
pub mod pgm;

pub use npy::{encode_npy, parse_npy, read_npy, write_npy, Dtype, NpyArray, NpyData};
pub use pgm::{encode_decision_pgm, write_decision_pgm, write_uncertainty_pgm, PgmScale};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::maps::{
    DecisionMap, GroundTruthMask, LogitMap, PredictionStack, ProbMap, Shape, SourceTag,
    UncertaintyKind, UncertaintyMap,
};
use crate::synth::SynthSpec;
use crate::uncertainty::GeomTransform;

/// What a file is expected to hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayRole {
    Prob,
    Stack,
    Mask,
    Logits,
}

#[derive(Clone, Debug)]
pub enum LoadedArray {
    Prob(ProbMap),
    Stack(PredictionStack),
    Mask(GroundTruthMask),
    Logits(LogitMap),
}

pub fn read_array_file(path: &Path, role: ArrayRole) -> Result<LoadedArray> {
    Ok(match role {
        ArrayRole::Prob => LoadedArray::Prob(read_prob_map(path)?),
        ArrayRole::Stack => LoadedArray::Stack(read_stack(path)?),
        ArrayRole::Mask => LoadedArray::Mask(read_mask(path)?),
        ArrayRole::Logits => LoadedArray::Logits(read_logits(path)?),
    })
}

fn plane_shape(a: &NpyArray) -> Result<Shape> {
    if a.shape.len() != 2 {
        return Err(Error::Rank {
            expected: "2",
            found: a.shape.len(),
        });
    }
    Shape::new(a.shape[0], a.shape[1])
}

fn floats(a: NpyArray, what: &str) -> Result<Vec<f64>> {
    match a.data {
        NpyData::Float(v) => Ok(v),
        NpyData::Byte(_) => Err(Error::UnsupportedDtype(format!(
            "{what} must be <f4 or <f8, found |u1"
        ))),
    }
}

fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        Error::Domain(m) => Error::Domain(format!("{}: {m}", path.display())),
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        Error::OutOfRange(m) => Error::OutOfRange(format!("{}: {m}", path.display())),
        Error::NonFinite(m) => Error::NonFinite(format!("{}: {m}", path.display())),
        Error::MalformedHeader(m) => Error::MalformedHeader(format!("{}: {m}", path.display())),
        Error::UnsupportedDtype(m) => Error::UnsupportedDtype(format!("{}: {m}", path.display())),
        Error::UnsupportedLayout(m) => Error::UnsupportedLayout(format!("{}: {m}", path.display())),
        Error::Payload(m) => Error::Payload(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_prob_map(path: &Path) -> Result<ProbMap> {
    with_path(
        (|| {
            let a = read_npy(path)?;
            let shape = plane_shape(&a)?;
            ProbMap::new(shape, floats(a, "probabilities")?)
        })(),
        path,
    )
}

pub fn read_logits(path: &Path) -> Result<LogitMap> {
    with_path(
        (|| {
            let a = read_npy(path)?;
            let shape = plane_shape(&a)?;
            LogitMap::new(shape, floats(a, "logits")?)
        })(),
        path,
    )
}

pub fn read_uncertainty(path: &Path, kind: UncertaintyKind) -> Result<UncertaintyMap> {
    with_path(
        (|| {
            let a = read_npy(path)?;
            let shape = plane_shape(&a)?;
            UncertaintyMap::new(shape, floats(a, "uncertainty")?, kind)
        })(),
        path,
    )
}

pub fn read_mask(path: &Path) -> Result<GroundTruthMask> {
    with_path(
        (|| {
            let a = read_npy(path)?;
            let shape = plane_shape(&a)?;
            match a.data {
                NpyData::Byte(v) => GroundTruthMask::new(shape, v),
                NpyData::Float(_) => Err(Error::UnsupportedDtype(format!(
                    "masks must be |u1, found {}",
                    a.dtype.descr()
                ))),
            }
        })(),
        path,
    )
}

/// Reads a decision map stored as a `|u1` 0/1 array.
pub fn read_decision(path: &Path) -> Result<DecisionMap> {
    let m = read_mask(path)?;
    DecisionMap::new(m.shape(), m.values().iter().map(|&v| v == 1).collect())
}

/// Per-stack metadata stored next to the array as `<stem>.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMeta {
    #[serde(default)]
    pub source_tag: SourceTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_ids: Option<Vec<GeomTransform>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads a rank-3 stack and its sidecar; a missing sidecar means source
/// `other` with aligned planes.
pub fn read_stack(path: &Path) -> Result<PredictionStack> {
    with_path(
        (|| {
            let a = read_npy(path)?;
            if a.shape.len() != 3 {
                return Err(Error::Rank {
                    expected: "3",
                    found: a.shape.len(),
                });
            }
            let (t, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
            let shape = Shape::new(h, w)?;
            let values = floats(a, "stack")?;
            let side = sidecar_path(path);
            let meta: StackMeta = if side.exists() {
                serde_json::from_str(&fs::read_to_string(&side)?)?
            } else {
                StackMeta::default()
            };
            PredictionStack::new(t, shape, values, meta.source_tag, meta.transform_ids)
        })(),
        path,
    )
}

fn plane_array(shape: Shape, values: &[f64]) -> NpyArray {
    NpyArray::float64(vec![shape.height, shape.width], values.to_vec())
}

pub fn write_prob_map(m: &ProbMap, path: &Path) -> Result<()> {
    write_npy(path, &plane_array(m.shape(), m.values()))
}

pub fn write_logits(m: &LogitMap, path: &Path) -> Result<()> {
    write_npy(path, &plane_array(m.shape(), m.values()))
}

pub fn write_uncertainty(m: &UncertaintyMap, path: &Path) -> Result<()> {
    write_npy(path, &plane_array(m.shape(), m.values()))
}

pub fn write_mask(m: &GroundTruthMask, path: &Path) -> Result<()> {
    write_npy(path, &NpyArray::bytes(vec![m.height(), m.width()], m.values().to_vec()))
}

pub fn write_decision(d: &DecisionMap, path: &Path) -> Result<()> {
    let v = d.accepted().iter().map(|&a| a as u8).collect();
    write_npy(path, &NpyArray::bytes(vec![d.height(), d.width()], v))
}

pub fn write_stack(s: &PredictionStack, path: &Path) -> Result<()> {
    let sh = s.shape();
    write_npy(
        path,
        &NpyArray::float64(vec![s.passes(), sh.height, sh.width], s.values().to_vec()),
    )?;
    let meta = StackMeta {
        source_tag: s.source(),
        transform_ids: s.transforms().map(|t| t.to_vec()),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub stack: String,
    pub gt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
    /// File name to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

/// Index of a dataset directory; file names are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: String,
    pub source_tag: SourceTag,
    pub passes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_ids: Option<Vec<GeomTransform>>,
    pub images: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = with_path(fs::read_to_string(&path).map_err(Error::from), &path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Checks every listed file against its recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.images {
            for (name, want) in &e.checksums {
                let got = sha256_file(&dir.join(name))?;
                if &got != want {
                    return Err(Error::Consistency(format!(
                        "checksum mismatch for {name}: manifest {want}, file {got}"
                    )));
                }
            }
        }
        Ok(())
    }
}
