//! Restricted NPY reader/writer: format 1.0, little-endian, C order,
//! `<f4`, `<f8` or `|u1`, rank 2 or 3.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
/// Refuse headers claiming more elements than this (about 8 GB of f64).
const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
    U1,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
            Dtype::U1 => "|u1",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
            Dtype::U1 => 1,
        }
    }

    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F4),
            "<f8" => Ok(Dtype::F8),
            "|u1" | "<u1" | ">u1" => Ok(Dtype::U1),
            other => Err(Error::UnsupportedDtype(format!(
                "'{other}' (supported: <f4, <f8, |u1)"
            ))),
        }
    }
}

/// Element values; `<f4` data is widened to `f64` on read.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    Float(Vec<f64>),
    Byte(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn float64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        NpyArray {
            dtype: Dtype::F8,
            shape,
            data: NpyData::Float(values),
        }
    }

    pub fn bytes(shape: Vec<usize>, values: Vec<u8>) -> Self {
        NpyArray {
            dtype: Dtype::U1,
            shape,
            data: NpyData::Byte(values),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path)?;
    parse_npy(&bytes)
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::MalformedHeader("missing \\x93NUMPY magic".into()));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(Error::UnsupportedLayout(format!(
            "format version {}.{} (only 1.0 is supported)",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let start = 10 + header_len;
    if bytes.len() < start {
        return Err(Error::MalformedHeader(format!(
            "header claims {header_len} bytes but the file has {}",
            bytes.len() - 10
        )));
    }
    let header = std::str::from_utf8(&bytes[10..start])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    let (descr, fortran, shape) = parse_header(header)?;
    let dtype = Dtype::parse(&descr)?;
    if fortran {
        return Err(Error::UnsupportedLayout("Fortran-order array".into()));
    }
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::Rank {
            expected: "2 or 3",
            found: shape.len(),
        });
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| Error::MalformedHeader(format!("shape {shape:?} is too large")))?;
    let payload = &bytes[start..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Payload(format!(
            "shape {shape:?} of {} needs {} bytes, found {}",
            dtype.descr(),
            count * dtype.size(),
            payload.len()
        )));
    }
    let data = match dtype {
        Dtype::F4 => NpyData::Float(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        Dtype::F8 => NpyData::Float(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U1 => NpyData::Byte(payload.to_vec()),
    };
    Ok(NpyArray { dtype, shape, data })
}

/// Parses the Python-literal header dict, e.g.
/// `{'descr': '<f8', 'fortran_order': False, 'shape': (3, 4), }`.
fn parse_header(h: &str) -> Result<(String, bool, Vec<usize>)> {
    let bad = |m: &str| Error::MalformedHeader(format!("{m} in header {:?}", h.trim_end()));
    let body = h
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("not a dict"))?;
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = quoted(rest).ok_or_else(|| bad("expected a quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':'"))?
            .trim_start();
        let after = match key {
            "descr" => {
                let (v, a) = quoted(after).ok_or_else(|| bad("descr is not a string"))?;
                descr = Some(v.to_string());
                a
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("True") {
                    fortran = Some(true);
                    a
                } else if let Some(a) = after.strip_prefix("False") {
                    fortran = Some(false);
                    a
                } else {
                    return Err(bad("fortran_order is not a bool"));
                }
            }
            "shape" => {
                let inner = after.strip_prefix('(').ok_or_else(|| bad("shape is not a tuple"))?;
                let close = inner.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            _ => return Err(bad("unexpected key")),
        };
        let after = after.trim_start();
        rest = after.strip_prefix(',').unwrap_or(after).trim_start();
        if !after.starts_with(',') && !rest.is_empty() {
            return Err(bad("expected ','"));
        }
    }
    match (descr, fortran, shape) {
        (Some(d), Some(f), Some(s)) => Ok((d, f, s)),
        _ => Err(bad("missing descr, fortran_order or shape")),
    }
}

fn quoted(s: &str) -> Option<(&str, &str)> {
    let q = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let end = s[1..].find(q)? + 1;
    Some((&s[1..end], &s[end + 1..]))
}

pub fn encode_npy(a: &NpyArray) -> Result<Vec<u8>> {
    if a.shape.iter().product::<usize>() != data_len(&a.data) {
        return Err(Error::shape(format!(
            "shape {:?} vs {} values",
            a.shape,
            data_len(&a.data)
        )));
    }
    let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        a.dtype.descr(),
        shape
    );
    // Pad with spaces so the payload starts on a 64-byte boundary.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + a.len() * a.dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match (&a.data, a.dtype) {
        (NpyData::Float(v), Dtype::F8) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        (NpyData::Float(v), Dtype::F4) => {
            for x in v {
                let f = *x as f32;
                if f as f64 != *x && !x.is_nan() {
                    return Err(Error::domain(format!("{x} is not representable as float32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        (NpyData::Byte(v), Dtype::U1) => out.extend_from_slice(v),
        _ => return Err(Error::UnsupportedDtype("dtype does not match data".into())),
    }
    Ok(out)
}

fn data_len(d: &NpyData) -> usize {
    match d {
        NpyData::Float(v) => v.len(),
        NpyData::Byte(v) => v.len(),
    }
}

pub fn write_npy(path: &Path, a: &NpyArray) -> Result<()> {
    fs::write(path, encode_npy(a)?)?;
    Ok(())
}
