use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::maps::{DecisionMap, UncertaintyKind, UncertaintyMap};

fn encode(width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Binary PGM with accepted pixels white (255) and deferred pixels black.
pub fn encode_decision_pgm(d: &DecisionMap) -> Vec<u8> {
    encode(
        d.width(),
        d.height(),
        d.accepted().iter().map(|&a| if a { 255 } else { 0 }),
    )
}

pub fn write_decision_pgm(d: &DecisionMap, path: &Path) -> Result<()> {
    fs::write(path, encode_decision_pgm(d))?;
    Ok(())
}

/// Value range recorded next to an uncertainty PGM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub kind: UncertaintyKind,
    pub min: f64,
    pub max: f64,
}

/// Linear `[min, max] -> [0, 255]`; a constant map encodes as all zeros.
pub fn encode_uncertainty_pgm(u: &UncertaintyMap) -> (Vec<u8>, PgmScale) {
    let (min, max) = u.min_max();
    let range = max - min;
    let bytes = encode(
        u.width(),
        u.height(),
        u.values().iter().map(|&v| {
            if range > 0.0 {
                (255.0 * (v - min) / range).round() as u8
            } else {
                0
            }
        }),
    );
    (bytes, PgmScale { kind: u.kind(), min, max })
}

/// Writes `path` and the scale sidecar `path` with a `.json` extension.
pub fn write_uncertainty_pgm(u: &UncertaintyMap, path: &Path) -> Result<()> {
    let (bytes, scale) = encode_uncertainty_pgm(u);
    fs::write(path, bytes)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&scale)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Shape;

    #[test]
    fn checkerboard_payload() {
        let d = DecisionMap::new(Shape::new(2, 2).unwrap(), vec![true, false, false, true]).unwrap();
        let bytes = encode_decision_pgm(&d);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);
    }

    #[test]
    fn all_accept_is_white() {
        let d = DecisionMap::all_accept(Shape::new(3, 4).unwrap());
        let bytes = encode_decision_pgm(&d);
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 255));
    }

    #[test]
    fn uncertainty_scaling() {
        let u = UncertaintyMap::new(
            Shape::new(1, 3).unwrap(),
            vec![0.0, 0.1, 0.2],
            UncertaintyKind::Variance,
        )
        .unwrap();
        let (bytes, scale) = encode_uncertainty_pgm(&u);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        assert_eq!((scale.min, scale.max), (0.0, 0.2));
    }
}
