use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::maps::{ProbMap, Shape};

/// The six exact square-grid transforms used for test-time augmentation.
///
/// Each is a pure index permutation. Rotations are counter-clockwise and
/// only defined on square planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeomTransform {
    Identity,
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl GeomTransform {
    pub const ALL: [GeomTransform; 6] = [
        GeomTransform::Identity,
        GeomTransform::Hflip,
        GeomTransform::Vflip,
        GeomTransform::Rot90,
        GeomTransform::Rot180,
        GeomTransform::Rot270,
    ];

    pub fn inverse(self) -> Self {
        match self {
            GeomTransform::Rot90 => GeomTransform::Rot270,
            GeomTransform::Rot270 => GeomTransform::Rot90,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeomTransform::Identity => "identity",
            GeomTransform::Hflip => "hflip",
            GeomTransform::Vflip => "vflip",
            GeomTransform::Rot90 => "rot90",
            GeomTransform::Rot180 => "rot180",
            GeomTransform::Rot270 => "rot270",
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(
            self,
            GeomTransform::Rot90 | GeomTransform::Rot180 | GeomTransform::Rot270
        )
    }

    // Input coordinate that lands on output pixel (i, j). Rotations assume
    // h == w, which `apply_slice` enforces.
    #[inline]
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeomTransform::Identity => (i, j),
            GeomTransform::Hflip => (i, w - 1 - j),
            GeomTransform::Vflip => (h - 1 - i, j),
            GeomTransform::Rot90 => (j, w - 1 - i),
            GeomTransform::Rot180 => (h - 1 - i, w - 1 - j),
            GeomTransform::Rot270 => (h - 1 - j, i),
        }
    }

    /// Permutes a row-major plane of any element type.
    pub fn apply_slice<T: Copy>(self, shape: Shape, data: &[T]) -> Result<Vec<T>> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{shape} plane needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if self.is_rotation() && !shape.is_square() {
            return Err(Error::shape(format!(
                "{} needs a square plane, got {shape}",
                self.name()
            )));
        }
        let (h, w) = (shape.height, shape.width);
        if self == GeomTransform::Identity {
            return Ok(data.to_vec());
        }
        let mut out = Vec::with_capacity(data.len());
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = self.source(i, j, h, w);
                out.push(data[si * w + sj]);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for GeomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GeomTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeomTransform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown transform id '{s}'")))
    }
}

pub fn apply_transform(map: &ProbMap, t: GeomTransform) -> Result<ProbMap> {
    let values = t.apply_slice(map.shape(), map.values())?;
    Ok(ProbMap::from_trusted(map.shape(), values))
}

/// Undoes [`apply_transform`] with the same `t`.
pub fn invert_transform(map: &ProbMap, t: GeomTransform) -> Result<ProbMap> {
    apply_transform(map, t.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> ProbMap {
        // [[a, b], [c, d]]
        ProbMap::new(Shape::new(2, 2).unwrap(), vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn hflip_swaps_columns() {
        let out = apply_transform(&two_by_two(), GeomTransform::Hflip).unwrap();
        assert_eq!(out.values(), &[0.2, 0.1, 0.4, 0.3]);
    }

    #[test]
    fn vflip_swaps_rows() {
        let out = apply_transform(&two_by_two(), GeomTransform::Vflip).unwrap();
        assert_eq!(out.values(), &[0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[a, b], [c, d]] -> [[b, d], [a, c]]
        let out = apply_transform(&two_by_two(), GeomTransform::Rot90).unwrap();
        assert_eq!(out.values(), &[0.2, 0.4, 0.1, 0.3]);
    }

    #[test]
    fn rot90_then_rot270_is_identity() {
        let m = two_by_two();
        let a = apply_transform(&m, GeomTransform::Rot90).unwrap();
        let b = apply_transform(&a, GeomTransform::Rot270).unwrap();
        assert_eq!(b, m);
    }

    #[test]
    fn identity_is_bitwise_identity() {
        let m = two_by_two();
        assert_eq!(apply_transform(&m, GeomTransform::Identity).unwrap(), m);
    }

    #[test]
    fn rotation_rejects_rectangles() {
        let m = ProbMap::new(Shape::new(2, 3).unwrap(), vec![0.5; 6]).unwrap();
        assert!(matches!(
            apply_transform(&m, GeomTransform::Rot90),
            Err(Error::Shape(_))
        ));
        assert!(apply_transform(&m, GeomTransform::Hflip).is_ok());
    }

    #[test]
    fn names_round_trip() {
        for t in GeomTransform::ALL {
            assert_eq!(t.name().parse::<GeomTransform>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!("rot45".parse::<GeomTransform>().is_err());
    }

    proptest! {
        #[test]
        fn invert_after_apply_is_identity(
            n in 1usize..12,
            seed in prop::collection::vec(0.0f64..=1.0, 144),
            k in 0usize..6,
        ) {
            let shape = Shape::new(n, n).unwrap();
            let m = ProbMap::new(shape, seed[..n * n].to_vec()).unwrap();
            let t = GeomTransform::ALL[k];
            let back = invert_transform(&apply_transform(&m, t).unwrap(), t).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn transforms_are_permutations(n in 1usize..10, k in 0usize..6) {
            let shape = Shape::new(n, n).unwrap();
            let idx: Vec<usize> = (0..n * n).collect();
            let mut out = GeomTransform::ALL[k].apply_slice(shape, &idx).unwrap();
            out.sort_unstable();
            prop_assert_eq!(out, idx);
        }
    }
}
