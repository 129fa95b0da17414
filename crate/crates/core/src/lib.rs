//! Uncertainty-aware deferral for dense binary prediction.
//!
//! The crate turns stacks of per-pass probability maps into a mean map and
//! an uncertainty map, fits and applies pixel-level deferral policies, and
//! evaluates the accepted/deferred split with overlap, ranking, calibration
//! and risk-coverage metrics.
//!
//! ```
//! use pixdefer::maps::{PredictionStack, Shape, SourceTag};
//! use pixdefer::uncertainty::mc_aggregate;
//!
//! let shape = Shape::new(1, 1).unwrap();
//! let stack = PredictionStack::new(2, shape, vec![0.2, 0.8], SourceTag::McDropout, None).unwrap();
//! let agg = mc_aggregate(&stack).unwrap();
//! assert_eq!(agg.mean.values()[0], 0.5);
//! ```

pub mod calibration;
pub mod deferral;
pub mod error;
pub mod fingerprint;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod par;
pub mod report;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
