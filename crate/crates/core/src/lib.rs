//! Soft-label sub-typing pipeline for overhead imagery.
//!
//! The crate covers every stage that runs outside the detector itself:
//!
//! - [`geo_grid`]: overlapping grid tours of fixed-size tiles and per-tile
//!   pixel/geographic transforms.
//! - [`labelstore`]: detector-format label files, dataset manifests, crops,
//!   category subsetting and background balancing.
//! - [`subtype`]: pixel heuristics that split one detected class into two
//!   (white/color cars, blue roofs, full/empty floating-roof tanks).
//! - [`metrics`]: IoU matching, F1-vs-confidence sweeps, AP and mAP.
//! - [`simulate`]: seeded synthetic scenes and a noisy stand-in detector.
//! - [`cycle`]: the iterative test-to-train loop around an external detector.

pub mod cycle;
pub mod error;
pub mod geo_grid;
pub mod labelstore;
pub mod metrics;
pub mod simulate;
pub mod subtype;

pub use error::{Error, Result};
pub use geo_grid::{GeoPoint, GeoRect, TileJob, TileSpec};
pub use labelstore::{DatasetManifest, Detection, LabelFile, NormBox, RasterImage, Split};
pub use metrics::EvalReport;
pub use subtype::{SubtypeLabel, SubtypeResult, SubtypeRule};
