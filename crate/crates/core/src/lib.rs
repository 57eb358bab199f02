//! Probabilistic regression with energy-based conditional densities.
//!
//! The crate covers dense score grids and their normalization into
//! densities, label distributions and proposal sampling, the family of
//! regression losses (squared error, robust squared error, NLL and KL in
//! grid and Monte-Carlo form), the online steepest-descent target-model
//! optimizer, a bounding-box scorer with gradient refinement, and a
//! two-stage tracker running on synthetic sequences.

pub mod bbox;
pub mod density;
pub mod error;
pub mod gridmath;
pub mod labels;
pub mod losses;
pub mod optimizer;
pub mod sim;
pub mod tracker;

pub use error::{Error, Result};
