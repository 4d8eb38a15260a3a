//! Post-processing of gridded weather forecasts: decay-weighted bias
//! estimation, a pointwise neural error corrector, reference baselines and
//! a verification suite including a spectral sharpness score.
//!
//! Heavy inner loops (blur passes, per-gridpoint fits, feature assembly,
//! per-chunk backpropagation) run on rayon when the default `parallel`
//! feature is enabled and sequentially otherwise, with identical results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod grid;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod predictors;
pub mod store;
pub mod synth;
pub mod verification;

pub use error::{Error, Result};
pub use grid::{Field, Grid, WeightField};
pub use store::{FeatureManifest, FeatureSpec, FieldSet};
