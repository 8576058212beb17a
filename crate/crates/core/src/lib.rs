//! Gaussian variational EM (GVEM) and its importance-weighted refinement
//! (IW-GVEM) for multidimensional two-parameter logistic (M2PL) item
//! response models.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: response function, joint log-density and the quadratic
//!   local bound on the logistic term.
//! - [`gvem`]: closed-form coordinate ascent on the variational bound.
//! - [`iw`]: importance-weighted ELBO estimates and their gradients, using
//!   the converged GVEM posteriors as fixed proposals.
//! - [`adam`]: the bias-corrected Adam optimizer and learning-rate search.
//! - [`pipeline`]: the two-phase fit (GVEM warm start, then IW ascent).
//! - [`rotation`]: varimax / promax and alignment against known loadings.
//! - [`simstudy`]: data generation and replicated bias/RMSE experiments.

// `!(x > 0.0)` is used on purpose so that NaN fails validation, and index
// loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adam;
pub mod error;
pub mod gvem;
pub mod iw;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod rotation;
pub mod simstudy;


pub use adam::{AdamConfig, AdamState, ParamGroup};
pub use error::{Error, Result};
pub use gvem::{GvemConfig, GvemFit, Mode};
pub use iw::{IwConfig, IwEstimate, IwGradient, ThetaSamples, WeightBlock};
pub use model::{LoadingStructure, ModelParams, ResponseMatrix, VariationalState};
pub use pipeline::{FitConfig, FitResult};
pub use rotation::{PromaxConfig, RotationResult};
pub use simstudy::{StudyDesign, StudyResult, TrueModel};

pub use nalgebra::{DMatrix, DVector};
