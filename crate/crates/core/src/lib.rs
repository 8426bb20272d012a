//! Bayesian generalized additive mixed models and the posterior-predictive
//! decomposition of variance into explained and residual parts.

pub mod cli;
pub mod error;
pub mod families;
pub mod io;
pub mod model;
pub mod oracle;
pub mod partial;
pub mod rsq;
pub mod sampler;
pub mod simstudy;
pub mod splines;

pub use error::{Error, Result};
pub use families::{Dispersion, Family};
pub use model::{Dataset, GroupFactor, Model, ModelSpec, ParamDraw, PriorConfig, Term};
