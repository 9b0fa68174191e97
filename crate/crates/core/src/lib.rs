//! Estimation of energy-based models by adversarial dynamics embedding.
//!
//! A potential `f` defines the unnormalized density `exp(f(x))`. The dual
//! sampler is an initial distribution followed by a stack of differentiable
//! dynamics layers driven by `∇ₓf`; both are trained on a shared max-min
//! objective. Baseline estimators (CD, PCD, score matching, NCE, MPF and a
//! planar-flow primal-dual) and evaluation utilities live alongside.

pub mod diffcore;
pub mod dynamics;
pub mod init;
pub mod data;
pub mod estimators;
pub mod config;
pub mod run;
pub mod bench;
pub mod eval;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
