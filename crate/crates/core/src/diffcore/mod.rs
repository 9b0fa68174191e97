//! Reverse-mode differentiation with double-backward support, and the
//! potential functions differentiated by it.

mod params;
mod potential;
mod tape;

pub use params::{global_norm, ArrayEntry, Bound, ParamSet};
pub use potential::{
    eval_f, grad_params, grad_x, hessian_diag, mlp_forward, Activation, Mlp, MlpPotential, Potential,
    QuadraticPotential,
};
pub use tape::{Binary, Mat, Tape, Unary, Var};
