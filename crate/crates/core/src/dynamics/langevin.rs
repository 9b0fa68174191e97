use ndarray::Array1;

use super::logdet::{chebyshev_bound, small_det, spectral_radius, trace_log_estimate, LogdetConfig, LogdetMethod};
use super::{check_state, Field, PhaseState, StepControl};
use crate::diffcore::{Potential, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Largest dimension for which the exact dense log-determinant is used.
pub const EXACT_LOGDET_MAX_DIM: usize = 4;

/// One stochastic Langevin step driven by the noise `xi`.
///
/// `v' = ξ + (η/2)∇f(x)`, then `x' = x + v'`, or `x' = x + η v'` when
/// `scale_position` is set. When `xi_log_density` is given (a `B×1` column)
/// it is added to `log_q`; pass `None` when `ξ` is the state's own momentum
/// whose density is already accounted for.
#[allow(clippy::too_many_arguments)]
pub fn langevin_step(
    tape: &mut Tape,
    field: &Field<'_>,
    state: &PhaseState,
    eta: Var,
    control: &StepControl,
    xi: Var,
    xi_log_density: Option<Var>,
    scale_position: bool,
) -> Result<PhaseState> {
    let step = state.step_index;
    let half = tape.scale(eta, 0.5);
    let g = field.clipped_grad(tape, state.x, control, step)?;
    let kick = tape.mul(half, g);
    let v_new = tape.add(xi, kick);
    let v_used = control.clip_velocity(tape, v_new);
    let drift = if scale_position {
        tape.mul(eta, v_used)
    } else {
        v_used
    };
    let x_new = tape.add(state.x, drift);
    let log_q = match xi_log_density {
        Some(lp) => tape.add(state.log_q, lp),
        None => state.log_q,
    };
    let next = PhaseState {
        x: x_new,
        v: v_new,
        log_q,
        step_index: step + 1,
    };
    check_state(tape, &next, step)?;
    Ok(next)
}

/// Log-density of isotropic Gaussian rows with standard deviation `std`, as `B×1`.
pub fn gaussian_log_density(tape: &mut Tape, z: Var, std: f64) -> Var {
    let d = tape.shape(z).1 as f64;
    let sq = tape.square(z);
    let s = tape.row_sum(sq);
    let s = tape.scale(s, -0.5 / (std * std));
    tape.offset(s, -d * (std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()))
}

/// One deterministic Langevin step `x' = x + η∇f(x)` (`η` is `1×d` or `1×1`).
///
/// `log_q` decreases by `log|det(I + diag(η) H)|`. For `d ≤ 4` with an
/// estimated `‖ηH‖ ≥ 1` the exact dense determinant is used instead of the
/// series; larger dimensions then fail.
pub fn det_langevin_step(
    tape: &mut Tape,
    field: &Field<'_>,
    state: &PhaseState,
    eta: Var,
    logdet: &LogdetConfig,
    rng: &mut Stream,
) -> Result<PhaseState> {
    field.potential.require_second_order()?;
    let step = state.step_index;
    let (rows, d) = tape.shape(state.x);
    let g = field.grad(tape, state.x, step)?;
    let drift = tape.mul(eta, g);
    let x_new = tape.add(state.x, drift);

    let eta_row: Array1<f64> = {
        let e = tape.value(eta);
        if e.len() == 1 {
            Array1::from_elem(d, e[[0, 0]])
        } else {
            e.row(0).to_owned()
        }
    };
    let radius = max_scaled_hessian_radius(field.potential, tape.value(state.x), &eta_row, rng)?;

    let log_det = if radius >= 1.0 {
        if d > EXACT_LOGDET_MAX_DIM {
            return Err(Error::SpectralBound { norm: radius, dim: d });
        }
        log::warn!(
            "step {step}: estimated ‖ηH‖ = {radius:.3} >= 1, using the exact determinant"
        );
        exact_log_det(tape, state.x, g, eta, d)?
    } else {
        let mut cfg = *logdet;
        if let LogdetMethod::Chebyshev { degree, bound: None } = cfg.method {
            cfg.method = LogdetMethod::Chebyshev {
                degree,
                bound: Some(chebyshev_bound(radius)),
            };
        }
        // C = -diag(η) H, so log det(I + ηH) = tr log(I - C).
        let x = state.x;
        let mut apply = |tape: &mut Tape, z: Var| -> Result<Var> {
            let hz = hvp(tape, x, g, z)?;
            let ehz = tape.mul(eta, hz);
            Ok(tape.neg(ehz))
        };
        trace_log_estimate(tape, &mut apply, rows, d, &cfg, rng)?
    };
    let log_q = tape.sub(state.log_q, log_det);
    let next = PhaseState {
        x: x_new,
        v: state.v,
        log_q,
        step_index: step + 1,
    };
    check_state(tape, &next, step)?;
    Ok(next)
}

/// Row-wise Hessian-vector product given the recorded gradient `g = ∇f(x)`.
fn hvp(tape: &mut Tape, x: Var, g: Var, z: Var) -> Result<Var> {
    let gz = tape.mul(g, z);
    let s = tape.sum(gz);
    Ok(tape.grad(s, &[x])?[0])
}

fn exact_log_det(tape: &mut Tape, x: Var, g: Var, eta: Var, d: usize) -> Result<Var> {
    let rows = tape.shape(x).0;
    // Column j of the Jacobian I + diag(η)H is e_j + η ⊙ H e_j.
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = ndarray::Array2::zeros((rows, d));
        e.column_mut(j).fill(1.0);
        let ev = tape.constant(e);
        let hz = hvp(tape, x, g, ev)?;
        let ehz = tape.mul(eta, hz);
        cols.push(tape.add(ev, ehz));
    }
    let entries: Vec<Vec<Var>> = (0..d)
        .map(|i| (0..d).map(|j| tape.slice_cols(cols[j], i, 1)).collect())
        .collect();
    let det = small_det(tape, &entries);
    let a = tape.abs(det);
    Ok(tape.log(a))
}

/// Largest power-iteration estimate of `‖diag(η)^½ H diag(η)^½‖` across rows.
fn max_scaled_hessian_radius(
    potential: &Potential,
    x: &ndarray::Array2<f64>,
    eta: &Array1<f64>,
    rng: &mut Stream,
) -> Result<f64> {
    let d = x.ncols();
    let root = eta.mapv(|e| e.abs().sqrt());
    let mut worst: f64 = 0.0;
    for row in x.rows() {
        let mut tape = Tape::new();
        let b = potential.bind(&mut tape, false);
        let xv = tape.constant(row.to_owned().insert_axis(ndarray::Axis(0)));
        let g = crate::diffcore::grad_x(&mut tape, potential, &b, xv)?;
        let tape = std::cell::RefCell::new(tape);
        let apply = |z: &Array1<f64>| -> Array1<f64> {
            let mut t = tape.borrow_mut();
            let scaled = (z * &root).insert_axis(ndarray::Axis(0));
            let zv = t.constant(scaled);
            let hz = hvp(&mut t, xv, g, zv).expect("hessian-vector product");
            let out = t.value(hz).row(0).to_owned();
            out * &root
        };
        worst = worst.max(spectral_radius(&apply, d, 20, rng));
    }
    Ok(worst)
}
