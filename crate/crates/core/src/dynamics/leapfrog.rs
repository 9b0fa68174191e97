use super::{check_state, Field, PhaseState, StepControl};
use crate::diffcore::{Tape, Var};
use crate::error::Result;

/// One leapfrog step with per-dimension step sizes `eta` (`1×d`).
///
/// Half kick, drift, half kick. `log_q` is carried over unchanged: the map
/// is volume preserving.
pub fn leapfrog_step(
    tape: &mut Tape,
    field: &Field<'_>,
    state: &PhaseState,
    eta: Var,
    control: &StepControl,
) -> Result<PhaseState> {
    let step = state.step_index;
    let half = tape.scale(eta, 0.5);

    let g = field.clipped_grad(tape, state.x, control, step)?;
    let kick = tape.mul(half, g);
    let v_half = tape.add(state.v, kick);
    let v_half = control.clip_velocity(tape, v_half);

    let drift = tape.mul(eta, v_half);
    let x_new = tape.add(state.x, drift);

    let g_new = field.clipped_grad(tape, x_new, control, step)?;
    let kick = tape.mul(half, g_new);
    let v_new = tape.add(v_half, kick);

    let next = PhaseState {
        x: x_new,
        v: v_new,
        log_q: state.log_q,
        step_index: step + 1,
    };
    check_state(tape, &next, step)?;
    Ok(next)
}

/// `steps` leapfrog steps from `state0`, every intermediate kept on the tape.
pub fn hmc_embed(
    tape: &mut Tape,
    field: &Field<'_>,
    state0: &PhaseState,
    eta: Var,
    control: &StepControl,
    steps: usize,
) -> Result<PhaseState> {
    let mut state = state0.clone();
    for _ in 0..steps {
        state = leapfrog_step(tape, field, &state, eta, control)?;
    }
    Ok(state)
}
