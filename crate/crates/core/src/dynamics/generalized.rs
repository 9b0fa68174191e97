//! Leapfrog with learned coordinatewise rescaling and learned projections.

use super::{check_state, Field, PhaseState, StepControl};
use crate::diffcore::{mlp_forward, Activation, Mlp, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Parameter layout for the four auxiliary networks.
///
/// `s_v` and `g_v` read `(∇f(x), x)`; `s_x` and `g_x` read the half-step
/// momentum. `g_v` and `g_x` are residual: identity plus a network, so
/// zeroed output layers reduce the step to plain leapfrog.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedLayout {
    pub dim: usize,
    pub hidden: usize,
    pub activation: Activation,
}

pub const NETS: [&str; 4] = ["s_v", "s_x", "g_v", "g_x"];

impl GeneralizedLayout {
    fn widths(&self, net: &str) -> [usize; 3] {
        let input = if net.ends_with("_v") { 2 * self.dim } else { self.dim };
        [input, self.hidden, self.dim]
    }

    /// Appends the networks' parameters as `<net>.layer{i}.*`.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut Stream, zero_output: bool) -> Result<()> {
        for net in NETS {
            let mut mlp = Mlp::new(&self.widths(net), self.activation, rng)?;
            if zero_output {
                mlp.zero_output_layer();
            }
            for (name, value) in mlp.params().iter() {
                params.push(format!("{net}.{name}"), value.clone());
            }
        }
        Ok(())
    }

    /// Number of parameter tensors per network.
    pub const fn tensors_per_net() -> usize {
        4
    }
}

/// Bound handles of the generalized step's learnables.
#[derive(Clone, Debug)]
pub struct GeneralizedVars<'a> {
    /// Scalar step size, `1×1`.
    pub eta: Var,
    pub s_v: &'a [Var],
    pub s_x: &'a [Var],
    pub g_v: &'a [Var],
    pub g_x: &'a [Var],
}

impl<'a> GeneralizedVars<'a> {
    /// Splits `[s_v.., s_x.., g_v.., g_x..]` in layout order.
    pub fn split(eta: Var, nets: &'a [Var]) -> Self {
        let k = GeneralizedLayout::tensors_per_net();
        assert_eq!(nets.len(), 4 * k);
        GeneralizedVars {
            eta,
            s_v: &nets[0..k],
            s_x: &nets[k..2 * k],
            g_v: &nets[2 * k..3 * k],
            g_x: &nets[3 * k..4 * k],
        }
    }
}

/// One generalized leapfrog step.
///
/// `log_q` decreases by the log-determinant of the step's Jacobian, which
/// is the sum of the three substeps' diagonal log-scales:
/// `Σ S_v(∇f(x), x) + Σ S_x(v½) + Σ S_v(∇f(x'), x')`.
pub fn generalized_leapfrog_step(
    tape: &mut Tape,
    field: &Field<'_>,
    state: &PhaseState,
    vars: &GeneralizedVars<'_>,
    activation: Activation,
    control: &StepControl,
) -> Result<PhaseState> {
    let step = state.step_index;
    let (_, d) = tape.shape(state.x);
    let (_, l) = tape.shape(state.v);
    if l != d {
        return Err(Error::Contract(format!(
            "density-tracked generalized leapfrog needs momentum dim {l} == sample dim {d}"
        )));
    }
    let half = tape.scale(vars.eta, 0.5);

    let (s1, gv1) = momentum_terms(tape, field, state.x, vars, activation, control, step)?;
    let e1 = tape.exp(s1);
    let scaled = tape.mul(state.v, e1);
    let kick = tape.mul(half, gv1);
    let v_half = tape.add(scaled, kick);
    let v_half = control.clip_velocity(tape, v_half);

    let s2 = mlp_forward(tape, activation, vars.s_x, v_half);
    let gx_res = mlp_forward(tape, activation, vars.g_x, v_half);
    let gx = tape.add(v_half, gx_res);
    let e2 = tape.exp(s2);
    let scaled = tape.mul(state.x, e2);
    let drift = tape.mul(vars.eta, gx);
    let x_new = tape.add(scaled, drift);

    let (s3, gv2) = momentum_terms(tape, field, x_new, vars, activation, control, step)?;
    let e3 = tape.exp(s3);
    let scaled = tape.mul(v_half, e3);
    let kick = tape.mul(half, gv2);
    let v_new = tape.add(scaled, kick);

    let s12 = tape.add(s1, s2);
    let s_all = tape.add(s12, s3);
    let log_det = tape.row_sum(s_all);
    let log_q = tape.sub(state.log_q, log_det);

    let next = PhaseState {
        x: x_new,
        v: v_new,
        log_q,
        step_index: step + 1,
    };
    check_state(tape, &next, step)?;
    Ok(next)
}

fn momentum_terms(
    tape: &mut Tape,
    field: &Field<'_>,
    x: Var,
    vars: &GeneralizedVars<'_>,
    activation: Activation,
    control: &StepControl,
    step: usize,
) -> Result<(Var, Var)> {
    let g = field.clipped_grad(tape, x, control, step)?;
    let input = tape.concat_cols(&[g, x]);
    let s = mlp_forward(tape, activation, vars.s_v, input);
    let res = mlp_forward(tape, activation, vars.g_v, input);
    let gv = tape.add(g, res);
    Ok((s, gv))
}
