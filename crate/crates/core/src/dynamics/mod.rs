//! Differentiable sampler layers and their density bookkeeping.
//!
//! A [`PhaseState`] holds a batch of particles `(x, v)` together with the
//! log-density `log_q` of the joint sampler state. Every layer records its
//! arithmetic on the tape so the objective can be differentiated through
//! the whole trajectory.

mod generalized;
mod langevin;
mod leapfrog;
pub mod logdet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use generalized::{generalized_leapfrog_step, GeneralizedLayout, GeneralizedVars, NETS};
pub use langevin::{det_langevin_step, gaussian_log_density, langevin_step, EXACT_LOGDET_MAX_DIM};
pub use leapfrog::{hmc_embed, leapfrog_step};
pub use logdet::{logdet_estimate, LogdetConfig, LogdetMethod, ProbeDesign};

use crate::diffcore::{grad_x, Activation, Bound, ParamSet, Potential, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Particles and the log-density of the sampler state that produced them.
#[derive(Clone, Debug)]
pub struct PhaseState {
    /// `B×d` positions.
    pub x: Var,
    /// `B×l` momenta.
    pub v: Var,
    /// `B×1` joint log-density.
    pub log_q: Var,
    pub step_index: usize,
}

/// Clipping applied inside the layers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepControl {
    /// Row-norm bound on `∇ₓf` before each momentum update.
    pub grad_clip: Option<f64>,
    /// Row-norm bound on the momentum before each position update.
    pub v_clip: Option<f64>,
}

impl StepControl {
    pub fn clip_velocity(&self, tape: &mut Tape, v: Var) -> Var {
        match self.v_clip {
            Some(c) => tape.clip_row_norm(v, c),
            None => v,
        }
    }
}

/// A potential bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Field<'a> {
    pub potential: &'a Potential,
    pub params: &'a Bound,
}

impl<'a> Field<'a> {
    pub fn new(potential: &'a Potential, params: &'a Bound) -> Self {
        Field { potential, params }
    }

    /// `∇ₓf(x)`, with numeric failures reported as divergence at `step`.
    pub fn grad(&self, tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
        grad_x(tape, self.potential, self.params, x).map_err(|e| match e {
            Error::NumericOverflow { .. } | Error::NonFiniteGradient { .. } => Error::Divergence { step },
            other => other,
        })
    }

    pub fn clipped_grad(&self, tape: &mut Tape, x: Var, control: &StepControl, step: usize) -> Result<Var> {
        let g = self.grad(tape, x, step)?;
        Ok(match control.grad_clip {
            Some(c) => tape.clip_row_norm(g, c),
            None => g,
        })
    }
}

pub(crate) fn check_state(tape: &Tape, state: &PhaseState, step: usize) -> Result<()> {
    for v in [state.x, state.v, state.log_q] {
        if tape.first_nonfinite_row(v).is_some() {
            return Err(Error::Divergence { step });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Leapfrog,
    Generalized,
    Langevin,
    DetLangevin,
}

/// Configuration of a dynamics stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSpec {
    pub kind: LayerKind,
    pub steps: usize,
    pub eta_init: f64,
    pub learn_eta: bool,
    pub grad_clip: Option<f64>,
    pub v_clip: Option<f64>,
    /// Multiply the Langevin position update by the step size.
    pub langevin_scale_position_update: bool,
    pub generalized_hidden: usize,
    pub logdet: LogdetConfig,
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        DynamicsSpec {
            kind: LayerKind::Leapfrog,
            steps: 5,
            eta_init: 0.1,
            learn_eta: true,
            grad_clip: Some(10.0),
            v_clip: None,
            langevin_scale_position_update: false,
            generalized_hidden: 16,
            logdet: LogdetConfig::default(),
        }
    }
}

impl DynamicsSpec {
    pub fn control(&self) -> StepControl {
        StepControl {
            grad_clip: self.grad_clip,
            v_clip: self.v_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_init >= 0.0 && self.eta_init.is_finite()) {
            return Err(Error::Config("dynamics.eta_init must be finite and >= 0".into()));
        }
        for (name, c) in [("grad_clip", self.grad_clip), ("v_clip", self.v_clip)] {
            if let Some(c) = c {
                if !(c > 0.0) {
                    return Err(Error::Config(format!("dynamics.{name} must be positive")));
                }
            }
        }
        if self.kind == LayerKind::Generalized && self.generalized_hidden == 0 {
            return Err(Error::Config("dynamics.generalized_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// End state of a trajectory and the squared momenta entering the kinetic penalty.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub state: PhaseState,
    /// `B×1`: `‖v^T‖²` for leapfrog stacks, `Σᵢ ‖vⁱ‖²` for Langevin stacks.
    pub kinetic: Var,
}

/// `T` layers of one kind with step sizes shared across time.
///
/// Step sizes are stored as `log_eta`; the generalized layer's auxiliary
/// networks follow under `s_v.*`, `s_x.*`, `g_v.*`, `g_x.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsStack {
    spec: DynamicsSpec,
    dim: usize,
    noise_std: f64,
    params: ParamSet,
}

impl DynamicsStack {
    /// `noise_std` is the scale of fresh Langevin momenta.
    pub fn new(spec: DynamicsSpec, dim: usize, noise_std: f64, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let eta_cols = if spec.kind == LayerKind::Generalized { 1 } else { dim };
        params.push("log_eta", Array2::from_elem((1, eta_cols), spec.eta_init.ln()));
        if spec.kind == LayerKind::Generalized {
            Self::layout(&spec, dim).init_params(&mut params, rng, true)?;
        }
        Ok(DynamicsStack {
            spec,
            dim,
            noise_std,
            params,
        })
    }

    fn layout(spec: &DynamicsSpec, dim: usize) -> GeneralizedLayout {
        GeneralizedLayout {
            dim,
            hidden: spec.generalized_hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn spec(&self) -> &DynamicsSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn eta(&self) -> Vec<f64> {
        self.params.get("log_eta").unwrap().iter().map(|l| l.exp()).collect()
    }

    /// Names of parameters that receive updates.
    pub fn trainable(&self) -> Vec<bool> {
        self.params
            .names()
            .iter()
            .map(|n| if n == "log_eta" { self.spec.learn_eta } else { true })
            .collect()
    }

    /// Runs all layers from `state0`.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        field: &Field<'_>,
        state0: &PhaseState,
        rng: &mut Stream,
    ) -> Result<Trajectory> {
        let eta = tape.exp(bound.get(0));
        let control = self.spec.control();
        let steps = self.spec.steps;
        match self.spec.kind {
            LayerKind::Leapfrog => {
                let state = hmc_embed(tape, field, state0, eta, &control, steps)?;
                let kinetic = squared_norm(tape, state.v);
                Ok(Trajectory { state, kinetic })
            }
            LayerKind::Generalized => {
                let vars = GeneralizedVars::split(eta, &bound.vars[1..]);
                let act = Self::layout(&self.spec, self.dim).activation;
                let mut state = state0.clone();
                for _ in 0..steps {
                    state = generalized_leapfrog_step(tape, field, &state, &vars, act, &control)?;
                }
                let kinetic = squared_norm(tape, state.v);
                Ok(Trajectory { state, kinetic })
            }
            LayerKind::Langevin => {
                if steps == 0 {
                    let kinetic = squared_norm(tape, state0.v);
                    return Ok(Trajectory {
                        state: state0.clone(),
                        kinetic,
                    });
                }
                let rows = tape.shape(state0.x).0;
                let mut state = state0.clone();
                let mut kinetic: Option<Var> = None;
                for i in 0..steps {
                    let (xi, lp) = if i == 0 {
                        (state.v, None)
                    } else {
                        let mut noise = rng.normal_matrix(rows, self.dim);
                        noise.mapv_inplace(|z| z * self.noise_std);
                        let xi = tape.constant(noise);
                        let lp = gaussian_log_density(tape, xi, self.noise_std);
                        (xi, Some(lp))
                    };
                    state = langevin_step(
                        tape,
                        field,
                        &state,
                        eta,
                        &control,
                        xi,
                        lp,
                        self.spec.langevin_scale_position_update,
                    )?;
                    let k = squared_norm(tape, state.v);
                    kinetic = Some(match kinetic {
                        Some(acc) => tape.add(acc, k),
                        None => k,
                    });
                }
                Ok(Trajectory {
                    state,
                    kinetic: kinetic.unwrap(),
                })
            }
            LayerKind::DetLangevin => {
                let mut state = state0.clone();
                for _ in 0..steps {
                    state = det_langevin_step(tape, field, &state, eta, &self.spec.logdet, rng)?;
                }
                let rows = tape.shape(state.x).0;
                let kinetic = tape.constant(Array2::zeros((rows, 1)));
                Ok(Trajectory { state, kinetic })
            }
        }
    }
}

/// Row-wise `‖v‖²` as `B×1`.
pub fn squared_norm(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.square(v);
    tape.row_sum(sq)
}

/// Hamiltonian `-f(x) + λ/2 ‖v‖²` per row, evaluated without recording.
pub fn hamiltonian(potential: &Potential, x: &Array2<f64>, v: &Array2<f64>, lambda: f64) -> Result<ndarray::Array1<f64>> {
    let f = potential.values(x)?;
    let k = v.map_axis(ndarray::Axis(1), |r| r.dot(&r));
    Ok(-f + k * (0.5 * lambda))
}
