use serde::{Deserialize, Serialize};

use crate::diffcore::{eval_f, grad_x, Bound, Mat, Potential, Tape, Var};
use crate::dynamics::{squared_norm, DynamicsStack, Field};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiate through every unrolled sampler step.
    #[default]
    Bptt,
    /// Treat sampler outputs as constants in the potential gradient.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdeConfig {
    pub gradient_mode: GradientMode,
    pub lambda: f64,
    pub entropy_coeff: f64,
    /// Weight on the `λ/2 ‖v^T‖²` term.
    pub momentum_penalty: f64,
    /// Weight of `mean ‖∇ₓf(data)‖²` subtracted from the potential's objective.
    pub gradient_penalty: f64,
    /// Sampler updates per potential update.
    pub sampler_steps: usize,
    /// Take both updates from a single trace instead of re-sampling after the
    /// sampler step.
    pub simultaneous: bool,
}

impl Default for AdeConfig {
    fn default() -> Self {
        AdeConfig {
            gradient_mode: GradientMode::Bptt,
            lambda: 1.0,
            entropy_coeff: 1.0,
            momentum_penalty: 1.0,
            gradient_penalty: 0.0,
            sampler_steps: 1,
            simultaneous: false,
        }
    }
}

impl AdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("ade.lambda must be positive".into()));
        }
        for (name, v) in [
            ("entropy_coeff", self.entropy_coeff),
            ("momentum_penalty", self.momentum_penalty),
            ("gradient_penalty", self.gradient_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("ade.{name} must be finite and >= 0")));
            }
        }
        if self.sampler_steps == 0 && !self.simultaneous {
            return Err(Error::Config("ade.sampler_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Initial distribution followed by a dynamics stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    pub init: Initializer,
    pub dynamics: DynamicsStack,
}

/// Tape handles for one ADE evaluation.
///
/// `f_outer` is used for the explicit `f(data)` and `f(x^T)` terms, `f_dyn`
/// for the force field inside the dynamics. They are normally the same binding.
#[derive(Clone, Debug)]
pub struct AdeBindings {
    pub f_outer: Bound,
    pub f_dyn: Bound,
    pub init: Bound,
    pub dynamics: Bound,
}

impl Sampler {
    /// Binds the potential once (trainable) and the sampler parameters.
    pub fn bind(&self, tape: &mut Tape, potential: &Potential, trainable: bool) -> AdeBindings {
        let f = potential.bind(tape, trainable);
        AdeBindings {
            f_outer: f.clone(),
            f_dyn: f,
            init: self.init.params().bind(tape, trainable),
            dynamics: self.dynamics.params().bind(tape, trainable),
        }
    }

    /// Update mask for the sampler parameters, init first.
    pub fn trainable(&self) -> Vec<bool> {
        let mut m = vec![true; self.init.params().len()];
        m.extend(self.dynamics.trainable());
        m
    }

    /// `n` end states of the full sampler, without gradients.
    pub fn draw(&self, potential: &Potential, n: usize, rng: &mut Stream, minibatch: Option<&Mat>) -> Result<Mat> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, potential, false);
        let draw = self.init.sample(&mut tape, &b.init, n, rng, minibatch)?;
        let field = Field::new(potential, &b.f_dyn);
        let traj = self.dynamics.run(&mut tape, &b.dynamics, &field, &draw.state, rng)?;
        Ok(tape.value(traj.state.x).clone())
    }
}

/// Recorded ADE objective with its parts.
#[derive(Clone, Debug)]
pub struct AdeTrace {
    /// `ℓ`, ascended by the potential and descended by the sampler.
    pub loss: Var,
    /// Scalar whose parameter gradient is the potential's ascent direction.
    pub f_objective: Var,
    pub mean_f_data: Var,
    pub mean_f_model: Var,
    /// `H(q⁰) + mean(log q⁰ − log q^T)`.
    pub entropy: Var,
    /// `mean ‖v^T‖²` as accumulated by the stack.
    pub kinetic: Var,
    pub samples: Var,
}

/// Records the ADE objective on `tape` for one minibatch.
///
/// The sampler draws as many particles as the batch has rows.
#[allow(clippy::too_many_arguments)]
pub fn ade_loss(
    tape: &mut Tape,
    data: &Mat,
    potential: &Potential,
    sampler: &Sampler,
    b: &AdeBindings,
    cfg: &AdeConfig,
    rng: &mut Stream,
) -> Result<AdeTrace> {
    if data.nrows() == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let draw = sampler.init.sample(tape, &b.init, data.nrows(), rng, Some(data))?;
    let field = Field::new(potential, &b.f_dyn);
    let traj = sampler.dynamics.run(tape, &b.dynamics, &field, &draw.state, rng)?;

    let xd = tape.constant(data.clone());
    let fd = eval_f(tape, potential, &b.f_outer, xd)?;
    let mean_f_data = tape.mean(fd);
    let fm = eval_f(tape, potential, &b.f_outer, traj.state.x)?;
    let mean_f_model = tape.mean(fm);

    let kinetic = tape.mean(traj.kinetic);
    let penalty = tape.scale(kinetic, 0.5 * cfg.lambda * cfg.momentum_penalty);
    let dlq = tape.sub(draw.state.log_q, traj.state.log_q);
    let dlq = tape.mean(dlq);
    let entropy = tape.add(draw.entropy, dlq);
    let weighted = tape.scale(entropy, cfg.entropy_coeff);

    let gap = tape.sub(mean_f_data, mean_f_model);
    let with_penalty = tape.add(gap, penalty);
    let loss = tape.sub(with_penalty, weighted);

    let mut f_objective = match cfg.gradient_mode {
        GradientMode::Bptt => loss,
        GradientMode::Truncated => {
            let xt = tape.detach(traj.state.x);
            let ft = eval_f(tape, potential, &b.f_outer, xt)?;
            let mt = tape.mean(ft);
            tape.sub(mean_f_data, mt)
        }
    };
    if cfg.gradient_penalty > 0.0 {
        let g = grad_x(tape, potential, &b.f_outer, xd)?;
        let sq = squared_norm(tape, g);
        let m = tape.mean(sq);
        let p = tape.scale(m, cfg.gradient_penalty);
        f_objective = tape.sub(f_objective, p);
    }

    Ok(AdeTrace {
        loss,
        f_objective,
        mean_f_data,
        mean_f_model,
        entropy,
        kinetic,
        samples: traj.state.x,
    })
}

/// Ascent direction for the potential parameters.
pub fn ade_grad_f(tape: &mut Tape, trace: &AdeTrace, b: &AdeBindings) -> Result<Vec<Mat>> {
    b.f_outer.gradients(tape, trace.f_objective)
}

/// `∂ℓ/∂Θ` for the init parameters followed by the dynamics parameters.
pub fn ade_grad_sampler(tape: &mut Tape, trace: &AdeTrace, b: &AdeBindings) -> Result<Vec<Mat>> {
    let vars: Vec<Var> = b.init.vars.iter().chain(&b.dynamics.vars).copied().collect();
    let grads = tape.grad(trace.loss, &vars)?;
    Ok(grads.into_iter().map(|g| tape.value(g).clone()).collect())
}
