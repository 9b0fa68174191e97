use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::{eval_f, grad_x, hessian_diag, Bound, Mat, Potential, Tape, Var};
use crate::dynamics::{hamiltonian, hmc_embed, leapfrog_step, Field, PhaseState, StepControl};
use crate::error::{Error, Result};
use crate::init::moments;
use crate::rng::Stream;

/// Settings shared by CD and PCD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Metropolis correction of each chain's end point.
    pub mh: bool,
    pub grad_clip: Option<f64>,
    /// Adapt the step size towards `target_accept` (requires `mh`).
    pub adapt: bool,
    pub target_accept: f64,
    pub buffer_capacity: usize,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            steps: 15,
            step_size: 0.1,
            mh: false,
            grad_clip: Some(10.0),
            adapt: false,
            target_accept: 0.65,
            buffer_capacity: 10_000,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("cd.steps must be at least 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("cd.step_size must be finite and >= 0".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("cd.buffer_capacity must be positive".into()));
        }
        Ok(())
    }

    fn control(&self) -> StepControl {
        StepControl {
            grad_clip: self.grad_clip,
            v_clip: None,
        }
    }
}

/// Negative-phase samples and the two-term objective whose gradient is the
/// CD update.
#[derive(Clone, Debug)]
pub struct CdTrace {
    pub objective: Var,
    pub mean_f_data: Var,
    pub mean_f_model: Var,
    pub negatives: Mat,
    pub acceptance: Option<f64>,
}

/// `k` leapfrog steps from `start` with unit-variance momenta drawn from `rng`.
fn run_chains(
    potential: &Potential,
    start: &Mat,
    cfg: &CdConfig,
    eta: f64,
    rng: &mut Stream,
) -> Result<(Mat, Option<f64>)> {
    let (n, d) = start.dim();
    let v0 = rng.normal_matrix(n, d);
    let mut tape = Tape::new();
    let b = potential.bind(&mut tape, false);
    let field = Field::new(potential, &b);
    let x = tape.constant(start.clone());
    let v = tape.constant(v0.clone());
    let log_q = tape.constant(Array2::zeros((n, 1)));
    let state = PhaseState {
        x,
        v,
        log_q,
        step_index: 0,
    };
    let eta = tape.constant(Array2::from_elem((1, d), eta));
    let end = hmc_embed(&mut tape, &field, &state, eta, &cfg.control(), cfg.steps)?;
    let mut xk = tape.value(end.x).clone();
    if !cfg.mh {
        return Ok((xk, None));
    }
    let vk = tape.value(end.v).clone();
    let h0 = hamiltonian(potential, start, &v0, 1.0)?;
    let h1 = hamiltonian(potential, &xk, &vk, 1.0)?;
    let mut accepted = 0usize;
    for i in 0..n {
        let a = crate::eval::acceptance_probability(h0[i], h1[i]);
        if rng.uniform() < a {
            accepted += 1;
        } else {
            xk.row_mut(i).assign(&start.row(i));
        }
    }
    Ok((xk, Some(accepted as f64 / n as f64)))
}

fn two_term(tape: &mut Tape, potential: &Potential, bound: &Bound, data: &Mat, negatives: &Mat) -> Result<(Var, Var, Var)> {
    let xd = tape.constant(data.clone());
    let fd = eval_f(tape, potential, bound, xd)?;
    let md = tape.mean(fd);
    let xn = tape.constant(negatives.clone());
    let fnv = eval_f(tape, potential, bound, xn)?;
    let mn = tape.mean(fnv);
    Ok((tape.sub(md, mn), md, mn))
}

/// Contrastive divergence with chains started at the batch.
///
/// Momenta are the first draw from `rng` (one `B×d` standard normal matrix),
/// so a sampler that draws the same matrix after its positions reproduces
/// the negatives exactly.
pub fn cd_grad(
    tape: &mut Tape,
    data: &Mat,
    potential: &Potential,
    bound: &Bound,
    cfg: &CdConfig,
    eta: f64,
    rng: &mut Stream,
) -> Result<CdTrace> {
    if data.nrows() == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let (negatives, acceptance) = run_chains(potential, data, cfg, eta, rng)?;
    let (objective, mean_f_data, mean_f_model) = two_term(tape, potential, bound, data, &negatives)?;
    Ok(CdTrace {
        objective,
        mean_f_data,
        mean_f_model,
        negatives,
        acceptance,
    })
}

/// Persistent chain states with uniform slot replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    rows: Vec<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            rows: Vec::new(),
        }
    }

    /// Fills the buffer with `capacity` rows drawn uniformly from `data`
    /// (all of `data`, in order, when it fits).
    pub fn seeded(capacity: usize, data: &Mat, rng: &mut Stream) -> Self {
        let mut buf = ReplayBuffer::new(capacity);
        if data.nrows() <= buf.capacity {
            buf.rows = data.rows().into_iter().map(|r| r.to_vec()).collect();
        } else {
            for _ in 0..buf.capacity {
                buf.rows.push(data.row(rng.index(data.nrows())).to_vec());
            }
        }
        buf
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `n` distinct slots chosen uniformly (partial Fisher–Yates).
    pub fn draw_slots(&self, n: usize, rng: &mut Stream) -> Result<Vec<usize>> {
        if n > self.rows.len() {
            return Err(Error::Contract(format!(
                "replay buffer holds {} rows, {n} requested",
                self.rows.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        for i in 0..n {
            let j = i + rng.index(idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        Ok(idx)
    }

    pub fn gather(&self, slots: &[usize]) -> Mat {
        let d = self.rows.first().map_or(0, Vec::len);
        let mut m = Array2::zeros((slots.len(), d));
        for (r, &s) in slots.iter().enumerate() {
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&self.rows[s]));
        }
        m
    }

    /// Writes chain ends back into the slots they started from.
    pub fn scatter(&mut self, slots: &[usize], values: &Mat) {
        for (r, &s) in slots.iter().enumerate() {
            self.rows[s] = values.row(r).to_vec();
        }
    }

    /// Adds rows, replacing uniformly chosen slots once full.
    pub fn push(&mut self, values: &Mat, rng: &mut Stream) {
        for r in values.rows() {
            if self.rows.len() < self.capacity {
                self.rows.push(r.to_vec());
            } else {
                let s = rng.index(self.capacity);
                self.rows[s] = r.to_vec();
            }
        }
    }
}

/// Persistent CD: chains start from buffer slots and their ends replace them.
#[allow(clippy::too_many_arguments)]
pub fn pcd_grad(
    tape: &mut Tape,
    data: &Mat,
    potential: &Potential,
    bound: &Bound,
    cfg: &CdConfig,
    eta: f64,
    buffer: &mut ReplayBuffer,
    rng: &mut Stream,
) -> Result<CdTrace> {
    if data.nrows() == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let slots = buffer.draw_slots(data.nrows(), rng)?;
    let start = buffer.gather(&slots);
    let (negatives, acceptance) = run_chains(potential, &start, cfg, eta, rng)?;
    buffer.scatter(&slots, &negatives);
    let (objective, mean_f_data, mean_f_model) = two_term(tape, potential, bound, data, &negatives)?;
    Ok(CdTrace {
        objective,
        mean_f_data,
        mean_f_model,
        negatives,
        acceptance,
    })
}

/// `−mean Σᵢ (½(∂ᵢf)² + ∂²ᵢf)` over the batch.
pub fn sm_loss(tape: &mut Tape, data: &Mat, potential: &Potential, bound: &Bound) -> Result<Var> {
    potential.require_second_order()?;
    let x = tape.constant(data.clone());
    let g = grad_x(tape, potential, bound, x)?;
    let h = hessian_diag(tape, potential, bound, x)?;
    let sq = tape.square(g);
    let half = tape.scale(sq, 0.5);
    let terms = tape.add(half, h);
    let per_row = tape.row_sum(terms);
    let m = tape.mean(per_row);
    Ok(tape.neg(m))
}

/// Moment-matched diagonal Gaussian reference density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NoiseModel {
    /// Matches the data moments, with the spread multiplied by `scale`.
    pub fn fit(data: &Mat, scale: f64) -> Result<Self> {
        let (m, s) = moments(data)?;
        Ok(NoiseModel {
            mean: m.to_vec(),
            std: s.iter().map(|v| v * scale).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, n: usize, rng: &mut Stream) -> Mat {
        let mut z = rng.normal_matrix(n, self.dim());
        for mut row in z.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                *a = self.mean[j] + self.std[j] * *a;
            }
        }
        z
    }

    pub fn log_density(&self, x: &Mat) -> Array1<f64> {
        let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
        x.map_axis(Axis(1), |r| {
            r.iter()
                .enumerate()
                .map(|(j, a)| {
                    let z = (a - self.mean[j]) / self.std[j];
                    -0.5 * z * z - self.std[j].ln() - c
                })
                .sum()
        })
    }
}

/// `mean log h(data) + mean log(1 − h(noise))` from potential values and
/// reference log-densities, all `B×1`.
///
/// Uses `log h = −softplus(log pₙ − f)` and `log(1 − h) = −softplus(f − log pₙ)`.
pub fn nce_objective(tape: &mut Tape, f_data: Var, f_noise: Var, lpn_data: Var, lpn_noise: Var) -> Var {
    let a = tape.sub(lpn_data, f_data);
    let a = tape.softplus(a);
    let a = tape.mean(a);
    let b = tape.sub(f_noise, lpn_noise);
    let b = tape.softplus(b);
    let b = tape.mean(b);
    let s = tape.add(a, b);
    tape.neg(s)
}

/// NCE with as many noise draws as batch rows.
pub fn nce_loss(
    tape: &mut Tape,
    data: &Mat,
    potential: &Potential,
    bound: &Bound,
    noise: &NoiseModel,
    rng: &mut Stream,
) -> Result<Var> {
    let y = noise.sample(data.nrows(), rng);
    let col = |v: Array1<f64>| v.insert_axis(Axis(1));
    let lpd = tape.constant(col(noise.log_density(data)));
    let lpn = tape.constant(col(noise.log_density(&y)));
    let xd = tape.constant(data.clone());
    let xn = tape.constant(y);
    let fd = eval_f(tape, potential, bound, xd)?;
    let fnv = eval_f(tape, potential, bound, xn)?;
    Ok(nce_objective(tape, fd, fnv, lpd, lpn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpfConfig {
    pub step_size: f64,
    /// Upper clamp on `½(f(x') − f(x))`.
    pub exponent_bound: f64,
}

impl Default for MpfConfig {
    fn default() -> Self {
        MpfConfig {
            step_size: 0.1,
            exponent_bound: 20.0,
        }
    }
}

/// `−mean exp(½(f(x') − f(x)))` with `x'` one leapfrog step from `x` under a
/// fresh standard-normal momentum; `x'` stays differentiable in the parameters.
pub fn mpf_loss(
    tape: &mut Tape,
    data: &Mat,
    potential: &Potential,
    bound: &Bound,
    cfg: &MpfConfig,
    rng: &mut Stream,
) -> Result<Var> {
    let (n, d) = data.dim();
    let x = tape.constant(data.clone());
    let v = tape.constant(rng.normal_matrix(n, d));
    let log_q = tape.constant(Array2::zeros((n, 1)));
    let state = PhaseState {
        x,
        v,
        log_q,
        step_index: 0,
    };
    let eta = tape.constant(Array2::from_elem((1, d), cfg.step_size));
    let field = Field::new(potential, bound);
    let control = StepControl {
        grad_clip: None,
        v_clip: None,
    };
    let next = leapfrog_step(tape, &field, &state, eta, &control)?;
    let f0 = eval_f(tape, potential, bound, x)?;
    let f1 = eval_f(tape, potential, bound, next.x)?;
    let diff = tape.sub(f1, f0);
    let half = tape.scale(diff, 0.5);
    let clamped = tape.clamp(half, f64::NEG_INFINITY, cfg.exponent_bound);
    let e = tape.exp(clamped);
    let m = tape.mean(e);
    Ok(tape.neg(m))
}
