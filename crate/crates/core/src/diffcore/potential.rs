//! Potential functions `f(x)` and the differential operators built on them.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the output is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: ParamSet,
}

impl Mlp {
    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut params = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(
                format!("layer{i}.weight"),
                rng.uniform_matrix(fan_in, fan_out, -bound, bound),
            );
            params.push(
                format!("layer{i}.bias"),
                rng.uniform_matrix(1, fan_out, -bound, bound),
            );
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            params,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        let mut rng = Stream::new(0);
        let mut m = Mlp::new(widths, activation, &mut rng)?;
        for v in m.params.values_mut() {
            v.fill(0.0);
        }
        Ok(m)
    }

    /// Zeroes the output layer so the network starts as the constant 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.widths.len() - 2;
        for suffix in ["weight", "bias"] {
            if let Some(v) = self.params.get_mut(&format!("layer{last}.{suffix}")) {
                v.fill(0.0);
            }
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of layers (affine maps).
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Records the forward pass; `vars` are this network's bound parameters.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        mlp_forward(tape, self.activation, vars, x)
    }
}

/// Forward pass over `[w0, b0, w1, b1, ...]`, activation on all but the last layer.
pub fn mlp_forward(tape: &mut Tape, activation: Activation, vars: &[Var], x: Var) -> Var {
    debug_assert!(vars.len() % 2 == 0);
    let layers = vars.len() / 2;
    let mut h = x;
    for i in 0..layers {
        let z = tape.matmul(h, vars[2 * i]);
        let z = tape.add(z, vars[2 * i + 1]);
        h = if i + 1 < layers {
            activation.apply(tape, z)
        } else {
            z
        };
    }
    h
}

/// MLP potential with scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPotential {
    net: Mlp,
}

impl MlpPotential {
    /// `hidden` lists hidden widths; input is `dim`, output is 1.
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(MlpPotential {
            net: Mlp::new(&widths, activation, rng)?,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

/// `f(x) = -½ Σ prec_i (x_i - μ_i)²`, precision stored as its log.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticPotential {
    params: ParamSet,
}

impl QuadraticPotential {
    pub fn new(mean: &[f64], precision: &[f64]) -> Result<Self> {
        if mean.len() != precision.len() || mean.is_empty() {
            return Err(Error::Config("mean and precision must have equal nonzero length".into()));
        }
        if precision.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Config("precision entries must be positive".into()));
        }
        let d = mean.len();
        let mut params = ParamSet::new();
        params.push("mean", Array2::from_shape_vec((1, d), mean.to_vec()).unwrap());
        params.push(
            "log_prec",
            Array2::from_shape_fn((1, d), |(_, j)| precision[j].ln()),
        );
        Ok(QuadraticPotential { params })
    }

    pub fn standard(d: usize) -> Self {
        QuadraticPotential::new(&vec![0.0; d], &vec![1.0; d]).unwrap()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.params.get("mean").unwrap().iter().copied().collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.params
            .get("log_prec")
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mean = bound.get(0);
        let prec = tape.exp(bound.get(1));
        let diff = tape.sub(x, mean);
        let sq = tape.square(diff);
        let weighted = tape.mul(sq, prec);
        let s = tape.row_sum(weighted);
        tape.scale(s, -0.5)
    }
}

/// The potential families supported by the estimators.
#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    Mlp(MlpPotential),
    Quadratic(QuadraticPotential),
}

impl Potential {
    pub fn dim(&self) -> usize {
        match self {
            Potential::Mlp(m) => m.net.widths[0],
            Potential::Quadratic(q) => q.params.get("mean").unwrap().ncols(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Potential::Mlp(m) => &m.net.params,
            Potential::Quadratic(q) => &q.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Potential::Mlp(m) => &mut m.net.params,
            Potential::Quadratic(q) => &mut q.params,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            Potential::Mlp(m) => Some(m.net.activation),
            Potential::Quadratic(_) => None,
        }
    }

    /// Fails for potentials whose second derivatives vanish almost everywhere.
    pub fn require_second_order(&self) -> Result<()> {
        match self.activation() {
            Some(Activation::Relu) => Err(Error::UnsupportedActivation("relu")),
            _ => Ok(()),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params().bind(tape, trainable)
    }

    /// Records `f(x)` as a `B×1` column without finiteness checks.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        match self {
            Potential::Mlp(m) => m.net.forward(tape, &bound.vars, x),
            Potential::Quadratic(q) => q.forward(tape, bound, x),
        }
    }

    /// `f` at each row of `x`, evaluated on a private tape.
    pub fn values(&self, x: &Mat) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = eval_f(&mut tape, self, &b, xv)?;
        Ok(tape.value(f).column(0).to_owned())
    }

    /// `∇ₓf` at each row of `x`, evaluated on a private tape.
    pub fn gradients(&self, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let g = grad_x(&mut tape, self, &b, xv)?;
        Ok(tape.value(g).clone())
    }
}

/// `f(x)` per row, recorded on the tape.
pub fn eval_f(tape: &mut Tape, potential: &Potential, bound: &Bound, x: Var) -> Result<Var> {
    let (_, d) = tape.shape(x);
    if d != potential.dim() {
        return Err(Error::Shape {
            expected: vec![potential.dim()],
            actual: vec![d],
        });
    }
    let f = potential.forward(tape, bound, x);
    if let Some(row) = tape.first_nonfinite_row(f) {
        return Err(Error::NumericOverflow { row });
    }
    Ok(f)
}

/// `∇ₓf(x)` per row. The result stays differentiable in the parameters.
pub fn grad_x(tape: &mut Tape, potential: &Potential, bound: &Bound, x: Var) -> Result<Var> {
    let f = eval_f(tape, potential, bound, x)?;
    let total = tape.sum(f);
    let g = tape.grad(total, &[x])?[0];
    if let Some(row) = tape.first_nonfinite_row(g) {
        return Err(Error::NonFiniteGradient { row });
    }
    Ok(g)
}

/// Gradient of a scalar `loss` with respect to every bound parameter.
pub fn grad_params(tape: &mut Tape, loss: Var, bound: &Bound) -> Result<Vec<Mat>> {
    bound.gradients(tape, loss)
}

/// Diagonal of the Hessian of `f` per row, via one grad-of-grad pass per
/// coordinate.
pub fn hessian_diag(tape: &mut Tape, potential: &Potential, bound: &Bound, x: Var) -> Result<Var> {
    potential.require_second_order()?;
    let g = grad_x(tape, potential, bound, x)?;
    let d = tape.shape(x).1;
    let mut cols = Vec::with_capacity(d);
    for i in 0..d {
        let gi = tape.slice_cols(g, i, 1);
        let s = tape.sum(gi);
        let hi = tape.grad(s, &[x])?[0];
        cols.push(tape.slice_cols(hi, i, 1));
    }
    Ok(tape.concat_cols(&cols))
}
