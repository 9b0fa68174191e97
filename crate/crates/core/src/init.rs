//! Initial distributions `q⁰(x, v)` with exact sampling and log-density.
//!
//! Momenta are always `N(0, σ²I)` with `σ = momentum_std`, independent of
//! `x`. The joint `log_q` of a draw therefore splits into the position
//! part, which depends on the learnable parameters, and a momentum part
//! that does not.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Mat, ParamSet, Tape, Var};
use crate::dynamics::{gaussian_log_density, PhaseState};
use crate::error::{Error, Result};
use crate::rng::Stream;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Shift making `softplus(a + c) - 1` vanish at `a = 0`: `c = ln(e - 1)`.
const PLANAR_SHIFT: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gaussian,
    Planar,
    Empirical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpiricalMode {
    /// Rows drawn uniformly with replacement from the whole dataset.
    #[default]
    Dataset,
    /// The current minibatch itself.
    Minibatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub kind: InitKind,
    /// Momentum scale; `None` means `λ^(-1/2)`.
    pub momentum_std: Option<f64>,
    /// Start the Gaussian (or the flow's base affine) at the data moments.
    pub fit_to_data: bool,
    pub flow_layers: usize,
    /// Learnable elementwise affine in front of the planar layers.
    pub flow_affine: bool,
    pub empirical_mode: EmpiricalMode,
    /// Sample count for Monte-Carlo entropy estimates.
    pub entropy_samples: usize,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            kind: InitKind::Gaussian,
            momentum_std: None,
            fit_to_data: true,
            flow_layers: 10,
            flow_affine: true,
            empirical_mode: EmpiricalMode::Dataset,
            entropy_samples: 1000,
        }
    }
}

impl InitSpec {
    pub fn momentum_std(&self, lambda: f64) -> f64 {
        self.momentum_std.unwrap_or_else(|| lambda.powf(-0.5))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.momentum_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("init.momentum_std must be positive".into()));
            }
        }
        if self.kind == InitKind::Planar && self.flow_layers == 0 {
            return Err(Error::Config("init.flow_layers must be positive".into()));
        }
        Ok(())
    }
}

/// A draw recorded on the tape.
#[derive(Clone, Debug)]
pub struct InitDraw {
    pub state: PhaseState,
    /// `1×1` entropy of the position marginal: analytic, a Monte-Carlo
    /// estimate over this draw, or a constant zero.
    pub entropy: Var,
}

/// Diagonal Gaussian over `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussianInit {
    params: ParamSet,
}

impl DiagonalGaussianInit {
    pub fn new(mean: &[f64], std: &[f64]) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape {
                expected: vec![mean.len()],
                actual: vec![std.len()],
            });
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        let d = mean.len();
        let mut params = ParamSet::new();
        params.push("mean", Array2::from_shape_vec((1, d), mean.to_vec()).unwrap());
        params.push("log_std", Array2::from_shape_fn((1, d), |(_, j)| std[j].ln()));
        Ok(DiagonalGaussianInit { params })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(&vec![0.0; d], &vec![1.0; d]).unwrap()
    }

    /// Moment-matched to the rows of `data`.
    pub fn fit(data: &Mat) -> Result<Self> {
        let (mean, std) = moments(data)?;
        Self::new(mean.as_slice().unwrap(), std.as_slice().unwrap())
    }

    pub fn dim(&self) -> usize {
        self.params.values()[0].ncols()
    }

    pub fn mean(&self) -> Array1<f64> {
        self.params.values()[0].row(0).to_owned()
    }

    pub fn std(&self) -> Array1<f64> {
        self.params.values()[1].row(0).mapv(f64::exp)
    }

    /// `Σ log σ + d/2 log(2πe)`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        self.params.values()[1].sum() + 0.5 * d * (LOG_2PI + 1.0)
    }

    pub fn log_density(&self, x: &Mat) -> Array1<f64> {
        let mean = &self.params.values()[0];
        let log_std = &self.params.values()[1];
        let z = (x - mean) / log_std.mapv(f64::exp);
        let d = x.ncols() as f64;
        z.map_axis(Axis(1), |r| -0.5 * r.dot(&r)) - log_std.sum() - 0.5 * d * LOG_2PI
    }
}

/// Per-column mean and standard deviation, with a floor on the latter.
pub fn moments(data: &Mat) -> Result<(Array1<f64>, Array1<f64>)> {
    if data.nrows() == 0 {
        return Err(Error::Contract("cannot fit moments of an empty dataset".into()));
    }
    let mean = data.mean_axis(Axis(0)).unwrap();
    let std = data.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    Ok((mean, std))
}

/// `K` planar layers `z ↦ z + û tanh(wᵀz + b)` over a Gaussian base.
///
/// `û = u + (m(wᵀu) - wᵀu) w/‖w‖²` with `m(a) = softplus(a + ln(e-1)) - 1`,
/// so `wᵀû > -1` always and `u = 0` gives the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlowStack {
    dim: usize,
    layers: usize,
    affine: bool,
    params: ParamSet,
}

impl PlanarFlowStack {
    pub fn new(dim: usize, layers: usize, affine: bool, rng: &mut Stream) -> Self {
        let mut params = ParamSet::new();
        if affine {
            params.push("base.mean", Array2::zeros((1, dim)));
            params.push("base.log_std", Array2::zeros((1, dim)));
        }
        for k in 0..layers {
            params.push(format!("layer{k}.u"), rng.normal_matrix(1, dim) * 0.1);
            params.push(format!("layer{k}.w"), rng.normal_matrix(1, dim) * 0.1);
            params.push(format!("layer{k}.b"), Array2::zeros((1, 1)));
        }
        PlanarFlowStack {
            dim,
            layers,
            affine,
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Sets the base affine to the data moments when it exists.
    pub fn fit_base(&mut self, data: &Mat) -> Result<()> {
        if !self.affine {
            return Ok(());
        }
        let (mean, std) = moments(data)?;
        self.params.values_mut()[0].row_mut(0).assign(&mean);
        self.params.values_mut()[1].row_mut(0).assign(&std.mapv(f64::ln));
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Pushes base noise `eps` (`B×d`) through the flow; returns `x` and
    /// `log q(x)` as `B×1`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, eps: Var) -> (Var, Var) {
        let base = gaussian_log_density(tape, eps, 1.0);
        let (mut z, mut log_q, first) = if self.affine {
            let sigma = tape.exp(bound.get(1));
            let scaled = tape.mul(eps, sigma);
            let z = tape.add(scaled, bound.get(0));
            let lsum = tape.sum(bound.get(1));
            (z, tape.sub(base, lsum), 2)
        } else {
            (eps, base, 0)
        };
        for k in 0..self.layers {
            let u = bound.get(first + 3 * k);
            let w = bound.get(first + 3 * k + 1);
            let b = bound.get(first + 3 * k + 2);
            let (u_hat, wu_hat) = reparametrize(tape, u, w);
            let wz = tape.matmul_t(z, w, false, true);
            let pre = tape.add(wz, b);
            let h = tape.tanh(pre);
            let shift = tape.mul(h, u_hat);
            z = tape.add(z, shift);
            // log|1 + h'(a) wᵀû| with h' = 1 - tanh².
            let h2 = tape.square(h);
            let one_minus = {
                let n = tape.neg(h2);
                tape.offset(n, 1.0)
            };
            let inner = tape.mul(one_minus, wu_hat);
            let inner = tape.offset(inner, 1.0);
            let ld = tape.log(inner);
            log_q = tape.sub(log_q, ld);
        }
        (z, log_q)
    }
}

/// Returns `û` (`1×d`) and `wᵀû` (`1×1`).
fn reparametrize(tape: &mut Tape, u: Var, w: Var) -> (Var, Var) {
    let wu = {
        let p = tape.mul(w, u);
        tape.sum(p)
    };
    let shifted = tape.offset(wu, PLANAR_SHIFT);
    let sp = tape.softplus(shifted);
    let m = tape.offset(sp, -1.0);
    let w2 = {
        let s = tape.square(w);
        let s = tape.sum(s);
        tape.offset(s, 1e-300)
    };
    let coef = {
        let diff = tape.sub(m, wu);
        tape.div(diff, w2)
    };
    let corr = tape.mul(coef, w);
    (tape.add(u, corr), m)
}

/// Positions drawn from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalInit {
    data: Mat,
    mode: EmpiricalMode,
}

impl EmpiricalInit {
    pub fn new(data: Mat, mode: EmpiricalMode) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Contract("empirical init needs a non-empty dataset".into()));
        }
        Ok(EmpiricalInit { data, mode })
    }

    pub fn mode(&self) -> EmpiricalMode {
        self.mode
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitModel {
    Gaussian(DiagonalGaussianInit),
    Planar(PlanarFlowStack),
    Empirical(EmpiricalInit),
}

/// An initial distribution with its momentum scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Initializer {
    pub kind: InitModel,
    momentum_std: f64,
    entropy_samples: usize,
    empty: ParamSet,
}

impl Initializer {
    pub fn new(kind: InitModel, momentum_std: f64) -> Self {
        Initializer {
            kind,
            momentum_std,
            entropy_samples: 1000,
            empty: ParamSet::new(),
        }
    }

    /// Builds from a spec; `data` supplies moments and empirical rows.
    pub fn from_spec(spec: &InitSpec, dim: usize, lambda: f64, data: &Mat, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let kind = match spec.kind {
            InitKind::Gaussian => InitModel::Gaussian(if spec.fit_to_data {
                DiagonalGaussianInit::fit(data)?
            } else {
                DiagonalGaussianInit::standard(dim)
            }),
            InitKind::Planar => {
                let mut flow = PlanarFlowStack::new(dim, spec.flow_layers, spec.flow_affine, rng);
                if spec.fit_to_data {
                    flow.fit_base(data)?;
                }
                InitModel::Planar(flow)
            }
            InitKind::Empirical => InitModel::Empirical(EmpiricalInit::new(data.clone(), spec.empirical_mode)?),
        };
        let mut init = Initializer::new(kind, spec.momentum_std(lambda));
        init.entropy_samples = spec.entropy_samples.max(1);
        Ok(init)
    }

    pub fn momentum_std(&self) -> f64 {
        self.momentum_std
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            InitModel::Gaussian(g) => g.dim(),
            InitModel::Planar(p) => p.dim(),
            InitModel::Empirical(e) => e.data.ncols(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match &self.kind {
            InitModel::Gaussian(g) => &g.params,
            InitModel::Planar(p) => &p.params,
            InitModel::Empirical(_) => &self.empty,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match &mut self.kind {
            InitModel::Gaussian(g) => &mut g.params,
            InitModel::Planar(p) => &mut p.params,
            InitModel::Empirical(_) => &mut self.empty,
        }
    }

    /// Draws `n` states. `minibatch` is required for the minibatch
    /// empirical mode, which ignores `n`.
    pub fn sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        n: usize,
        rng: &mut Stream,
        minibatch: Option<&Mat>,
    ) -> Result<InitDraw> {
        if n == 0 {
            return Err(Error::Contract("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let (x, log_qx, entropy, rows) = match &self.kind {
            InitModel::Gaussian(_) => {
                let eps = tape.constant(rng.normal_matrix(n, d));
                let sigma = tape.exp(bound.get(1));
                let scaled = tape.mul(eps, sigma);
                let x = tape.add(scaled, bound.get(0));
                let base = gaussian_log_density(tape, eps, 1.0);
                let lsum = tape.sum(bound.get(1));
                let log_qx = tape.sub(base, lsum);
                let entropy = tape.offset(lsum, 0.5 * d as f64 * (LOG_2PI + 1.0));
                (x, log_qx, entropy, n)
            }
            InitModel::Planar(p) => {
                let eps = tape.constant(rng.normal_matrix(n, d));
                let (x, log_qx) = p.forward(tape, bound, eps);
                let m = tape.mean(log_qx);
                let entropy = tape.neg(m);
                (x, log_qx, entropy, n)
            }
            InitModel::Empirical(e) => {
                let xs = match e.mode {
                    EmpiricalMode::Dataset => {
                        let idx: Vec<usize> = (0..n).map(|_| rng.index(e.data.nrows())).collect();
                        e.data.select(Axis(0), &idx)
                    }
                    EmpiricalMode::Minibatch => minibatch
                        .ok_or_else(|| Error::Contract("minibatch empirical init needs the batch".into()))?
                        .clone(),
                };
                let rows = xs.nrows();
                let x = tape.constant(xs);
                let zero = tape.constant(Array2::zeros((rows, 1)));
                let entropy = tape.scalar_constant(0.0);
                (x, zero, entropy, rows)
            }
        };
        let mut vm = rng.normal_matrix(rows, d);
        vm.mapv_inplace(|a| a * self.momentum_std);
        let v = tape.constant(vm);
        let log_qv = gaussian_log_density(tape, v, self.momentum_std);
        let log_q = tape.add(log_qx, log_qv);
        Ok(InitDraw {
            state: PhaseState {
                x,
                v,
                log_q,
                step_index: 0,
            },
            entropy,
        })
    }

    /// Plain draw of `n` positions, momenta and joint log-densities.
    pub fn sample_values(&self, n: usize, rng: &mut Stream) -> Result<(Mat, Mat, Array1<f64>)> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape, false);
        let draw = self.sample(&mut tape, &bound, n, rng, None)?;
        Ok((
            tape.value(draw.state.x).clone(),
            tape.value(draw.state.v).clone(),
            tape.value(draw.state.log_q).column(0).to_owned(),
        ))
    }

    /// Entropy of the position marginal: analytic for the Gaussian, a
    /// Monte-Carlo estimate for the flow and zero for the empirical init.
    pub fn entropy(&self, rng: &mut Stream) -> Result<f64> {
        Ok(match &self.kind {
            InitModel::Gaussian(g) => g.entropy(),
            InitModel::Planar(_) => {
                let mut tape = Tape::new();
                let bound = self.params().bind(&mut tape, false);
                let draw = self.sample(&mut tape, &bound, self.entropy_samples, rng, None)?;
                tape.scalar(draw.entropy)
            }
            InitModel::Empirical(_) => 0.0,
        })
    }

    /// Entropy of the momentum marginal.
    pub fn momentum_entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (LOG_2PI + 1.0) + self.dim() as f64 * self.momentum_std.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standard_gaussian_density_at_origin() {
        let g = DiagonalGaussianInit::standard(2);
        let lq = g.log_density(&array![[0.0, 0.0]]);
        assert!((lq[0] + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn gaussian_entropy_closed_form_and_scaling() {
        let g = DiagonalGaussianInit::standard(1);
        assert!((g.entropy() - 1.41894).abs() < 1e-5);
        let g2 = DiagonalGaussianInit::new(&[0.0], &[2.0]).unwrap();
        assert!((g2.entropy() - g.entropy() - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn planar_with_zero_u_is_identity() {
        let mut rng = Stream::new(1);
        let mut flow = PlanarFlowStack::new(2, 3, false, &mut rng);
        for k in 0..3 {
            flow.params_mut().get_mut(&format!("layer{k}.u")).unwrap().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = flow.params().bind(&mut tape, false);
        let eps_m = rng.normal_matrix(4, 2);
        let eps = tape.constant(eps_m.clone());
        let (x, lq) = flow.forward(&mut tape, &b, eps);
        assert_eq!(tape.value(x), &eps_m);
        let base = DiagonalGaussianInit::standard(2).log_density(&eps_m);
        for i in 0..4 {
            assert!((tape.value(lq)[[i, 0]] - base[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn empirical_single_point() {
        let init = Initializer::new(
            InitModel::Empirical(EmpiricalInit::new(array![[0.0, 0.0]], EmpiricalMode::Dataset).unwrap()),
            1.0,
        );
        let (x, _, _) = init.sample_values(5, &mut Stream::new(2)).unwrap();
        assert!(x.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn empirical_rejects_empty_dataset() {
        assert!(matches!(
            EmpiricalInit::new(Array2::zeros((0, 2)), EmpiricalMode::Dataset),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn momentum_scale_follows_lambda() {
        let spec = InitSpec::default();
        assert!((spec.momentum_std(4.0) - 0.5).abs() < 1e-15);
    }
}
