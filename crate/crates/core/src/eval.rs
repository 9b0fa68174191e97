//! Sample-quality metrics and an MCMC sampler for models without one.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mat, Potential};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

/// Unbiased squared MMD under a Gaussian kernel `exp(-‖a-b‖²/(2σ²))`.
pub fn mmd2(x: &Mat, y: &Mat, bandwidth: Bandwidth) -> Result<f64> {
    check_pair(x, y)?;
    let sigma = match bandwidth {
        Bandwidth::Median => median_distance(x, y)?,
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(_) => return Err(Error::ZeroBandwidth),
    };
    let gamma = 0.5 / (sigma * sigma);
    let (m, n) = (x.nrows() as f64, y.nrows() as f64);
    let kxx = kernel_sum(x, x, gamma, true);
    let kyy = kernel_sum(y, y, gamma, true);
    let kxy = kernel_sum(x, y, gamma, false);
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

fn check_pair(x: &Mat, y: &Mat) -> Result<()> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::Contract("mmd needs at least two points per side".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape {
            expected: vec![x.nrows(), x.ncols()],
            actual: vec![y.nrows(), y.ncols()],
        });
    }
    Ok(())
}

fn squared_distances(a: &Mat, b: &Mat) -> Mat {
    let na = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t()) * -2.0;
    d += &na.insert_axis(Axis(1));
    d += &nb.insert_axis(Axis(0));
    d.mapv_inplace(|v| v.max(0.0));
    d
}

fn kernel_sum(a: &Mat, b: &Mat, gamma: f64, skip_diagonal: bool) -> f64 {
    let d = squared_distances(a, b);
    let mut total = 0.0;
    for ((i, j), v) in d.indexed_iter() {
        if skip_diagonal && i == j {
            continue;
        }
        total += (-gamma * v).exp();
    }
    total
}

/// Median of the pairwise distances among the rows of `x` and `y` pooled.
pub fn median_distance(x: &Mat, y: &Mat) -> Result<f64> {
    let pooled = ndarray::concatenate(Axis(0), &[x.view(), y.view()]).map_err(|_| Error::Shape {
        expected: vec![x.ncols()],
        actual: vec![y.ncols()],
    })?;
    let n = pooled.nrows();
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = pooled.row(i);
        for j in i + 1..n {
            let b = pooled.row(j);
            values.push(a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
        }
    }
    if values.is_empty() {
        return Err(Error::ZeroBandwidth);
    }
    let mid = values.len() / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let mut med = upper.sqrt();
    if values.len() % 2 == 0 {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        med = 0.5 * (med + lower.sqrt());
    }
    if !(med > 0.0) {
        return Err(Error::ZeroBandwidth);
    }
    Ok(med)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    /// Proposals per chain.
    pub burn_in: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    /// Tune the step size toward `target_accept` during the first half.
    pub adapt: bool,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            burn_in: 300,
            leapfrog_steps: 10,
            step_size: 0.1,
            adapt: true,
            target_accept: 0.65,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HmcRun {
    pub samples: Mat,
    pub acceptance: f64,
    pub step_size: f64,
}

/// Runs one Metropolis-corrected HMC chain per row of `start` and returns
/// the final states.
pub fn hmc_sample_model(potential: &Potential, start: &Mat, cfg: &HmcConfig, rng: &mut Stream) -> Result<HmcRun> {
    let (n, d) = start.dim();
    let mut x = start.clone();
    let mut f = potential.values(&x)?;
    let mut eta = cfg.step_size;
    let mut accepted = 0usize;
    for it in 0..cfg.burn_in {
        let v0 = rng.normal_matrix(n, d);
        let (x1, v1) = leapfrog_plain(potential, &x, &v0, eta, cfg.leapfrog_steps)?;
        let f1 = potential.values(&x1)?;
        let mut step_accepts = 0usize;
        for i in 0..n {
            let k0 = 0.5 * v0.row(i).dot(&v0.row(i));
            let k1 = 0.5 * v1.row(i).dot(&v1.row(i));
            let log_ratio = (f1[i] - k1) - (f[i] - k0);
            let ok = log_ratio.is_finite() && (log_ratio >= 0.0 || rng.uniform() < log_ratio.exp());
            if ok {
                x.row_mut(i).assign(&x1.row(i));
                f[i] = f1[i];
                step_accepts += 1;
            }
        }
        accepted += step_accepts;
        if cfg.adapt && it < cfg.burn_in / 2 {
            let rate = step_accepts as f64 / n as f64;
            eta *= (0.5 * (rate - cfg.target_accept)).exp();
        }
    }
    let acceptance = if cfg.burn_in == 0 {
        1.0
    } else {
        accepted as f64 / (cfg.burn_in * n) as f64
    };
    if cfg.burn_in > 0 && acceptance < 0.01 {
        log::warn!(
            "hmc acceptance {acceptance:.4} over {} proposals (final step size {eta:.3e}, {} leapfrog steps)",
            cfg.burn_in,
            cfg.leapfrog_steps
        );
    }
    Ok(HmcRun {
        samples: x,
        acceptance,
        step_size: eta,
    })
}

/// Leapfrog on plain matrices with unit mass.
pub fn leapfrog_plain(potential: &Potential, x: &Mat, v: &Mat, eta: f64, steps: usize) -> Result<(Mat, Mat)> {
    let mut x = x.clone();
    let mut v = v.clone();
    if steps == 0 {
        return Ok((x, v));
    }
    let mut g = potential.gradients(&x)?;
    for _ in 0..steps {
        v.scaled_add(0.5 * eta, &g);
        x.scaled_add(eta, &v);
        g = potential.gradients(&x)?;
        v.scaled_add(0.5 * eta, &g);
    }
    Ok((x, v))
}

/// Metropolis acceptance probability `min(1, exp(-ΔH))`.
pub fn acceptance_probability(h_old: f64, h_new: f64) -> f64 {
    (h_old - h_new).exp().min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub relative: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

/// `|learned - truth| / max(|truth|, 1e-8)` per entry.
pub fn param_error(truth: &[f64], learned: &[f64]) -> Result<ParamError> {
    if truth.len() != learned.len() || truth.is_empty() {
        return Err(Error::Shape {
            expected: vec![truth.len()],
            actual: vec![learned.len()],
        });
    }
    let relative: Vec<f64> = truth
        .iter()
        .zip(learned)
        .map(|(t, l)| (l - t).abs() / t.abs().max(1e-8))
        .collect();
    let max = relative.iter().copied().fold(0.0, f64::max);
    let mean = relative.iter().sum::<f64>() / relative.len() as f64;
    Ok(ParamError { relative, max, mean })
}

/// Running average over the most recent `window` parameter snapshots.
#[derive(Clone, Debug)]
pub struct TailAverage {
    window: usize,
    snapshots: std::collections::VecDeque<Vec<f64>>,
}

impl TailAverage {
    pub fn new(window: usize) -> Self {
        TailAverage {
            window: window.max(1),
            snapshots: Default::default(),
        }
    }

    pub fn push(&mut self, flat: Vec<f64>) {
        if self.snapshots.len() == self.window {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(flat);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn average(&self) -> Option<Vec<f64>> {
        let first = self.snapshots.front()?;
        let mut acc = vec![0.0; first.len()];
        for s in &self.snapshots {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        let k = self.snapshots.len() as f64;
        Some(acc.into_iter().map(|a| a / k).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistogram {
    /// `bins + 1` shared edges.
    pub edges: Vec<f64>,
    pub model: Vec<usize>,
    pub data: Vec<usize>,
}

impl EnergyHistogram {
    /// `Σ min(pᵢ, qᵢ)` of the normalised histograms.
    pub fn overlap(&self) -> f64 {
        let tm = self.model.iter().sum::<usize>().max(1) as f64;
        let td = self.data.iter().sum::<usize>().max(1) as f64;
        self.model
            .iter()
            .zip(&self.data)
            .map(|(&a, &b)| (a as f64 / tm).min(b as f64 / td))
            .sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "bin_lo,bin_hi,model,data").map_err(io)?;
        for i in 0..self.model.len() {
            writeln!(w, "{},{},{},{}", self.edges[i], self.edges[i + 1], self.model[i], self.data[i]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Histograms of `f` over model and data samples on a shared grid.
pub fn energy_histogram(potential: &Potential, model: &Mat, data: &Mat, bins: usize) -> Result<EnergyHistogram> {
    if bins < 2 {
        return Err(Error::Contract("at least two bins are required".into()));
    }
    let fm = potential.values(model)?;
    let fd = potential.values(data)?;
    let (mut lo, mut hi) = fm
        .iter()
        .chain(fd.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 0.0;
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |vals: &Array1<f64>| {
        let mut c = vec![0usize; bins];
        for &v in vals {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    Ok(EnergyHistogram {
        edges,
        model: count(&fm),
        data: count(&fd),
    })
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: String,
    pub estimator: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd_e3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_error: Option<ParamError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hmc_acceptance: Option<f64>,
}

/// Sample mean and covariance of the rows.
pub fn mean_and_cov(x: &Mat) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap();
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n - 1.0);
    (mean, cov)
}
