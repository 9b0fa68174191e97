//! Stochastic estimates of `tr log(I - C)` from matrix-vector products.
//!
//! Both truncated series use Hutchinson probes `zᵀ p(C) z`. The default
//! probe design stacks blocks of mutually orthogonal Rademacher vectors
//! (rows of a Sylvester–Hadamard matrix under random column signs): each
//! probe is marginally Rademacher, so the estimator stays unbiased, and a
//! full block reproduces the trace exactly.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogdetMethod {
    /// `-Σ_{i=1..order} tr(Cⁱ)/i`.
    Taylor { order: usize },
    /// Chebyshev interpolant of `log(1 - t)` on `[-bound, bound]`.
    /// Without a bound, one is estimated by power iteration.
    Chebyshev {
        degree: usize,
        #[serde(default)]
        bound: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDesign {
    #[default]
    Orthogonal,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogdetConfig {
    pub method: LogdetMethod,
    pub probes: usize,
    #[serde(default)]
    pub design: ProbeDesign,
}

impl Default for LogdetConfig {
    fn default() -> Self {
        LogdetConfig {
            method: LogdetMethod::Taylor { order: 1 },
            probes: 1,
            design: ProbeDesign::Orthogonal,
        }
    }
}

impl LogdetConfig {
    fn validate(&self) -> Result<()> {
        let k = match self.method {
            LogdetMethod::Taylor { order } => order,
            LogdetMethod::Chebyshev { degree, .. } => degree,
        };
        if k < 1 {
            return Err(Error::Contract("series order must be at least 1".into()));
        }
        if self.probes < 1 {
            return Err(Error::Contract("at least one probe is required".into()));
        }
        if let LogdetMethod::Chebyshev { bound: Some(b), .. } = self.method {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Contract(format!("chebyshev bound {b} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `n` probe vectors of dimension `d`, one per row.
pub fn probes(n: usize, d: usize, design: ProbeDesign, rng: &mut Stream) -> Array2<f64> {
    match design {
        ProbeDesign::Iid => Array2::from_shape_simple_fn((n, d), || rng.rademacher()),
        ProbeDesign::Orthogonal => {
            let m = d.next_power_of_two();
            let mut out = Array2::zeros((n, d));
            let mut row = 0;
            while row < n {
                // Random column subset of the Hadamard matrix, random signs.
                let mut cols: Vec<usize> = (0..m).collect();
                for i in (1..m).rev() {
                    let j = rng.index(i + 1);
                    cols.swap(i, j);
                }
                let signs: Vec<f64> = (0..d).map(|_| rng.rademacher()).collect();
                for r in 0..m.min(n - row) {
                    for (j, &c) in cols.iter().take(d).enumerate() {
                        let h = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                        out[[row + r, j]] = h * signs[j];
                    }
                }
                row += m;
            }
            out
        }
    }
}

/// Chebyshev coefficients `c_0..c_k` of `t ↦ log(1 - bound·t)` on `[-1, 1]`.
pub fn chebyshev_coefficients(degree: usize, bound: f64) -> Vec<f64> {
    let k = degree;
    let nodes: Vec<f64> = (0..=k)
        .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / (k as f64 + 1.0)).cos())
        .collect();
    let fvals: Vec<f64> = nodes.iter().map(|s| (1.0 - bound * s).ln()).collect();
    (0..=k)
        .map(|i| {
            let sum: f64 = nodes
                .iter()
                .zip(&fvals)
                .map(|(s, f)| f * (i as f64 * s.acos()).cos())
                .sum();
            if i == 0 {
                sum / (k as f64 + 1.0)
            } else {
                2.0 * sum / (k as f64 + 1.0)
            }
        })
        .collect()
}

/// Row-wise linear map on a `B×d` tape node.
pub type ApplyFn<'a> = dyn FnMut(&mut Tape, Var) -> Result<Var> + 'a;

/// Per-row estimate of `tr log(I - C)` as a `B×1` node.
///
/// `apply` maps each row `z` to `C z`; it may record differentiable nodes,
/// in which case the estimate is differentiable too. A Chebyshev bound of
/// `None` must be resolved by the caller beforehand.
pub fn trace_log_estimate(
    tape: &mut Tape,
    apply: &mut ApplyFn<'_>,
    rows: usize,
    d: usize,
    cfg: &LogdetConfig,
    rng: &mut Stream,
) -> Result<Var> {
    cfg.validate()?;
    let z_all = probes(cfg.probes, d, cfg.design, rng);
    let mut total: Option<Var> = None;
    for z_row in z_all.rows() {
        let z = z_row
            .to_owned()
            .insert_axis(ndarray::Axis(0))
            .broadcast((rows, d))
            .unwrap()
            .to_owned();
        let z = tape.constant(z);
        let est = match cfg.method {
            LogdetMethod::Taylor { order } => {
                let mut w = z;
                let mut acc: Option<Var> = None;
                for i in 1..=order {
                    w = apply(tape, w)?;
                    let zw = tape.mul(z, w);
                    let q = tape.row_sum(zw);
                    let term = tape.scale(q, -1.0 / i as f64);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
                acc.unwrap()
            }
            LogdetMethod::Chebyshev { degree, bound } => {
                let bound = bound.ok_or_else(|| {
                    Error::Contract("chebyshev bound must be resolved before estimation".into())
                })?;
                let coeffs = chebyshev_coefficients(degree, bound);
                let inv = 1.0 / bound;
                // R_0 z = z contributes c_0 · zᵀz = c_0 · d for Rademacher probes.
                let zz = tape.mul(z, z);
                let zz = tape.row_sum(zz);
                let mut acc = tape.scale(zz, coeffs[0]);
                let mut prev = z;
                let cz = apply(tape, z)?;
                let mut cur = tape.scale(cz, inv);
                for (i, c) in coeffs.iter().enumerate().skip(1) {
                    let zr = tape.mul(z, cur);
                    let q = tape.row_sum(zr);
                    let term = tape.scale(q, *c);
                    acc = tape.add(acc, term);
                    if i < degree {
                        let ccur = apply(tape, cur)?;
                        let twice = tape.scale(ccur, 2.0 * inv);
                        let next = tape.sub(twice, prev);
                        prev = cur;
                        cur = next;
                    }
                }
                acc
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, est),
            None => est,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / cfg.probes as f64))
}

/// Power-iteration estimate of the spectral radius of a symmetric operator.
pub fn spectral_radius(apply: &dyn Fn(&Array1<f64>) -> Array1<f64>, d: usize, iters: usize, rng: &mut Stream) -> f64 {
    let mut v = Array1::from_shape_simple_fn(d, || rng.normal());
    let mut norm = v.dot(&v).sqrt();
    let mut radius = 0.0;
    for _ in 0..iters.max(1) {
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let w = apply(&v);
        norm = w.dot(&w).sqrt();
        radius = norm;
        v = w;
    }
    radius
}

/// Estimates `log det(I - C)` for a single `d×d` operator given by `apply`.
pub fn logdet_estimate(
    apply: impl Fn(&Array1<f64>) -> Array1<f64>,
    d: usize,
    method: LogdetMethod,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut cfg = LogdetConfig {
        method,
        probes,
        design: ProbeDesign::Orthogonal,
    };
    cfg.validate()?;
    let mut rng = Stream::new(seed);
    if let LogdetMethod::Chebyshev { degree, bound: None } = method {
        let rho = spectral_radius(&apply, d, 50, &mut rng);
        cfg.method = LogdetMethod::Chebyshev {
            degree,
            bound: Some(chebyshev_bound(rho)),
        };
    }
    let mut tape = Tape::new();
    let mut rowwise = |tape: &mut Tape, z: Var| -> Result<Var> {
        let zm = tape.value(z).clone();
        let mut out = Array2::zeros(zm.raw_dim());
        for (i, row) in zm.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&apply(&row.to_owned()));
        }
        Ok(tape.constant(out))
    };
    let est = trace_log_estimate(&mut tape, &mut rowwise, 1, d, &cfg, &mut rng)?;
    Ok(tape.scalar(est))
}

/// Interval half-width used for a measured spectral radius.
pub fn chebyshev_bound(radius: f64) -> f64 {
    (radius * 1.1).clamp(1e-3, 0.999)
}

/// Laplace-expansion determinant of a small matrix of `B×1` column entries.
pub fn small_det(tape: &mut Tape, m: &[Vec<Var>]) -> Var {
    let n = m.len();
    if n == 1 {
        return m[0][0];
    }
    if n == 2 {
        let a = tape.mul(m[0][0], m[1][1]);
        let b = tape.mul(m[0][1], m[1][0]);
        return tape.sub(a, b);
    }
    let mut acc: Option<Var> = None;
    for j in 0..n {
        let minor: Vec<Vec<Var>> = m[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(c, _)| *c != j)
                    .map(|(_, v)| *v)
                    .collect()
            })
            .collect();
        let sub = small_det(tape, &minor);
        let term = tape.mul(m[0][j], sub);
        acc = Some(match acc {
            None => term,
            Some(a) if j % 2 == 1 => tape.sub(a, term),
            Some(a) => tape.add(a, term),
        });
    }
    acc.unwrap()
}
