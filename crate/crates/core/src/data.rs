//! Synthetic datasets and CSV ingestion.
//!
//! The 2-D generators reconstruct two public toy-density suites. Noise
//! levels and scales are fixed below; `noise` in a [`DatasetSpec`]
//! overrides a generator's default noise standard deviation.
//!
//! | name        | construction |
//! |-------------|--------------|
//! | `2spirals`  | `t = 3π√u`; arm `(-t cos t + 0.5u₁, t sin t + 0.5u₂)/3` and its negation, plus `N(0, 0.1²)` |
//! | `Banana`    | `x₀ ~ N(0, 2²)`, `x₁ = 0.25(x₀² - 4) - 1 + N(0, 0.5²)` |
//! | `circles`   | radii 3 and 1.5 (equal halves), uniform angle, plus `N(0, 0.24²)` |
//! | `cos`       | `x₀ ~ U(-2.5, 2.5)`, `x₁ = 2.5 sin x₀` |
//! | `Cosine`    | `x₀ ~ U(-4, 4)`, `x₁ = 1.5 cos(1.5 x₀) + N(0, 0.2²)` |
//! | `Funnel`    | `a ~ N(0, 1.5²)` clipped to `[-4, 4]`, `b ~ N(0, e^a)`, returns `(a, b)` |
//! | `swissroll` | `t = 1.5π(1 + 2u)`, `(t cos t, t sin t)/5` plus `N(0, 0.2²)` |
//! | `line`      | `x₀ ~ U(-2.5, 2.5)`, `x₁ = x₀` |
//! | `moons`     | unit half-circles, the second offset by `(1, -0.5)`, plus `N(0, 0.1²)`, scaled by 2 and shifted by `(-1, -0.2)` |
//! | `Multiring` | radii 1, 2 and 3 with equal weight, uniform angle, radial `N(0, 0.1²)` |
//! | `pinwheel`  | 5 blades, radial std 0.3, tangential std 0.1, warp rate 0.25, scaled by 2 |
//! | `Ring`      | radius 2, uniform angle, radial `N(0, 0.1²)` |
//! | `Spiral`    | `t = 3π√u`, `(t cos t, t sin t)/3` plus `N(0, 0.15²)` |
//! | `Uniform`   | `U(-1, 1)²` |
//!
//! `diag_gaussian` draws `N(μ, diag(σ²))` in any dimension.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Stream purpose tags separating training and held-out draws.
const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const HELD_OUT_STREAM: u64 = 0x6865_6c64;

/// Held-out sample count.
pub const HELD_OUT_SIZE: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetName {
    TwoSpirals,
    Banana,
    Circles,
    Cos,
    Cosine,
    Funnel,
    Swissroll,
    Line,
    Moons,
    Multiring,
    Pinwheel,
    Ring,
    Spiral,
    Uniform,
    DiagGaussian,
}

impl DatasetName {
    /// The fourteen 2-D benchmark datasets in table order.
    pub const TABLE: [DatasetName; 14] = [
        DatasetName::TwoSpirals,
        DatasetName::Banana,
        DatasetName::Circles,
        DatasetName::Cos,
        DatasetName::Cosine,
        DatasetName::Funnel,
        DatasetName::Swissroll,
        DatasetName::Line,
        DatasetName::Moons,
        DatasetName::Multiring,
        DatasetName::Pinwheel,
        DatasetName::Ring,
        DatasetName::Spiral,
        DatasetName::Uniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::TwoSpirals => "2spirals",
            DatasetName::Banana => "Banana",
            DatasetName::Circles => "circles",
            DatasetName::Cos => "cos",
            DatasetName::Cosine => "Cosine",
            DatasetName::Funnel => "Funnel",
            DatasetName::Swissroll => "swissroll",
            DatasetName::Line => "line",
            DatasetName::Moons => "moons",
            DatasetName::Multiring => "Multiring",
            DatasetName::Pinwheel => "pinwheel",
            DatasetName::Ring => "Ring",
            DatasetName::Spiral => "Spiral",
            DatasetName::Uniform => "Uniform",
            DatasetName::DiagGaussian => "diag_gaussian",
        }
    }

    /// Default noise standard deviation, where the generator has one.
    pub fn default_noise(self) -> f64 {
        match self {
            DatasetName::TwoSpirals => 0.1,
            DatasetName::Banana => 0.5,
            DatasetName::Circles => 0.24,
            DatasetName::Cosine => 0.2,
            DatasetName::Swissroll => 0.2,
            DatasetName::Moons => 0.1,
            DatasetName::Multiring | DatasetName::Ring => 0.1,
            DatasetName::Pinwheel => 0.3,
            DatasetName::Spiral => 0.15,
            _ => 0.0,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::TABLE
            .iter()
            .chain(std::iter::once(&DatasetName::DiagGaussian))
            .find(|d| d.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }
}

impl Serialize for DatasetName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DatasetName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n: usize,
    /// Overrides the generator's default noise level.
    pub noise: Option<f64>,
    pub seed: u64,
    /// Dimension of `diag_gaussian`.
    pub dim: usize,
    /// Mean of `diag_gaussian`; zeros when empty.
    pub mean: Vec<f64>,
    /// Standard deviations of `diag_gaussian`; ones when empty.
    pub std: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: DatasetName::Moons,
            n: 10_000,
            noise: None,
            seed: 0,
            dim: 5,
            mean: Vec::new(),
            std: Vec::new(),
        }
    }
}

impl DatasetSpec {
    pub fn named(name: DatasetName, n: usize, seed: u64) -> Self {
        DatasetSpec {
            name,
            n,
            seed,
            ..DatasetSpec::default()
        }
    }

    pub fn dim(&self) -> usize {
        match self.name {
            DatasetName::DiagGaussian => self.dim,
            _ => 2,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or_else(|| self.name.default_noise())
    }

    /// Mean and standard deviations of `diag_gaussian` with defaults filled in.
    pub fn gaussian_params(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let mean = if self.mean.is_empty() { vec![0.0; d] } else { self.mean.clone() };
        let std = if self.std.is_empty() { vec![1.0; d] } else { self.std.clone() };
        if mean.len() != d || std.len() != d {
            return Err(Error::Config(format!(
                "diag_gaussian needs {d} means and {d} standard deviations, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("diag_gaussian standard deviations must be positive".into()));
        }
        Ok((mean, std))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset.n must be at least 1".into()));
        }
        if let Some(s) = self.noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config("dataset.noise must be finite and >= 0".into()));
            }
        }
        if self.name == DatasetName::DiagGaussian {
            if self.dim == 0 {
                return Err(Error::Config("dataset.dim must be at least 1".into()));
            }
            self.gaussian_params()?;
        }
        Ok(())
    }

    /// The same distribution with `HELD_OUT_SIZE` rows from a disjoint stream.
    pub fn held_out(&self) -> DatasetSpec {
        DatasetSpec {
            n: HELD_OUT_SIZE,
            ..self.clone()
        }
    }
}

/// Training draw of `spec.n` rows.
pub fn generate(spec: &DatasetSpec) -> Result<Mat> {
    generate_from(spec, &mut Stream::derive(spec.seed, TRAIN_STREAM))
}

/// Held-out draw of `HELD_OUT_SIZE` rows, disjoint in stream from [`generate`].
pub fn generate_held_out(spec: &DatasetSpec) -> Result<Mat> {
    generate_from(&spec.held_out(), &mut Stream::derive(spec.seed, HELD_OUT_STREAM))
}

/// Draws `spec.n` rows from `rng`.
pub fn generate_from(spec: &DatasetSpec, rng: &mut Stream) -> Result<Mat> {
    spec.validate()?;
    let n = spec.n;
    let s = spec.noise();
    let tau = std::f64::consts::TAU;
    let pi = std::f64::consts::PI;
    let mut out = Array2::zeros((n, spec.dim()));
    let mut put = |i: usize, x: f64, y: f64| {
        out[[i, 0]] = x;
        out[[i, 1]] = y;
    };
    match spec.name {
        DatasetName::TwoSpirals => {
            for i in 0..n {
                let t = rng.uniform().sqrt() * 3.0 * pi;
                let ax = -t.cos() * t + rng.uniform() * 0.5;
                let ay = t.sin() * t + rng.uniform() * 0.5;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                put(i, sign * ax / 3.0 + s * rng.normal(), sign * ay / 3.0 + s * rng.normal());
            }
        }
        DatasetName::Banana => {
            for i in 0..n {
                let a = 2.0 * rng.normal();
                put(i, a, 0.25 * (a * a - 4.0) - 1.0 + s * rng.normal());
            }
        }
        DatasetName::Circles => {
            for i in 0..n {
                let r = if i % 2 == 0 { 3.0 } else { 1.5 };
                let a = tau * rng.uniform();
                put(i, r * a.cos() + s * rng.normal(), r * a.sin() + s * rng.normal());
            }
        }
        DatasetName::Cos => {
            for i in 0..n {
                let a = rng.uniform_in(-2.5, 2.5);
                put(i, a, 2.5 * a.sin() + s * rng.normal());
            }
        }
        DatasetName::Cosine => {
            for i in 0..n {
                let a = rng.uniform_in(-4.0, 4.0);
                put(i, a, 1.5 * (1.5 * a).cos() + s * rng.normal());
            }
        }
        DatasetName::Funnel => {
            for i in 0..n {
                let a = (1.5 * rng.normal()).clamp(-4.0, 4.0);
                put(i, a, (0.5 * a).exp() * rng.normal());
            }
        }
        DatasetName::Swissroll => {
            for i in 0..n {
                let t = 1.5 * pi * (1.0 + 2.0 * rng.uniform());
                put(i, t * t.cos() / 5.0 + s * rng.normal(), t * t.sin() / 5.0 + s * rng.normal());
            }
        }
        DatasetName::Line => {
            for i in 0..n {
                let a = rng.uniform_in(-2.5, 2.5);
                put(i, a, a + s * rng.normal());
            }
        }
        DatasetName::Moons => {
            for i in 0..n {
                let t = pi * rng.uniform();
                let (x, y) = if i % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x = x + s * rng.normal();
                let y = y + s * rng.normal();
                put(i, 2.0 * x - 1.0, 2.0 * y - 0.2);
            }
        }
        DatasetName::Multiring => {
            for i in 0..n {
                let r = (1 + i % 3) as f64 + s * rng.normal();
                let a = tau * rng.uniform();
                put(i, r * a.cos(), r * a.sin());
            }
        }
        DatasetName::Pinwheel => {
            let (blades, tangential, rate) = (5usize, 0.1, 0.25);
            for i in 0..n {
                let blade = i % blades;
                let f0 = s * rng.normal() + 1.0;
                let f1 = tangential * rng.normal();
                let angle = tau * blade as f64 / blades as f64 + rate * f0.exp();
                let (c, sn) = (angle.cos(), angle.sin());
                put(i, 2.0 * (f0 * c - f1 * sn), 2.0 * (f0 * sn + f1 * c));
            }
        }
        DatasetName::Ring => return Ok(ring(n, 2.0, s, rng)),
        DatasetName::Spiral => {
            for i in 0..n {
                let t = rng.uniform().sqrt() * 3.0 * pi;
                put(i, t * t.cos() / 3.0 + s * rng.normal(), t * t.sin() / 3.0 + s * rng.normal());
            }
        }
        DatasetName::Uniform => {
            for i in 0..n {
                let a = rng.uniform_in(-1.0, 1.0);
                put(i, a, rng.uniform_in(-1.0, 1.0));
            }
        }
        DatasetName::DiagGaussian => {
            let (mean, std) = spec.gaussian_params()?;
            for i in 0..n {
                for j in 0..spec.dim {
                    out[[i, j]] = mean[j] + std[j] * rng.normal();
                }
            }
        }
    }
    Ok(out)
}

/// Ring of the given radius with radial noise.
pub fn ring(n: usize, radius: f64, noise: f64, rng: &mut Stream) -> Mat {
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let r = radius + noise * rng.normal();
        let a = std::f64::consts::TAU * rng.uniform();
        row[0] = r * a.cos();
        row[1] = r * a.sin();
    }
    out
}

/// Reads a numeric CSV. Returns a `0×0` matrix for an empty file.
pub fn load_csv(path: impl AsRef<Path>, header: bool) -> Result<Mat> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut values = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 1);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {c} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{field}` is not a number"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), values).expect("row arity checked"))
}

/// Writes rows with 17 significant digits; `header` names columns `x0, x1, ...`.
pub fn save_csv(m: &Mat, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().from_writer(file);
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if header {
        writer
            .write_record((0..m.ncols()).map(|j| format!("x{j}")))
            .map_err(wrap)?;
    }
    for row in m.rows() {
        writer
            .write_record(row.iter().map(|v| format!("{v:.16e}")))
            .map_err(wrap)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
