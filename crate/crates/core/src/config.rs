//! The run configuration: one JSON document whose keys mirror the modules.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::diffcore::{Activation, MlpPotential, Potential, QuadraticPotential};
use crate::dynamics::{DynamicsSpec, LayerKind};
use crate::error::{Error, Result};
use crate::estimators::{AdamConfig, AdeConfig, CdConfig, MpfConfig};
use crate::eval::{Bandwidth, HmcConfig};
use crate::init::{InitKind, InitSpec};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Ade,
    Cd,
    Pcd,
    Sm,
    Nce,
    Mpf,
    Nf,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Ade,
        EstimatorKind::Cd,
        EstimatorKind::Pcd,
        EstimatorKind::Sm,
        EstimatorKind::Nce,
        EstimatorKind::Mpf,
        EstimatorKind::Nf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Ade => "ade",
            EstimatorKind::Cd => "cd",
            EstimatorKind::Pcd => "pcd",
            EstimatorKind::Sm => "sm",
            EstimatorKind::Nce => "nce",
            EstimatorKind::Mpf => "mpf",
            EstimatorKind::Nf => "nf",
        }
    }

    /// Estimators that train a sampler alongside the potential.
    pub fn has_sampler(self) -> bool {
        matches!(self, EstimatorKind::Ade | EstimatorKind::Nf)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mlp,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    /// `None` resolves to softplus for score matching and relu otherwise.
    pub activation: Option<Activation>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            hidden: vec![128, 128, 128],
            activation: None,
        }
    }
}

impl ModelSpec {
    /// A freshly initialized potential. Quadratic models start at the
    /// standard Gaussian.
    pub fn build(&self, dim: usize, rng: &mut Stream) -> Result<Potential> {
        Ok(match self.kind {
            ModelKind::Mlp => {
                let act = self.activation.unwrap_or(Activation::Relu);
                Potential::Mlp(MlpPotential::new(dim, &self.hidden, act, rng)?)
            }
            ModelKind::Quadratic => Potential::Quadratic(QuadraticPotential::standard(dim)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceConfig {
    /// Multiplier on the moment-matched noise standard deviations.
    pub noise_scale: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig { noise_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Model draws per evaluation and in `samples.csv`.
    pub samples: usize,
    pub bandwidth: Bandwidth,
    pub hmc: HmcConfig,
    pub histogram_bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            samples: 1000,
            bandwidth: Bandwidth::Median,
            hmc: HmcConfig::default(),
            histogram_bins: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimator: EstimatorKind,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub dynamics: DynamicsSpec,
    pub init: InitSpec,
    pub ade: AdeConfig,
    pub cd: CdConfig,
    pub nce: NceConfig,
    pub mpf: MpfConfig,
    pub optimizer: AdamConfig,
    pub sampler_optimizer: AdamConfig,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Iterations between metrics rows.
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    /// Epoch-end snapshots averaged into `potential_avg.*`; 0 disables.
    pub tail_window: usize,
    /// Write elapsed milliseconds into the metrics; zeros otherwise.
    pub record_wall_time: bool,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimator: EstimatorKind::Ade,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            dynamics: DynamicsSpec::default(),
            init: InitSpec::default(),
            ade: AdeConfig::default(),
            cd: CdConfig::default(),
            nce: NceConfig::default(),
            mpf: MpfConfig::default(),
            optimizer: AdamConfig::default(),
            sampler_optimizer: AdamConfig::default(),
            iterations: 2000,
            batch: 128,
            seed: 0,
            out_dir: None,
            eval_interval: 10,
            checkpoint_interval: 1000,
            tail_window: 5,
            record_wall_time: true,
            eval: EvalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills estimator-dependent defaults and checks every section.
    ///
    /// `nf` forces a planar init with no dynamics layers; `sm` defaults the
    /// activation to softplus.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut c = self.clone();
        if c.model.activation.is_none() && c.model.kind == ModelKind::Mlp {
            c.model.activation = Some(if c.estimator == EstimatorKind::Sm {
                Activation::Softplus
            } else {
                Activation::Relu
            });
        }
        if c.estimator == EstimatorKind::Nf {
            c.dynamics.steps = 0;
            c.init.kind = InitKind::Planar;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.dynamics.validate()?;
        self.init.validate()?;
        self.ade.validate()?;
        self.cd.validate()?;
        self.optimizer.validate("optimizer")?;
        self.sampler_optimizer.validate("sampler_optimizer")?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if !(self.nce.noise_scale > 0.0) {
            return Err(Error::Config("nce.noise_scale must be positive".into()));
        }
        if !(self.mpf.step_size >= 0.0) {
            return Err(Error::Config("mpf.step_size must be >= 0".into()));
        }
        if self.eval.samples < 2 {
            return Err(Error::Config("eval.samples must be at least 2".into()));
        }
        if self.eval.histogram_bins < 2 {
            return Err(Error::Config("eval.histogram_bins must be at least 2".into()));
        }
        if self.estimator == EstimatorKind::Sm && self.model.activation == Some(Activation::Relu) {
            return Err(Error::UnsupportedActivation("relu"));
        }
        if self.dynamics.kind == LayerKind::DetLangevin && self.model.activation == Some(Activation::Relu) {
            return Err(Error::Config("det_langevin dynamics need a smooth activation".into()));
        }
        Ok(())
    }
}
