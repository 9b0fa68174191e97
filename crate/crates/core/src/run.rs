//! File-level orchestration behind the command-line subcommands.
//!
//! An output directory holds `resolved_config.json`, `metrics.csv`,
//! `checkpoint_<iteration>.json` every `checkpoint_interval` iterations,
//! `checkpoint_final.json` (or `checkpoint_diverged.json`) and
//! `samples.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, ModelKind, RunConfig};
use crate::data::{generate, generate_held_out, save_csv, DatasetName, DatasetSpec};
use crate::diffcore::{ArrayEntry, Mat, Potential};
use crate::error::{Error, Result};
use crate::estimators::{train, CheckpointReason, MetricsRow, Model, NoiseModel, TrainObserver, Trainer};
use crate::eval::{energy_histogram, hmc_sample_model, mmd2, param_error, EvalSummary};
use crate::init::{EmpiricalMode, InitModel};
use crate::rng::Stream;

pub const CHECKPOINT_FORMAT: &str = "ade-checkpoint/1";
pub const SAMPLE_STREAM: u64 = 0x6472_6177;
pub const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub iteration: usize,
    pub config: RunConfig,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer<'_>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            iteration: t.iteration(),
            config: t.config().clone(),
            arrays: t.entries(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unsupported checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }

    /// Rebuilds the model from the stored config and loads the arrays.
    /// Returns the model and the training data it was built against.
    pub fn restore(&self) -> Result<(Model, Mat)> {
        let cfg = self.config.resolved()?;
        let data = generate(&cfg.dataset)?;
        let mut model = Model::build(&cfg, &data)?;
        model.load_entries(&self.arrays)?;
        Ok((model, data))
    }

    /// The tail-averaged potential if present, else the final one.
    pub fn averaged_potential(&self, model: &Model) -> Result<Potential> {
        let mut p = model.potential.clone();
        if self.arrays.keys().any(|k| k.starts_with("potential_avg.")) {
            p.params_mut().load_entries("potential_avg.", &self.arrays)?;
        }
        Ok(p)
    }
}

/// `n` draws from the model: the learned sampler when there is one, otherwise
/// HMC chains started from a moment-matched Gaussian. Returns the HMC
/// acceptance rate when the fallback ran.
pub fn model_samples(model: &Model, cfg: &RunConfig, data: &Mat, n: usize, rng: &mut Stream) -> Result<(Mat, Option<f64>)> {
    match &model.sampler {
        Some(s) => {
            let batch = match &s.init.kind {
                InitModel::Empirical(e) if e.mode() == EmpiricalMode::Minibatch => {
                    let idx: Vec<usize> = (0..n).map(|_| rng.index(data.nrows())).collect();
                    Some(data.select(ndarray::Axis(0), &idx))
                }
                _ => None,
            };
            Ok((s.draw(&model.potential, n, rng, batch.as_ref())?, None))
        }
        None => {
            let start = NoiseModel::fit(data, 1.0)?.sample(n, rng);
            let run = hmc_sample_model(&model.potential, &start, &cfg.eval.hmc, rng)?;
            Ok((run.samples, Some(run.acceptance)))
        }
    }
}

struct FileObserver {
    dir: PathBuf,
    metrics: csv::Writer<fs::File>,
}

impl FileObserver {
    fn new(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        metrics
            .write_record([
                "iteration",
                "loss",
                "mean_f_data",
                "mean_f_model",
                "entropy_term",
                "grad_norm_f",
                "grad_norm_theta",
                "wall_ms",
            ])
            .map_err(|e| csv_error(&path, e))?;
        metrics.flush().map_err(|e| Error::io(&path, e))?;
        Ok(FileObserver {
            dir: dir.to_path_buf(),
            metrics,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl TrainObserver for FileObserver {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        self.metrics.serialize(row).map_err(|e| csv_error(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&mut self, trainer: &Trainer<'_>, reason: CheckpointReason) -> Result<()> {
        let name = match reason {
            CheckpointReason::Periodic => format!("checkpoint_{:06}.json", trainer.iteration()),
            CheckpointReason::Final => "checkpoint_final.json".into(),
            CheckpointReason::Diverged => "checkpoint_diverged.json".into(),
        };
        Checkpoint::from_trainer(trainer).save(self.dir.join(name))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config: RunConfig,
    pub model: Model,
    pub data: Mat,
    pub samples: Mat,
    pub hmc_acceptance: Option<f64>,
    pub checkpoint: Checkpoint,
}

/// Trains, writing every artefact into `out` when given.
pub fn run_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainReport> {
    let mut cfg = cfg.resolved()?;
    if let Some(dir) = out {
        cfg.out_dir = Some(dir.to_path_buf());
    }
    let out = cfg.out_dir.clone();
    let data = generate(&cfg.dataset)?;
    let mut trainer = Trainer::new(&cfg, &data)?;
    match &out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("resolved_config.json");
            fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
            let mut obs = FileObserver::new(dir)?;
            train(&mut trainer, &mut obs)?;
        }
        None => {
            struct Quiet;
            impl TrainObserver for Quiet {}
            train(&mut trainer, &mut Quiet)?;
        }
    }
    let checkpoint = Checkpoint::from_trainer(&trainer);
    let model = trainer.into_model();
    let mut rng = Stream::derive(cfg.seed, SAMPLE_STREAM);
    let (samples, hmc_acceptance) = model_samples(&model, &cfg, &data, cfg.eval.samples, &mut rng)?;
    if let Some(dir) = &out {
        save_csv(&samples, dir.join("samples.csv"), false)?;
    }
    Ok(TrainReport {
        config: cfg,
        model,
        data,
        samples,
        hmc_acceptance,
        checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mmd,
    Param,
    Energy,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd" => Ok(Metric::Mmd),
            "param" => Ok(Metric::Param),
            "energy" => Ok(Metric::Energy),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// True parameters of a `diag_gaussian` dataset as `(mean, precision)`.
pub fn gaussian_truth(spec: &DatasetSpec) -> Result<Vec<f64>> {
    let (mean, std) = spec.gaussian_params()?;
    Ok(mean.into_iter().chain(std.iter().map(|s| 1.0 / (s * s))).collect())
}

/// `(mean, precision)` of a quadratic potential.
pub fn quadratic_params(p: &Potential) -> Result<Vec<f64>> {
    match p {
        Potential::Quadratic(q) => Ok(q.mean().into_iter().chain(q.precision()).collect()),
        Potential::Mlp(_) => Err(Error::Config("parameter error needs a quadratic model".into())),
    }
}

/// Evaluates a checkpoint against a fresh held-out draw.
///
/// `dataset` overrides the checkpoint's dataset name; `out` receives the
/// energy histogram CSV.
pub fn evaluate(ckpt: &Checkpoint, dataset: Option<DatasetName>, metric: Metric, seed: u64, out: Option<&Path>) -> Result<EvalSummary> {
    let (model, data) = ckpt.restore()?;
    let cfg = ckpt.config.resolved()?;
    let mut spec = cfg.dataset.clone();
    if let Some(name) = dataset {
        spec.name = name;
    }
    if spec.dim() != model.potential.dim() {
        return Err(Error::Schema(format!(
            "checkpoint model has dimension {}, dataset `{}` has {}",
            model.potential.dim(),
            spec.name,
            spec.dim()
        )));
    }
    let mut summary = EvalSummary {
        dataset: spec.name.to_string(),
        estimator: cfg.estimator.to_string(),
        seed,
        mmd_e3: None,
        param_error: None,
        energy_overlap: None,
        hmc_acceptance: None,
    };
    let mut rng = Stream::derive(seed, EVAL_STREAM);
    match metric {
        Metric::Param => {
            if spec.name != DatasetName::DiagGaussian || cfg.model.kind != ModelKind::Quadratic {
                return Err(Error::Config("param metric needs a quadratic model on diag_gaussian".into()));
            }
            let learned = quadratic_params(&ckpt.averaged_potential(&model)?)?;
            summary.param_error = Some(param_error(&gaussian_truth(&spec)?, &learned)?);
        }
        Metric::Mmd | Metric::Energy => {
            let held = generate_held_out(&spec)?;
            let n = cfg.eval.samples.min(held.nrows());
            let (samples, acc) = model_samples(&model, &cfg, &data, n, &mut rng)?;
            summary.hmc_acceptance = acc;
            let held = held.slice(ndarray::s![..n, ..]).to_owned();
            if metric == Metric::Mmd {
                summary.mmd_e3 = Some(1e3 * mmd2(&samples, &held, cfg.eval.bandwidth)?);
            } else {
                let h = energy_histogram(&model.potential, &samples, &held, cfg.eval.histogram_bins)?;
                summary.energy_overlap = Some(h.overlap());
                if let Some(dir) = out {
                    create_dir(dir)?;
                    h.write_csv(dir.join("energy_histogram.csv"))?;
                }
            }
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let name = format!("eval_{}.json", serde_json::to_value(metric)?.as_str().unwrap_or("metric"));
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

/// Draws `n` samples from a checkpoint's model.
pub fn sample_checkpoint(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<(Mat, Option<f64>)> {
    let (model, data) = ckpt.restore()?;
    let cfg = ckpt.config.resolved()?;
    model_samples(&model, &cfg, &data, n, &mut Stream::derive(seed, SAMPLE_STREAM))
}

/// Writes `train.csv` and `held_out.csv` for a dataset spec.
pub fn datagen(spec: &DatasetSpec, out: &Path) -> Result<()> {
    create_dir(out)?;
    save_csv(&generate(spec)?, out.join("train.csv"), false)?;
    save_csv(&generate_held_out(spec)?, out.join("held_out.csv"), false)
}

/// Estimator-specific label used in tables.
pub fn estimator_label(cfg: &RunConfig) -> String {
    match cfg.estimator {
        EstimatorKind::Cd | EstimatorKind::Pcd => format!("{}-{}", cfg.estimator.as_str().to_uppercase(), cfg.cd.steps),
        e => e.as_str().to_uppercase(),
    }
}
