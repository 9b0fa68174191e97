use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::ade::{ade_grad_sampler, ade_loss, GradientMode, Sampler};
use super::baselines::{cd_grad, mpf_loss, nce_loss, pcd_grad, sm_loss, NoiseModel, ReplayBuffer};
use super::optim::{Adam, Direction};
use crate::config::{EstimatorKind, RunConfig};
use crate::diffcore::{global_norm, ArrayEntry, Mat, Potential, Tape, Var};
use crate::dynamics::DynamicsStack;
use crate::error::{Error, Result};
use crate::eval::TailAverage;
use crate::init::Initializer;
use crate::rng::Stream;

/// Stream purpose tags for the pieces of a run.
pub const MODEL_STREAM: u64 = 0x6d6f_6465_6c;
pub const SAMPLER_STREAM: u64 = 0x7361_6d70;
pub const TRAIN_STREAM: u64 = 0x7374_6570;

/// Langevin noise scale used by trained stacks.
pub const LANGEVIN_NOISE_STD: f64 = 1.0;

/// The potential and, for sampler-based estimators, its dual sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub estimator: EstimatorKind,
    pub potential: Potential,
    pub sampler: Option<Sampler>,
}

impl Model {
    /// Fresh parameters for a resolved config. `data` supplies init moments
    /// and empirical rows.
    pub fn build(cfg: &RunConfig, data: &Mat) -> Result<Model> {
        let dim = cfg.dataset.dim();
        if data.ncols() != dim {
            return Err(Error::Shape {
                expected: vec![data.nrows(), dim],
                actual: vec![data.nrows(), data.ncols()],
            });
        }
        let potential = cfg.model.build(dim, &mut Stream::derive(cfg.seed, MODEL_STREAM))?;
        let sampler = if cfg.estimator.has_sampler() {
            let mut rng = Stream::derive(cfg.seed, SAMPLER_STREAM);
            let init = Initializer::from_spec(&cfg.init, dim, cfg.ade.lambda, data, &mut rng)?;
            let dynamics = DynamicsStack::new(cfg.dynamics.clone(), dim, LANGEVIN_NOISE_STD, &mut rng)?;
            Some(Sampler { init, dynamics })
        } else {
            None
        };
        Ok(Model {
            estimator: cfg.estimator,
            potential,
            sampler,
        })
    }

    /// Checkpoint arrays under `potential.*`, `init.*` and `dynamics.*`.
    pub fn to_entries(&self) -> BTreeMap<String, ArrayEntry> {
        let mut m = self.potential.params().to_entries("potential.");
        if let Some(s) = &self.sampler {
            m.extend(s.init.params().to_entries("init."));
            m.extend(s.dynamics.params().to_entries("dynamics."));
        }
        m
    }

    pub fn load_entries(&mut self, entries: &BTreeMap<String, ArrayEntry>) -> Result<()> {
        self.potential.params_mut().load_entries("potential.", entries)?;
        if let Some(s) = &mut self.sampler {
            s.init.params_mut().load_entries("init.", entries)?;
            s.dynamics.params_mut().load_entries("dynamics.", entries)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.potential.params().all_finite()
            && self.sampler.as_ref().is_none_or(|s| {
                s.init.params().all_finite() && s.dynamics.params().all_finite()
            })
    }
}

/// One metrics row. Fields an estimator does not define are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub mean_f_data: f64,
    pub mean_f_model: f64,
    pub entropy_term: f64,
    pub grad_norm_f: f64,
    pub grad_norm_theta: f64,
    pub wall_ms: u64,
}

/// Why a checkpoint is being written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointReason {
    Periodic,
    Final,
    Diverged,
}

/// Receives metrics rows and checkpoint requests while training.
pub trait TrainObserver {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _trainer: &Trainer<'_>, _reason: CheckpointReason) -> Result<()> {
        Ok(())
    }
}

/// Observer that keeps every metrics row in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub rows: Vec<MetricsRow>,
}

impl TrainObserver for Collect {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Mutable training state for one run.
pub struct Trainer<'a> {
    cfg: RunConfig,
    data: &'a Mat,
    model: Model,
    opt_f: Adam,
    opt_init: Option<Adam>,
    opt_dyn: Option<Adam>,
    rng: Stream,
    buffer: Option<ReplayBuffer>,
    noise: Option<NoiseModel>,
    cd_eta: f64,
    iteration: usize,
    order: Vec<usize>,
    cursor: usize,
    tail: TailAverage,
    started: Instant,
}

fn grads_finite(g: &[Mat]) -> bool {
    g.iter().all(|m| m.iter().all(|a| a.is_finite()))
}

fn non_finite(what: &str) -> Error {
    Error::Contract(format!("non-finite {what} gradient"))
}

impl<'a> Trainer<'a> {
    /// `cfg` must already be resolved.
    pub fn new(cfg: &RunConfig, data: &'a Mat) -> Result<Self> {
        cfg.validate()?;
        if data.nrows() == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        let model = Model::build(cfg, data)?;
        Self::with_model(cfg, data, model)
    }

    /// Starts from existing parameters, e.g. a loaded checkpoint.
    pub fn with_model(cfg: &RunConfig, data: &'a Mat, model: Model) -> Result<Self> {
        let mut rng = Stream::derive(cfg.seed, TRAIN_STREAM);
        let opt_f = Adam::new(cfg.optimizer.clone(), model.potential.params());
        let (opt_init, opt_dyn) = match &model.sampler {
            Some(s) => (
                Some(Adam::new(cfg.sampler_optimizer.clone(), s.init.params())),
                Some(Adam::new(cfg.sampler_optimizer.clone(), s.dynamics.params())),
            ),
            None => (None, None),
        };
        let buffer = (cfg.estimator == EstimatorKind::Pcd)
            .then(|| ReplayBuffer::seeded(cfg.cd.buffer_capacity, data, &mut rng));
        let noise = if cfg.estimator == EstimatorKind::Nce {
            Some(NoiseModel::fit(data, cfg.nce.noise_scale)?)
        } else {
            None
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            model,
            opt_f,
            opt_init,
            opt_dyn,
            rng,
            buffer,
            noise,
            cd_eta: cfg.cd.step_size,
            iteration: 0,
            order: Vec::new(),
            cursor: usize::MAX,
            tail: TailAverage::new(cfg.tail_window),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn data(&self) -> &Mat {
        self.data
    }

    /// Current CD/PCD step size.
    pub fn cd_step_size(&self) -> f64 {
        self.cd_eta
    }

    pub fn buffer(&self) -> Option<&ReplayBuffer> {
        self.buffer.as_ref()
    }

    /// Average of the last `tail_window` epoch-end potentials.
    pub fn tail_average(&self) -> Option<Potential> {
        if self.cfg.tail_window == 0 {
            return None;
        }
        let flat = self.tail.average()?;
        let mut p = self.model.potential.clone();
        p.params_mut().assign_flat(&flat);
        Some(p)
    }

    /// Checkpoint arrays, including `potential_avg.*` when a tail average exists.
    pub fn entries(&self) -> BTreeMap<String, ArrayEntry> {
        let mut m = self.model.to_entries();
        if let Some(avg) = self.tail_average() {
            m.extend(avg.params().to_entries("potential_avg."));
        }
        m
    }

    fn next_batch(&mut self) -> Mat {
        let n = self.data.nrows();
        let b = self.cfg.batch.min(n);
        if self.cursor.saturating_add(b) > n {
            if self.cursor != usize::MAX && self.cfg.tail_window > 0 {
                self.tail.push(self.model.potential.params().flatten());
            }
            self.order = (0..n).collect();
            for i in (1..n).rev() {
                let j = self.rng.index(i + 1);
                self.order.swap(i, j);
            }
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + b];
        self.cursor += b;
        self.data.select(Axis(0), idx)
    }

    fn wall_ms(&self) -> u64 {
        if self.cfg.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// One training iteration. Parameters are left unchanged on error.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let batch = self.next_batch();
        let mut row = match self.cfg.estimator {
            EstimatorKind::Ade | EstimatorKind::Nf => self.ade_step(&batch)?,
            EstimatorKind::Cd | EstimatorKind::Pcd => self.cd_step(&batch)?,
            EstimatorKind::Sm | EstimatorKind::Nce | EstimatorKind::Mpf => self.scalar_step(&batch)?,
        };
        self.iteration += 1;
        row.iteration = self.iteration;
        row.wall_ms = self.wall_ms();
        Ok(row)
    }

    fn update_f(&mut self, g: &[Mat]) -> Result<()> {
        if !grads_finite(g) {
            return Err(non_finite("potential"));
        }
        self.opt_f
            .step(self.model.potential.params_mut(), g, Direction::Ascend, None)
    }

    fn update_sampler(&mut self, g: &[Mat]) -> Result<()> {
        if !grads_finite(g) {
            return Err(non_finite("sampler"));
        }
        let sampler = self.model.sampler.as_mut().expect("sampler estimator");
        let k = sampler.init.params().len();
        let mask = sampler.dynamics.trainable();
        self.opt_init
            .as_mut()
            .unwrap()
            .step(sampler.init.params_mut(), &g[..k], Direction::Descend, None)?;
        self.opt_dyn
            .as_mut()
            .unwrap()
            .step(sampler.dynamics.params_mut(), &g[k..], Direction::Descend, Some(&mask))
    }

    fn ade_step(&mut self, batch: &Mat) -> Result<MetricsRow> {
        let ade = self.cfg.ade.clone();
        let mut gnorm_theta = f64::NAN;
        if !ade.simultaneous {
            for _ in 0..ade.sampler_steps {
                let mut tape = Tape::new();
                let sampler = self.model.sampler.as_ref().unwrap();
                let b = sampler.bind(&mut tape, &self.model.potential, true);
                let trace = ade_loss(&mut tape, batch, &self.model.potential, sampler, &b, &ade, &mut self.rng)?;
                let gs = ade_grad_sampler(&mut tape, &trace, &b)?;
                gnorm_theta = global_norm(&gs);
                self.update_sampler(&gs)?;
            }
        }
        let mut tape = Tape::new();
        let sampler = self.model.sampler.as_ref().unwrap();
        let b = sampler.bind(&mut tape, &self.model.potential, true);
        let trace = ade_loss(&mut tape, batch, &self.model.potential, sampler, &b, &ade, &mut self.rng)?;
        let nf = b.f_outer.vars.len();
        let (gf, gs) = if ade.simultaneous && ade.gradient_mode == GradientMode::Bptt {
            let vars: Vec<Var> = b
                .f_outer
                .vars
                .iter()
                .chain(&b.init.vars)
                .chain(&b.dynamics.vars)
                .copied()
                .collect();
            let all: Vec<Mat> = tape
                .grad(trace.loss, &vars)?
                .into_iter()
                .map(|g| tape.value(g).clone())
                .collect();
            let (a, s) = all.split_at(nf);
            (a.to_vec(), Some(s.to_vec()))
        } else {
            let gf = b.f_outer.gradients(&mut tape, trace.f_objective)?;
            let gs = if ade.simultaneous {
                Some(ade_grad_sampler(&mut tape, &trace, &b)?)
            } else {
                None
            };
            (gf, gs)
        };
        if let Some(gs) = &gs {
            if !grads_finite(&gf) {
                return Err(non_finite("potential"));
            }
            gnorm_theta = global_norm(gs);
            self.update_sampler(gs)?;
        }
        self.update_f(&gf)?;
        Ok(MetricsRow {
            iteration: 0,
            loss: tape.scalar(trace.loss),
            mean_f_data: tape.scalar(trace.mean_f_data),
            mean_f_model: tape.scalar(trace.mean_f_model),
            entropy_term: tape.scalar(trace.entropy),
            grad_norm_f: global_norm(&gf),
            grad_norm_theta: gnorm_theta,
            wall_ms: 0,
        })
    }

    fn cd_step(&mut self, batch: &Mat) -> Result<MetricsRow> {
        let mut tape = Tape::new();
        let bound = self.model.potential.bind(&mut tape, true);
        let trace = match &mut self.buffer {
            Some(buf) => pcd_grad(
                &mut tape,
                batch,
                &self.model.potential,
                &bound,
                &self.cfg.cd,
                self.cd_eta,
                buf,
                &mut self.rng,
            )?,
            None => cd_grad(
                &mut tape,
                batch,
                &self.model.potential,
                &bound,
                &self.cfg.cd,
                self.cd_eta,
                &mut self.rng,
            )?,
        };
        let gf = bound.gradients(&mut tape, trace.objective)?;
        self.update_f(&gf)?;
        if let (true, Some(acc)) = (self.cfg.cd.adapt, trace.acceptance) {
            self.cd_eta *= (acc - self.cfg.cd.target_accept).exp();
        }
        Ok(MetricsRow {
            iteration: 0,
            loss: tape.scalar(trace.objective),
            mean_f_data: tape.scalar(trace.mean_f_data),
            mean_f_model: tape.scalar(trace.mean_f_model),
            entropy_term: f64::NAN,
            grad_norm_f: global_norm(&gf),
            grad_norm_theta: f64::NAN,
            wall_ms: 0,
        })
    }

    fn scalar_step(&mut self, batch: &Mat) -> Result<MetricsRow> {
        let mut tape = Tape::new();
        let p = &self.model.potential;
        let bound = p.bind(&mut tape, true);
        let loss = match self.cfg.estimator {
            EstimatorKind::Sm => sm_loss(&mut tape, batch, p, &bound)?,
            EstimatorKind::Nce => nce_loss(&mut tape, batch, p, &bound, self.noise.as_ref().unwrap(), &mut self.rng)?,
            _ => mpf_loss(&mut tape, batch, p, &bound, &self.cfg.mpf, &mut self.rng)?,
        };
        let gf = bound.gradients(&mut tape, loss)?;
        let mean_f_data = p.values(batch)?.mean().unwrap_or(f64::NAN);
        let loss = tape.scalar(loss);
        self.update_f(&gf)?;
        Ok(MetricsRow {
            iteration: 0,
            loss,
            mean_f_data,
            mean_f_model: f64::NAN,
            entropy_term: f64::NAN,
            grad_norm_f: global_norm(&gf),
            grad_norm_theta: f64::NAN,
            wall_ms: 0,
        })
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::NumericOverflow { .. } | Error::NonFiniteGradient { .. }
    ) || matches!(e, Error::Contract(m) if m.starts_with("non-finite"))
}

/// Runs `cfg.iterations` steps, reporting to `observer`.
///
/// On divergence the last good parameters are restored, checkpointed with
/// [`CheckpointReason::Diverged`] and a [`Error::TrainingDiverged`] is returned.
pub fn train<'a>(trainer: &mut Trainer<'a>, observer: &mut dyn TrainObserver) -> Result<()> {
    let total = trainer.cfg.iterations;
    while trainer.iteration < total {
        let snapshot = trainer.model.clone();
        let it = trainer.iteration;
        let outcome = trainer.step().and_then(|row| {
            if trainer.model.all_finite() {
                Ok(row)
            } else {
                Err(non_finite("parameter update produced a"))
            }
        });
        match outcome {
            Ok(row) => {
                let done = trainer.iteration;
                if done % trainer.cfg.eval_interval == 0 || done == total {
                    observer.metrics(&row)?;
                }
                if done % trainer.cfg.checkpoint_interval == 0 && done != total {
                    observer.checkpoint(trainer, CheckpointReason::Periodic)?;
                }
            }
            Err(e) if is_divergence(&e) => {
                trainer.model = snapshot;
                trainer.iteration = it;
                log::error!("training diverged at iteration {it}: {e}");
                observer.checkpoint(trainer, CheckpointReason::Diverged)?;
                return Err(Error::TrainingDiverged {
                    iteration: it,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    observer.checkpoint(trainer, CheckpointReason::Final)
}
