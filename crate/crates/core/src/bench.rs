//! Benchmark suites: the 14-dataset MMD grid and Gaussian parameter recovery.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, ModelKind, RunConfig};
use crate::data::{generate, DatasetName, DatasetSpec};
use crate::dynamics::LayerKind;
use crate::error::{Error, Result};
use crate::init::InitKind;
use crate::estimators::{train, TrainObserver, Trainer};
use crate::run::{estimator_label, evaluate, gaussian_truth, quadratic_params, Checkpoint, Metric};
use crate::eval::param_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Table2,
    Gaussian,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Suite::Table2),
            "gaussian" => Ok(Suite::Gaussian),
            _ => Err(Error::Config(format!("unknown suite `{s}`"))),
        }
    }
}

/// Training budget for the MMD grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Three hidden layers of 128 units and long runs.
    #[default]
    Full,
    /// Two hidden layers of 64 units and short runs, for CI.
    Smoke,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub seeds: usize,
    pub datasets: Vec<DatasetName>,
    pub estimators: Vec<EstimatorKind>,
    pub profile: Profile,
    /// Overrides every cell's iteration count.
    pub iterations: Option<usize>,
    /// Overrides the number of model samples drawn at evaluation.
    pub eval_samples: Option<usize>,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seeds: 5,
            datasets: DatasetName::TABLE.to_vec(),
            estimators: vec![EstimatorKind::Sm, EstimatorKind::Nf, EstimatorKind::Cd, EstimatorKind::Ade],
            profile: Profile::Full,
            iterations: None,
            eval_samples: None,
            workers: 1,
            out: None,
        }
    }
}

/// The reduced four-dataset grid.
pub const SMOKE_DATASETS: [DatasetName; 4] = [
    DatasetName::Moons,
    DatasetName::TwoSpirals,
    DatasetName::Circles,
    DatasetName::Ring,
];

/// Configuration of one MMD grid cell.
///
/// CD runs 15 leapfrog steps from the data; ADE uses a 10-layer planar
/// init followed by 5 Langevin steps; NF is the same flow with no dynamics;
/// SM uses a softplus network and is sampled by HMC at evaluation.
pub fn table2_config(dataset: DatasetName, estimator: EstimatorKind, seed: u64, profile: Profile) -> RunConfig {
    let mut c = RunConfig {
        estimator,
        seed,
        dataset: DatasetSpec::named(dataset, 10_000, 0),
        record_wall_time: true,
        ..RunConfig::default()
    };
    let (hidden, iters) = match profile {
        Profile::Full => (vec![128, 128, 128], 10_000),
        Profile::Smoke => (vec![64, 64], 4_000),
    };
    c.model.hidden = hidden;
    c.optimizer.lr = 3e-4;
    c.sampler_optimizer.lr = 3e-4;
    c.iterations = iters;
    c.eval_interval = 50;
    c.tail_window = 0;
    c.init.kind = InitKind::Planar;
    c.init.flow_layers = 10;
    c.dynamics.kind = LayerKind::Langevin;
    c.dynamics.steps = 5;
    c.dynamics.langevin_scale_position_update = true;
    c.cd.steps = 15;
    if matches!(estimator, EstimatorKind::Cd | EstimatorKind::Pcd | EstimatorKind::Sm) {
        c.iterations = iters / 2;
    }
    c
}

/// Configuration of one Gaussian recovery run: `d = 5`, `N = 10⁴`, a
/// quadratic model, a Gaussian init and 3 leapfrog steps (CD: 15 steps).
pub fn gaussian_config(estimator: EstimatorKind, seed: u64) -> RunConfig {
    let d = 5;
    let mut c = RunConfig {
        estimator,
        seed,
        record_wall_time: true,
        ..RunConfig::default()
    };
    c.dataset = DatasetSpec {
        name: DatasetName::DiagGaussian,
        n: 10_000,
        dim: d,
        mean: (0..d).map(|i| 1.0 + 0.5 * i as f64).collect(),
        std: (0..d).map(|i| 0.5 + 0.3 * i as f64).collect(),
        ..DatasetSpec::default()
    };
    c.model.kind = ModelKind::Quadratic;
    c.init.kind = InitKind::Gaussian;
    c.dynamics.kind = LayerKind::Leapfrog;
    c.dynamics.steps = 3;
    c.cd.steps = 15;
    c.optimizer.lr = 1e-2;
    c.sampler_optimizer.lr = 1e-2;
    c.iterations = 5_000;
    c.eval_interval = 50;
    c.tail_window = 5;
    c
}

/// One grid cell's outcome. `value` is MMD×10³ or the max relative
/// parameter error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset: String,
    pub estimator: String,
    pub seed: u64,
    pub value: Option<f64>,
    pub error: Option<String>,
    pub seconds: f64,
}

/// Mean and standard error over the successful seeds of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub estimator: String,
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: Suite,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl BenchReport {
    pub fn aggregate(&self, dataset: &str, estimator: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.dataset == dataset && a.estimator == estimator)
    }

    /// Rows of the dataset × estimator table as `mean ± se` strings.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut datasets: Vec<String> = Vec::new();
        let mut estimators: Vec<String> = Vec::new();
        for a in &self.aggregates {
            if !datasets.contains(&a.dataset) {
                datasets.push(a.dataset.clone());
            }
            if !estimators.contains(&a.estimator) {
                estimators.push(a.estimator.clone());
            }
        }
        let rows = datasets
            .iter()
            .map(|d| {
                let mut row = vec![d.clone()];
                for e in &estimators {
                    row.push(match self.aggregate(d, e) {
                        Some(Aggregate {
                            mean: Some(m),
                            se: Some(s),
                            ..
                        }) => format!("{m:.3} ± {s:.3}"),
                        _ => "failed".into(),
                    });
                }
                row
            })
            .collect();
        let mut header = vec!["dataset".to_string()];
        header.extend(estimators);
        (header, rows)
    }
}

fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let k = (c.dataset.clone(), c.estimator.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(dataset, estimator)| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.dataset == dataset && c.estimator == estimator)
                .filter_map(|c| c.value)
                .collect();
            let failed = cells
                .iter()
                .filter(|c| c.dataset == dataset && c.estimator == estimator && c.value.is_none())
                .count();
            let n = vals.len() as f64;
            let mean = (n > 0.0).then(|| vals.iter().sum::<f64>() / n);
            let se = mean.map(|m| {
                if n > 1.0 {
                    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                } else {
                    0.0
                }
            });
            Aggregate {
                dataset,
                estimator,
                mean,
                se,
                ok: vals.len(),
                failed,
            }
        })
        .collect()
}

/// Trains one cell and scores it.
pub fn run_cell(suite: Suite, cfg: &RunConfig) -> Result<f64> {
    let cfg = cfg.resolved()?;
    let data = generate(&cfg.dataset)?;
    let mut trainer = Trainer::new(&cfg, &data)?;
    struct Quiet;
    impl TrainObserver for Quiet {}
    train(&mut trainer, &mut Quiet)?;
    let ckpt = Checkpoint::from_trainer(&trainer);
    match suite {
        Suite::Table2 => {
            let s = evaluate(&ckpt, None, Metric::Mmd, cfg.seed, None)?;
            Ok(s.mmd_e3.expect("mmd metric"))
        }
        Suite::Gaussian => {
            let p = ckpt.averaged_potential(trainer.model())?;
            let e = param_error(&gaussian_truth(&cfg.dataset)?, &quadratic_params(&p)?)?;
            Ok(e.max)
        }
    }
}

/// Runs every cell of a suite; failed cells are recorded and skipped.
pub fn run_suite(suite: Suite, opts: &BenchOptions) -> Result<BenchReport> {
    let mut configs = Vec::new();
    match suite {
        Suite::Table2 => {
            for &d in &opts.datasets {
                for &e in &opts.estimators {
                    for s in 0..opts.seeds as u64 {
                        configs.push(table2_config(d, e, s, opts.profile));
                    }
                }
            }
        }
        Suite::Gaussian => {
            for &e in &opts.estimators {
                for s in 0..opts.seeds as u64 {
                    configs.push(gaussian_config(e, s));
                }
            }
        }
    }
    for c in &mut configs {
        if let Some(n) = opts.iterations {
            c.iterations = n;
        }
        if let Some(n) = opts.eval_samples {
            c.eval.samples = n;
        }
    }
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; configs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.max(1).min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let start = Instant::now();
                let out = run_cell(suite, cfg);
                let cell = CellResult {
                    dataset: cfg.dataset.name.to_string(),
                    estimator: estimator_label(cfg),
                    seed: cfg.seed,
                    value: out.as_ref().ok().copied(),
                    error: out.err().map(|e| e.to_string()),
                    seconds: start.elapsed().as_secs_f64(),
                };
                match &cell.error {
                    Some(e) => log::warn!("{} {} seed {}: {e}", cell.dataset, cell.estimator, cell.seed),
                    None => log::info!(
                        "{} {} seed {}: {:.4} ({:.1}s)",
                        cell.dataset,
                        cell.estimator,
                        cell.seed,
                        cell.value.unwrap(),
                        cell.seconds
                    ),
                }
                results.lock().unwrap()[i] = Some(cell);
            });
        }
    });
    let cells: Vec<CellResult> = results.into_inner().unwrap().into_iter().flatten().collect();
    let report = BenchReport {
        suite,
        aggregates: aggregate(&cells),
        cells,
    };
    if let Some(dir) = &opts.out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `cells.csv`, the aggregated `<suite>.csv` table and `report.json`.
pub fn write_report(report: &BenchReport, dir: &std::path::Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |p: &std::path::Path, e: csv::Error| Error::io(p, std::io::Error::other(e));
    let path = dir.join("cells.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for c in &report.cells {
        w.serialize(c).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let name = match report.suite {
        Suite::Table2 => "table2.csv",
        Suite::Gaussian => "gaussian.csv",
    };
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let (header, rows) = report.table();
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))
}
