use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{make_source_corpus_ackley, normalized_regret, AckleyInstance, ForestSurrogate, HeteroBenchmark, MetricTable, RegretRuns};
use crate::bo::{bo_loop, random_search, Domain, FtDklSurrogate, GpSurrogate, LoopConfig, RunTrace, Surrogate, AcquisitionConfig};
use crate::data::{ParamSpace, SourceDataset};
use crate::error::{Error, Result};
use crate::surrogate::{cold_model, pretrain, FtDklModel, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    /// Exact GP from the usual random initial design.
    Gp,
    /// Exact GP after a 50-point random design.
    Gp50,
    FtdklCold,
    FtdklPretrained,
    Rf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Random,
        Method::Gp,
        Method::Gp50,
        Method::FtdklCold,
        Method::FtdklPretrained,
        Method::Rf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Gp => "gp",
            Method::Gp50 => "gp50",
            Method::FtdklCold => "ftdkl_cold",
            Method::FtdklPretrained => "ftdkl_pretrained",
            Method::Rf => "rf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Benchmark problem with its source data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    /// Ackley transfer from a `source_dim` instance to a `target_dim`
    /// instance sharing scale and offset on the leading dimensions. With
    /// `fixed_prefix`, those leading dimensions are frozen at the source
    /// optimum and only the rest are searched.
    AckleyTransfer {
        source_dim: usize,
        target_dim: usize,
        source_points: usize,
        #[serde(default)]
        instance_seed: u64,
        #[serde(default)]
        fixed_prefix: bool,
    },
    /// Six heterogeneous sources over a shared name pool, 4-D target.
    Heterogeneous {
        #[serde(default)]
        seed: u64,
        rows_per_source: usize,
    },
}

impl Problem {
    pub fn desk_ackley() -> Self {
        Problem::AckleyTransfer {
            source_dim: 8,
            target_dim: 12,
            source_points: 400,
            instance_seed: 0,
            fixed_prefix: false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Problem::AckleyTransfer {
                source_dim,
                target_dim,
                fixed_prefix,
                instance_seed,
                ..
            } => format!(
                "ackley{source_dim}to{target_dim}{}-i{instance_seed}",
                if *fixed_prefix { "-fixed" } else { "" }
            ),
            Problem::Heterogeneous { seed, .. } => format!("hetero-s{seed}"),
        }
    }

    pub fn prepare(&self) -> Result<PreparedProblem> {
        match self {
            &Problem::AckleyTransfer {
                source_dim,
                target_dim,
                source_points,
                instance_seed,
                fixed_prefix,
            } => {
                if source_dim == 0 || target_dim < source_dim {
                    return Err(Error::invalid("need 0 < source_dim <= target_dim"));
                }
                let source = AckleyInstance::new(source_dim, instance_seed);
                let target = AckleyInstance::new(target_dim, instance_seed);
                let mut space = target.space();
                if fixed_prefix {
                    for (i, &o) in source.offset.iter().enumerate() {
                        space.set_bounds(&format!("x{}", i + 1), o, o)?;
                    }
                }
                let corpus = make_source_corpus_ackley(&source, source_points, instance_seed)?;
                Ok(PreparedProblem {
                    label: self.label(),
                    space,
                    objective: Arc::new(move |x: &[f64]| target.eval(x)),
                    sources: vec![corpus],
                    y_best: 0.0,
                })
            }
            &Problem::Heterogeneous { seed, rows_per_source } => {
                let bench = HeteroBenchmark::new(seed);
                let sources = bench.source_datasets(rows_per_source, seed)?;
                let target = bench.target.clone();
                Ok(PreparedProblem {
                    label: self.label(),
                    space: target.space(),
                    objective: Arc::new(move |x: &[f64]| target.eval(x)),
                    sources,
                    y_best: 0.0,
                })
            }
        }
    }
}

pub type Objective = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;

pub struct PreparedProblem {
    pub label: String,
    pub space: ParamSpace,
    pub objective: Objective,
    pub sources: Vec<SourceDataset>,
    /// Known global minimum of the target.
    pub y_best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub methods: Vec<Method>,
    pub seeds: usize,
    pub budget: usize,
    pub n_init: usize,
    /// Initial design size of the `gp50` baseline.
    pub gp50_init: usize,
    pub train: TrainConfig,
    pub acquisition: AcquisitionConfig,
    /// Parallel runs.
    pub jobs: usize,
    /// Directory for per-run trace files.
    pub trace_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::desk_ackley(),
            methods: vec![Method::Gp, Method::Gp50, Method::FtdklCold, Method::FtdklPretrained],
            seeds: 5,
            budget: 65,
            n_init: 5,
            gp50_init: 50,
            train: TrainConfig::desk(),
            acquisition: AcquisitionConfig::default(),
            jobs: 1,
            trace_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds == 0 || self.budget == 0 || self.n_init == 0 || self.jobs == 0 {
            return Err(Error::invalid("methods, seeds, budget, n_init and jobs must be non-empty"));
        }
        self.train.validate()?;
        self.acquisition.validate()
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub trace: Result<RunTrace>,
}

pub struct ExperimentResult {
    pub problem: String,
    pub runs: Vec<RunOutcome>,
    pub table: MetricTable,
    pub y_best: f64,
    pub y_worst: f64,
    pub pretrain: Option<TrainHistory>,
}

impl ExperimentResult {
    /// Regret after `evaluations` objective calls for each seed of
    /// `method`; `None` for failed runs.
    pub fn regret_at(&self, method: Method, evaluations: usize) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .filter(|r| r.method == method)
            .map(|r| {
                let t = r.trace.as_ref().ok()?;
                let s = normalized_regret(&t.best_so_far(), self.y_best, self.y_worst).ok()?;
                s.get(evaluations.checked_sub(1)?).copied()
            })
            .collect()
    }

    /// Best raw objective after `evaluations` calls, per seed.
    pub fn best_at(&self, method: Method, evaluations: usize) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.trace.as_ref().ok()?.best_so_far().get(evaluations.checked_sub(1)?).copied())
            .collect()
    }
}

/// Builds the surrogate for one run.
pub fn make_surrogate(
    method: Method,
    space: &ParamSpace,
    train: &TrainConfig,
    pretrained: Option<&FtDklModel>,
    seed: u64,
) -> Result<Option<Box<dyn Surrogate>>> {
    Ok(Some(match method {
        Method::Random => return Ok(None),
        Method::Gp => Box::new(GpSurrogate::new(space, "gp")?),
        Method::Gp50 => Box::new(GpSurrogate::new(space, "gp50")?),
        Method::Rf => Box::new(ForestSurrogate::new(seed)),
        Method::FtdklCold => {
            let model = cold_model(space, train, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Box::new(FtDklSurrogate::new(model, space, train.clone(), "ftdkl_cold")?)
        }
        Method::FtdklPretrained => {
            let source = pretrained.ok_or_else(|| Error::invalid("no pre-trained model"))?;
            Box::new(FtDklSurrogate::transferred(source, space, train.clone(), seed)?)
        }
    }))
}

fn run_one(cfg: &ExperimentConfig, problem: &PreparedProblem, pretrained: Option<&FtDklModel>, method: Method, seed: u64) -> Result<RunTrace> {
    let n_init = if method == Method::Gp50 { cfg.gp50_init } else { cfg.n_init };
    let lc = LoopConfig {
        n_init: n_init.min(cfg.budget),
        budget: cfg.budget,
        acquisition: AcquisitionConfig {
            seed,
            ..cfg.acquisition.clone()
        },
        seed,
        record_time: false,
        problem: Some(problem.label.clone()),
    };
    let path = match &cfg.trace_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(d.join(format!("{}-seed{seed}.jsonl", method.as_str())))
        }
        None => None,
    };
    let objective = problem.objective.clone();
    let mut f = move |x: &[f64]| objective(x);
    let mut trace = match make_surrogate(method, &problem.space, &cfg.train, pretrained, seed)? {
        Some(mut s) => bo_loop(&mut f, &problem.space, s.as_mut(), Domain::Box, &lc, path.as_deref())?,
        None => random_search(&mut f, &problem.space, Domain::Box, &lc, path.as_deref())?,
    };
    trace.header.method = method.as_str().into();
    Ok(trace)
}

/// Runs every (method, seed) pair, `cfg.jobs` at a time, and aggregates
/// normalized regret. Failed runs are logged and counted in the table.
/// Regret uses the known optimum and the worst value observed in any run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let problem = cfg.problem.prepare()?;
    let (pretrained, history) = if cfg.methods.contains(&Method::FtdklPretrained) {
        log::info!("pre-training on {} source tasks", problem.sources.len());
        let (m, h) = pretrain(&problem.sources, &cfg.train)?;
        (Some(m), Some(h))
    } else {
        (None, None)
    };
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds as u64).map(move |s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let trace = run_one(cfg, &problem, pretrained.as_ref(), method, seed);
                match &trace {
                    Ok(_) => log::info!("{} seed {seed} done", method.as_str()),
                    Err(e) => log::error!("{} seed {seed} failed: {e}", method.as_str()),
                }
                RunOutcome { method, seed, trace }
            })
            .collect()
    });
    let y_worst = runs
        .iter()
        .filter_map(|r| r.trace.as_ref().ok())
        .flat_map(|t| t.records.iter().map(|r| r.y))
        .fold(f64::NEG_INFINITY, f64::max);
    if !(y_worst > problem.y_best) {
        return Err(Error::invalid("no successful run observed a value above the optimum"));
    }
    let table = regret_table(&cfg.methods, cfg.seeds, &runs, problem.y_best, y_worst)?;
    Ok(ExperimentResult {
        problem: problem.label,
        runs,
        table,
        y_best: problem.y_best,
        y_worst,
        pretrain: history,
    })
}

fn regret_table(methods: &[Method], seeds: usize, runs: &[RunOutcome], y_best: f64, y_worst: f64) -> Result<MetricTable> {
    let grouped: Vec<RegretRuns<'_>> = methods
        .iter()
        .map(|&m| {
            let series = (0..seeds as u64)
                .map(|s| {
                    let r = runs.iter().find(|r| r.method == m && r.seed == s)?;
                    normalized_regret(&r.trace.as_ref().ok()?.best_so_far(), y_best, y_worst).ok()
                })
                .collect();
            RegretRuns {
                method: m.as_str(),
                series,
            }
        })
        .collect();
    MetricTable::from_runs(&grouped)
}
