//! Command-line front end. [`Cli`] parses the arguments, merges them over
//! the TOML configuration file and dispatches to the `cmd_*` functions,
//! which are also usable directly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{
    normalized_regret, run_experiment, AckleyInstance, ExperimentConfig, ExperimentResult, ForestSurrogate,
    HeteroBenchmark, Method, MetricTable, Objective, Problem, RegretRuns,
};
use crate::bo::{
    bo_loop, random_search, read_trace, zero_shot_batch, AcquisitionConfig, Domain, FtDklSurrogate, GpSurrogate,
    LoopConfig, RunTrace, Surrogate, ZeroShotPick,
};
use crate::data::{load_candidates, load_manifest, CandidateTable, ParamKind, ParamSpace, Schema};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::surrogate::{cold_model, load_checkpoint, pretrain, save_checkpoint, TrainConfig, TrainHistory};
use crate::transfer::build_target_model;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "FTDKL_CONFIG";

/// Surrogate used by `optimize` when no checkpoint is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ColdSurrogate {
    Gp,
    Ftdkl,
    Rf,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSettings {
    pub n_init: usize,
    /// Total objective evaluations, including the initial design.
    pub budget: usize,
    pub surrogate: ColdSurrogate,
    pub record_time: bool,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            n_init: 5,
            budget: 50,
            surrogate: ColdSurrogate::Gp,
            record_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub problem: Problem,
    pub methods: Vec<Method>,
    pub seeds: usize,
    pub budget: usize,
    pub n_init: usize,
    pub gp50_init: usize,
    pub jobs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            problem: e.problem,
            methods: e.methods,
            seeds: e.seeds,
            budget: e.budget,
            n_init: e.n_init,
            gp50_init: e.gp50_init,
            jobs: e.jobs,
        }
    }
}

/// Contents of the configuration file. Every section is optional. The
/// top-level `seed` drives training, the initial design and the
/// acquisition search; the `seed` keys inside `train` and `acquisition`
/// are overwritten by it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub acquisition: AcquisitionConfig,
    pub optimize: OptimizeSettings,
    pub bench: BenchSettings,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.acquisition_config().validate()?;
        let o = &self.optimize;
        if o.budget == 0 || o.n_init == 0 {
            return Err(Error::invalid("optimize budget and n_init must be positive"));
        }
        self.experiment_config(None).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn acquisition_config(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            seed: self.seed,
            ..self.acquisition.clone()
        }
    }

    pub fn loop_config(&self, problem: Option<String>) -> LoopConfig {
        LoopConfig {
            n_init: self.optimize.n_init.min(self.optimize.budget),
            budget: self.optimize.budget,
            acquisition: self.acquisition_config(),
            seed: self.seed,
            record_time: self.optimize.record_time,
            problem,
        }
    }

    pub fn experiment_config(&self, trace_dir: Option<PathBuf>) -> ExperimentConfig {
        let b = &self.bench;
        ExperimentConfig {
            problem: b.problem.clone(),
            methods: b.methods.clone(),
            seeds: b.seeds,
            budget: b.budget,
            n_init: b.n_init,
            gp50_init: b.gp50_init,
            train: self.train_config(),
            acquisition: self.acquisition_config(),
            jobs: b.jobs,
            trace_dir,
        }
    }
}

/// Pre-trains on every task of `manifest` and writes the checkpoint and a
/// JSON training log. Nothing is written if any step fails.
pub fn cmd_pretrain(manifest: &Path, cfg: &CliConfig, out: &Path, log_path: Option<&Path>) -> Result<TrainHistory> {
    cfg.validate()?;
    let sources = load_manifest(manifest)?;
    log::info!("pre-training on {} tasks", sources.len());
    let (model, history) = pretrain(&sources, &cfg.train_config())?;
    save_checkpoint(&model, out)?;
    let log_path = log_path.map_or_else(|| training_log_path(out), Path::to_path_buf);
    write_atomic(&log_path, &serde_json::to_vec_pretty(&history)?)?;
    Ok(history)
}

/// `<checkpoint>.log.json`.
pub fn training_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".log.json");
    checkpoint.with_file_name(name)
}

/// Target of `optimize`: a built-in benchmark or a candidate table whose
/// `y` column is the objective.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSpec {
    Benchmark(String),
    Table { path: PathBuf, schema: Option<PathBuf> },
}

/// A resolved problem: search space, objective and optional finite domain.
pub struct ResolvedProblem {
    pub label: String,
    pub space: ParamSpace,
    pub objective: Objective,
    pub candidates: Option<Vec<Vec<f64>>>,
    /// Known global minimum, when there is one.
    pub optimum: Option<f64>,
}

/// Built-in benchmark names:
///
/// - `ackley<D>` or `ackley<D>-i<k>`: Ackley instance `k` (default 0) in `D`
///   dimensions on `[-1, 1]^D`.
/// - `ackley<S>to<T>-i<k>` and `ackley<S>to<T>-fixed-i<k>`: the target of
///   the Ackley transfer problem, as labelled by `bench`; `-fixed` freezes
///   the first `S` dimensions at the shared optimum.
/// - `hetero` or `hetero-s<k>`: the 4-D target of the heterogeneous
///   benchmark with seed `k`.
pub fn resolve_benchmark(name: &str) -> Result<ResolvedProblem> {
    let unknown = || Error::invalid(format!("unknown benchmark `{name}`"));
    let num = |s: &str| s.parse::<u64>().map_err(|_| unknown());
    if let Some(rest) = name.strip_prefix("hetero") {
        let seed = match rest {
            "" => 0,
            r => num(r.strip_prefix("-s").ok_or_else(unknown)?)?,
        };
        let target = HeteroBenchmark::new(seed).target;
        return Ok(ResolvedProblem {
            label: format!("hetero-s{seed}"),
            space: target.space(),
            objective: Arc::new(move |x: &[f64]| target.eval(x)),
            candidates: None,
            optimum: Some(0.0),
        });
    }
    let rest = name.strip_prefix("ackley").ok_or_else(unknown)?;
    let (dims, instance) = match rest.split_once("-i") {
        Some((d, k)) => (d, num(k)?),
        None => (rest, 0),
    };
    let (dims, fixed) = match dims.strip_suffix("-fixed") {
        Some(d) => (d, true),
        None => (dims, false),
    };
    let (source, target) = match dims.split_once("to") {
        Some((s, t)) => (Some(num(s)? as usize), num(t)? as usize),
        None => (None, num(dims)? as usize),
    };
    if target == 0 || source.is_some_and(|s| s == 0 || s > target) || (fixed && source.is_none()) {
        return Err(unknown());
    }
    let inst = AckleyInstance::new(target, instance);
    let mut space = inst.space();
    if fixed {
        for (i, &o) in inst.offset.iter().take(source.unwrap_or(0)).enumerate() {
            space.set_bounds(&format!("x{}", i + 1), o, o)?;
        }
    }
    let label = match source {
        Some(s) => Problem::AckleyTransfer {
            source_dim: s,
            target_dim: target,
            source_points: 0,
            instance_seed: instance,
            fixed_prefix: fixed,
        }
        .label(),
        None if rest.contains("-i") => format!("ackley{target}-i{instance}"),
        None => format!("ackley{target}"),
    };
    Ok(ResolvedProblem {
        label,
        space,
        objective: Arc::new(move |x: &[f64]| inst.eval(x)),
        candidates: None,
        optimum: Some(0.0),
    })
}

fn read_table(path: &Path, schema: Option<&Path>) -> Result<CandidateTable> {
    let schema_path = schema
        .map(Path::to_path_buf)
        .or_else(|| Some(Schema::sidecar_path(path)).filter(|p| p.exists()));
    let schema = schema_path.map(|p| Schema::load(&p)).transpose()?;
    load_candidates(path, schema.as_ref())
}

/// Resolves a candidate table into a lookup objective over its rows.
pub fn resolve_table(path: &Path, schema: Option<&Path>) -> Result<ResolvedProblem> {
    let table = read_table(path, schema)?;
    let y = table.y.ok_or_else(|| Error::Data {
        path: path.to_path_buf(),
        msg: "a tabular problem needs a `y` column".into(),
    })?;
    let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let lookup: HashMap<Vec<u64>, f64> = table.rows.iter().zip(&y).map(|(r, &v)| (key(r), v)).collect();
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ResolvedProblem {
        label,
        space: table.space,
        objective: Arc::new(move |x: &[f64]| {
            lookup
                .get(&key(x))
                .copied()
                .ok_or_else(|| Error::invalid("row is not in the candidate table"))
        }),
        candidates: Some(table.rows),
        optimum: None,
    })
}

pub fn resolve_problem(spec: &ProblemSpec) -> Result<ResolvedProblem> {
    match spec {
        ProblemSpec::Benchmark(name) => resolve_benchmark(name),
        ProblemSpec::Table { path, schema } => resolve_table(path, schema.as_deref()),
    }
}

/// Runs one optimization and writes its trace to `out` as it goes. With a
/// checkpoint the pre-trained model is transferred to the problem space;
/// otherwise `cfg.optimize.surrogate` picks a cold-start surrogate.
pub fn cmd_optimize(spec: &ProblemSpec, checkpoint: Option<&Path>, cfg: &CliConfig, out: &Path) -> Result<RunTrace> {
    cfg.validate()?;
    let problem = resolve_problem(spec)?;
    let train = cfg.train_config();
    let lc = cfg.loop_config(Some(problem.label.clone()));
    let domain = match &problem.candidates {
        Some(rows) => Domain::Candidates(rows),
        None => Domain::Box,
    };
    let objective = problem.objective.clone();
    let mut f = move |x: &[f64]| objective(x);
    let mut surrogate: Box<dyn Surrogate> = match (checkpoint, cfg.optimize.surrogate) {
        (Some(path), _) => {
            let source = load_checkpoint(path)?;
            Box::new(FtDklSurrogate::transferred(&source, &problem.space, train, cfg.seed)?)
        }
        (None, ColdSurrogate::Gp) => Box::new(GpSurrogate::new(&problem.space, "gp")?),
        (None, ColdSurrogate::Rf) => Box::new(ForestSurrogate::new(cfg.seed)),
        (None, ColdSurrogate::Ftdkl) => {
            let model = cold_model(&problem.space, &train, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            Box::new(FtDklSurrogate::new(model, &problem.space, train, "ftdkl_cold")?)
        }
        (None, ColdSurrogate::Random) => {
            return random_search(&mut f, &problem.space, domain, &lc, Some(out));
        }
    };
    bo_loop(&mut f, &problem.space, surrogate.as_mut(), domain, &lc, Some(out))
}

/// Ranks a candidate table with a pre-trained model, without any target
/// evaluations. Variables the model has not seen are handled by the
/// transfer rule. With `out`, the top `k` rows are written as CSV.
pub fn cmd_zeroshot(
    checkpoint: &Path,
    table: &Path,
    schema: Option<&Path>,
    k: usize,
    cfg: &CliConfig,
    out: Option<&Path>,
) -> Result<Vec<ZeroShotPick>> {
    let source = load_checkpoint(checkpoint)?;
    let candidates = read_table(table, schema)?;
    let (model, _) = build_target_model(&source, &candidates.space, cfg.seed)?;
    let picks = zero_shot_batch(&model, &candidates.space, &candidates.rows, k)?;
    if let Some(out) = out {
        write_atomic(out, &picks_csv(&candidates, &picks)?)?;
    }
    Ok(picks)
}

/// `rank,row,predicted_mean,<parameters>`; `row` is the zero-based
/// candidate index and categorical values are written as labels.
pub fn picks_csv(table: &CandidateTable, picks: &[ZeroShotPick]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["rank".to_string(), "row".into(), "predicted_mean".into()];
    header.extend(table.space.names());
    w.write_record(&header)?;
    for (rank, p) in picks.iter().enumerate() {
        let mut rec = vec![(rank + 1).to_string(), p.index.to_string(), p.mean.to_string()];
        for (v, param) in table.rows[p.index].iter().zip(table.space.params()) {
            rec.push(match &param.kind {
                ParamKind::Categorical { choices } => choices[*v as usize].clone(),
                ParamKind::Numeric { .. } => v.to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Runs the benchmark described by `cfg.bench`, writing one trace per run
/// under `out_dir/traces` and the aggregated table to `out_dir/metrics.csv`.
pub fn cmd_bench(cfg: &CliConfig, out_dir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let result = run_experiment(&cfg.experiment_config(Some(out_dir.join("traces"))))?;
    result.table.write_csv(&out_dir.join("metrics.csv"))?;
    if let Some(h) = &result.pretrain {
        write_atomic(&out_dir.join("pretrain.log.json"), &serde_json::to_vec_pretty(h)?)?;
    }
    Ok(result)
}

/// Aggregates trace files of one problem into a metrics table. Traces are
/// grouped by method and seed. The regret scale runs from `y_best`
/// (default: the known optimum of a built-in benchmark, otherwise the
/// smallest observed value) to `y_worst` (default: the largest observed
/// value).
pub fn cmd_report(traces: &[PathBuf], y_best: Option<f64>, y_worst: Option<f64>, out: &Path) -> Result<MetricTable> {
    if traces.is_empty() {
        return Err(Error::invalid("no trace files given"));
    }
    let runs = traces.iter().map(|p| read_trace(p)).collect::<Result<Vec<_>>>()?;
    let problem = &runs[0].header.problem;
    if let Some((i, t)) = runs.iter().enumerate().find(|(_, t)| &t.header.problem != problem) {
        return Err(Error::invalid(format!(
            "{} is for problem {:?}, {} is for {:?}",
            traces[i].display(),
            t.header.problem,
            traces[0].display(),
            problem
        )));
    }
    let observed = || runs.iter().flat_map(|t| t.records.iter().map(|r| r.y));
    let y_best = y_best
        .or_else(|| problem.as_deref().and_then(|p| resolve_benchmark(p).ok()).and_then(|p| p.optimum))
        .unwrap_or_else(|| observed().fold(f64::INFINITY, f64::min));
    let y_worst = y_worst.unwrap_or_else(|| observed().fold(f64::NEG_INFINITY, f64::max));
    if !(y_worst > y_best) {
        return Err(Error::invalid(format!("empty regret scale [{y_best}, {y_worst}]")));
    }

    let mut methods: Vec<&str> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for t in &runs {
        if !methods.contains(&t.header.method.as_str()) {
            methods.push(&t.header.method);
        }
        if !seeds.contains(&t.header.seed) {
            seeds.push(t.header.seed);
        }
    }
    seeds.sort_unstable();
    let mut grouped = Vec::new();
    for &m in &methods {
        let mut series = Vec::new();
        for &s in &seeds {
            let mut matching = runs.iter().filter(|t| t.header.method == m && t.header.seed == s);
            let run = matching.next();
            if matching.next().is_some() {
                return Err(Error::invalid(format!("more than one trace for method `{m}` and seed {s}")));
            }
            series.push(run.map(|t| normalized_regret(&t.best_so_far(), y_best, y_worst)).transpose()?);
        }
        grouped.push(RegretRuns { method: m, series });
    }
    let table = MetricTable::from_runs(&grouped)?;
    table.write_csv(out)?;
    Ok(table)
}

#[derive(Debug, Parser)]
#[command(name = "ftdkl", version, about = "Transfer Bayesian optimization with a pre-trained deep-kernel surrogate")]
pub struct Cli {
    /// TOML configuration file. Flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Seed for training, the initial design and the acquisition search.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a model on the source tasks of a manifest.
    Pretrain(PretrainArgs),
    /// Run Bayesian optimization on a benchmark or a candidate table.
    Optimize(OptimizeArgs),
    /// Rank a candidate table with a pre-trained model.
    Zeroshot(ZeroshotArgs),
    /// Compare methods over several seeds on a synthetic transfer problem.
    Bench(BenchArgs),
    /// Aggregate trace files into a regret and rank table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Manifest listing the source datasets.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log to write (default: `<out>.log.json`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Epochs of the squared-error stage (`train.epochs_mse`).
    #[arg(long)]
    pub epochs_mse: Option<usize>,
    /// Epochs of the ELBO stage (`train.epochs_elbo`).
    #[arg(long)]
    pub epochs_elbo: Option<usize>,
    /// Minibatch size (`train.batch_size`).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of inducing points (`train.inducing_points`).
    #[arg(long)]
    pub inducing_points: Option<usize>,
    /// Encoder learning rate (`train.lr_encoder`).
    #[arg(long)]
    pub lr_encoder: Option<f64>,
    /// Kernel learning rate (`train.lr_kernel`).
    #[arg(long)]
    pub lr_kernel: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("problem").required(true).args(["benchmark", "candidates"])))]
pub struct OptimizeArgs {
    /// Built-in benchmark: `ackley<D>[-i<k>]`, `ackley<S>to<T>[-fixed]-i<k>`
    /// or `hetero[-s<k>]`.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Candidate table (CSV with a `y` column); only its rows are proposed.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Schema for the candidate table (default: the `.schema.toml` sidecar).
    #[arg(long, requires = "candidates")]
    pub schema: Option<PathBuf>,
    /// Pre-trained checkpoint to transfer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Surrogate when no checkpoint is given (`optimize.surrogate`).
    #[arg(long, value_enum)]
    pub surrogate: Option<ColdSurrogate>,
    /// Trace file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Total evaluations including the initial design (`optimize.budget`).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Random initial evaluations (`optimize.n_init`).
    #[arg(long)]
    pub n_init: Option<usize>,
    /// LCB exploration weight (`acquisition.kappa`).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Fine-tuning steps per iteration (`train.finetune_steps`).
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Store wall-clock time per iteration (`optimize.record_time`).
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidate table (CSV; a `y` column is ignored).
    #[arg(long)]
    pub candidates: PathBuf,
    /// Schema for the candidate table (default: the `.schema.toml` sidecar).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Number of recommendations.
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// CSV to write (default: print to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Named problems for `bench --problem`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchProblem {
    /// 8-D source, 12-D target, 400 source points.
    Ackley,
    /// As `ackley`, with the first 8 target dimensions frozen.
    AckleyFixed,
    /// Six heterogeneous sources of 500 rows, 4-D target.
    Hetero,
}

impl BenchProblem {
    pub fn problem(self) -> Problem {
        match self {
            BenchProblem::Ackley => Problem::desk_ackley(),
            BenchProblem::AckleyFixed => match Problem::desk_ackley() {
                Problem::AckleyTransfer {
                    source_dim,
                    target_dim,
                    source_points,
                    instance_seed,
                    ..
                } => Problem::AckleyTransfer {
                    source_dim,
                    target_dim,
                    source_points,
                    instance_seed,
                    fixed_prefix: true,
                },
                p => p,
            },
            BenchProblem::Hetero => Problem::Heterogeneous {
                seed: 0,
                rows_per_source: 500,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Output directory for traces and `metrics.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Problem (`bench.problem`).
    #[arg(long, value_enum)]
    pub problem: Option<BenchProblem>,
    /// Comma-separated methods: random, gp, gp50, ftdkl_cold,
    /// ftdkl_pretrained, rf (`bench.methods`).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Seeds per method (`bench.seeds`).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Evaluations per run (`bench.budget`).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Random initial evaluations (`bench.n_init`).
    #[arg(long)]
    pub n_init: Option<usize>,
    /// Runs in parallel (`bench.jobs`).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace files of one problem.
    pub traces: Vec<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Objective value of zero regret.
    #[arg(long)]
    pub y_best: Option<f64>,
    /// Objective value of unit regret.
    #[arg(long)]
    pub y_worst: Option<f64>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl Cli {
    /// The configuration file (if any) with this invocation's flags applied.
    pub fn config(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        set(&mut cfg.seed, self.seed);
        match &self.command {
            Command::Pretrain(a) => {
                let t = &mut cfg.train;
                set(&mut t.epochs_mse, a.epochs_mse);
                set(&mut t.epochs_elbo, a.epochs_elbo);
                set(&mut t.batch_size, a.batch_size);
                set(&mut t.inducing_points, a.inducing_points);
                set(&mut t.lr_encoder, a.lr_encoder);
                set(&mut t.lr_kernel, a.lr_kernel);
            }
            Command::Optimize(a) => {
                set(&mut cfg.optimize.budget, a.budget);
                set(&mut cfg.optimize.n_init, a.n_init);
                set(&mut cfg.optimize.surrogate, a.surrogate);
                set(&mut cfg.acquisition.kappa, a.kappa);
                set(&mut cfg.train.finetune_steps, a.finetune_steps);
                cfg.optimize.record_time |= a.record_time;
            }
            Command::Bench(a) => {
                let b = &mut cfg.bench;
                set(&mut b.problem, a.problem.map(BenchProblem::problem));
                if let Some(m) = &a.methods {
                    b.methods = m.iter().map(|s| Method::parse(s.trim())).collect::<Result<_>>()?;
                }
                set(&mut b.seeds, a.seeds);
                set(&mut b.budget, a.budget);
                set(&mut b.n_init, a.n_init);
                set(&mut b.jobs, a.jobs);
            }
            Command::Zeroshot(_) | Command::Report(_) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Runs the command, printing a short summary to stdout.
    pub fn execute(&self) -> Result<()> {
        let cfg = self.config()?;
        match &self.command {
            Command::Pretrain(a) => {
                let h = cmd_pretrain(&a.manifest, &cfg, &a.out, a.log.as_deref())?;
                println!(
                    "wrote {} (final mse {:.4}, final elbo {:.4})",
                    a.out.display(),
                    h.mse.last().copied().unwrap_or(f64::NAN),
                    h.elbo.last().copied().unwrap_or(f64::NAN)
                );
            }
            Command::Optimize(a) => {
                let spec = match (&a.benchmark, &a.candidates) {
                    (Some(b), _) => ProblemSpec::Benchmark(b.clone()),
                    (None, Some(p)) => ProblemSpec::Table {
                        path: p.clone(),
                        schema: a.schema.clone(),
                    },
                    (None, None) => unreachable!("clap requires a problem"),
                };
                let trace = cmd_optimize(&spec, a.checkpoint.as_deref(), &cfg, &a.out)?;
                if let Some(s) = &trace.summary {
                    println!("best {} at evaluation {} of {}", s.best, s.best_index + 1, s.evaluations);
                    println!("{}", serde_json::to_string(&s.best_x)?);
                }
            }
            Command::Zeroshot(a) => {
                let picks = cmd_zeroshot(&a.checkpoint, &a.candidates, a.schema.as_deref(), a.k, &cfg, a.out.as_deref())?;
                if a.out.is_none() {
                    let table = read_table(&a.candidates, a.schema.as_deref())?;
                    print!("{}", String::from_utf8_lossy(&picks_csv(&table, &picks)?));
                }
            }
            Command::Bench(a) => {
                let result = cmd_bench(&cfg, &a.out_dir)?;
                println!("{:<18} {:>5} {:>7} {:>14} {:>9}", "method", "runs", "failed", "median regret", "mean rank");
                for r in result.table.final_rows() {
                    println!(
                        "{:<18} {:>5} {:>7} {:>14.4} {:>9.2}",
                        r.method, r.runs, r.failed, r.regret_median, r.rank_mean
                    );
                }
            }
            Command::Report(a) => {
                let table = cmd_report(&a.traces, a.y_best, a.y_worst, &a.out)?;
                println!("wrote {} rows to {}", table.rows.len(), a.out.display());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_names() {
        let p = resolve_benchmark("ackley12").unwrap();
        assert_eq!((p.label.as_str(), p.space.len()), ("ackley12", 12));
        let p = resolve_benchmark("ackley8to12-fixed-i0").unwrap();
        assert_eq!(p.label, Problem::AckleyTransfer {
            source_dim: 8,
            target_dim: 12,
            source_points: 400,
            instance_seed: 0,
            fixed_prefix: true,
        }
        .label());
        let (lo, hi) = p.space.bounds()[3];
        assert_eq!(lo, hi);
        assert_eq!(resolve_benchmark("hetero-s3").unwrap().label, "hetero-s3");
        for bad in ["ackley", "ackley0", "ackley9to4-i0", "ackley12-fixed", "hetero7", "branin2", "ackleyx"] {
            assert!(matches!(resolve_benchmark(bad), Err(Error::InvalidInput(_))), "{bad}");
        }
    }

    #[test]
    fn config_file_round_trips_and_rejects_unknown_keys() {
        let cfg = CliConfig {
            seed: 9,
            ..CliConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        let back: CliConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<CliConfig>("[train]\nepochs = 3\n").is_err());
        assert!(toml::from_str::<CliConfig>("sed = 3\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[optimize]\nbudget = 30\nn_init = 7\n[acquisition]\nkappa = 1.5\n").unwrap();
        let cli = Cli::try_parse_from([
            "ftdkl", "--config", path.to_str().unwrap(), "optimize", "--benchmark", "ackley2", "--out", "t.jsonl", "--budget", "12",
        ])
        .unwrap();
        let cfg = cli.config().unwrap();
        assert_eq!((cfg.seed, cfg.optimize.budget, cfg.optimize.n_init, cfg.acquisition.kappa), (4, 12, 7, 1.5));
        assert_eq!(cfg.acquisition_config().seed, 4);
    }

    #[test]
    fn invalid_config_values_are_rejected() {
        let cfg = CliConfig {
            optimize: OptimizeSettings {
                budget: 0,
                ..OptimizeSettings::default()
            },
            ..CliConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_invalid_input());
    }
}
