use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bo::trace::{named_values, Phase, RunTrace, TraceRecord, TraceSummary, TraceWriter};
use crate::bo::{lcb, optimize_acquisition_with, AcquisitionConfig, Surrogate};
use crate::data::{ObjectiveStats, ParamSpace};
use crate::error::{Error, Result};
use crate::surrogate::FtDklModel;

/// Outer-loop settings. `budget` counts every objective evaluation,
/// including the `n_init` random ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub n_init: usize,
    pub budget: usize,
    pub acquisition: AcquisitionConfig,
    pub seed: u64,
    /// Store per-iteration wall-clock time in the trace.
    pub record_time: bool,
    /// Free-form problem label copied to the trace header.
    pub problem: Option<String>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_init: 5,
            budget: 50,
            acquisition: AcquisitionConfig::default(),
            seed: 0,
            record_time: false,
            problem: None,
        }
    }
}

/// Where proposals come from: the whole box, or a fixed table of rows.
#[derive(Clone, Copy, Debug)]
pub enum Domain<'a> {
    Box,
    /// Each row may be proposed at most once.
    Candidates(&'a [Vec<f64>]),
}

struct Recorder {
    trace: RunTrace,
    writer: Option<TraceWriter>,
    ys: Vec<f64>,
    best: usize,
}

impl Recorder {
    fn push(&mut self, phase: Phase, x: &[f64], y: f64, fit: Option<crate::bo::FitDiagnostics>, seconds: Option<f64>) -> Result<()> {
        let index = self.ys.len();
        self.ys.push(y);
        if y < self.ys[self.best] {
            self.best = index;
        }
        // A lone observation standardizes to zero.
        let y_normalized = if index == 0 { 0.0 } else { ObjectiveStats::fit(&self.ys)?.normalize(y) };
        let rec = TraceRecord {
            index,
            phase,
            x: named_values(&self.trace.header.space, x),
            y,
            y_normalized,
            best: self.ys[self.best],
            fit,
            seconds,
        };
        if let Some(w) = self.writer.as_mut() {
            w.record(&rec)?;
        }
        self.trace.records.push(rec);
        Ok(())
    }

    fn finish(mut self) -> Result<RunTrace> {
        let best = &self.trace.records[self.best];
        let s = TraceSummary {
            evaluations: self.ys.len(),
            best: best.y,
            best_index: self.best,
            best_x: best.x.clone(),
        };
        if let Some(w) = self.writer.as_mut() {
            w.summary(&s)?;
        }
        self.trace.summary = Some(s);
        Ok(self.trace)
    }
}

fn evaluate(objective: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], iteration: usize) -> Result<f64> {
    match objective(x) {
        Ok(y) if y.is_finite() => Ok(y),
        Ok(y) => Err(Error::Objective {
            iteration,
            msg: format!("non-finite value {y}"),
        }),
        Err(e) => Err(Error::Objective {
            iteration,
            msg: e.to_string(),
        }),
    }
}

fn run(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    space: &ParamSpace,
    mut surrogate: Option<&mut dyn Surrogate>,
    domain: Domain<'_>,
    cfg: &LoopConfig,
    trace_path: Option<&Path>,
) -> Result<RunTrace> {
    if cfg.budget == 0 || cfg.n_init == 0 {
        return Err(Error::invalid("budget and n_init must be at least 1"));
    }
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    cfg.acquisition.validate()?;
    if let Domain::Candidates(rows) = domain {
        if cfg.budget > rows.len() {
            return Err(Error::invalid(format!("budget {} exceeds {} candidate rows", cfg.budget, rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| !space.contains(r)) {
            return Err(Error::invalid(format!("candidate row {r:?} is outside the space")));
        }
    }
    let method = surrogate.as_ref().map_or_else(|| "random".to_string(), |s| s.label());
    let mut trace = RunTrace::new(method, cfg.problem.clone(), cfg.seed, space.clone());
    trace.header.transfer = surrogate.as_ref().and_then(|s| s.transfer_report().cloned());
    let writer = trace_path.map(|p| TraceWriter::create(p, &trace.header)).transpose()?;
    let mut rec = Recorder {
        trace,
        writer,
        ys: Vec::new(),
        best: 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_init = if surrogate.is_some() { cfg.n_init.min(cfg.budget) } else { cfg.budget };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut used = vec![false; if let Domain::Candidates(c) = domain { c.len() } else { 0 }];
    let initial: Vec<Vec<f64>> = match domain {
        Domain::Box => (0..n_init).map(|_| space.sample(&mut rng)).collect(),
        Domain::Candidates(c) => sample_indices(&mut rng, c.len(), n_init)
            .into_iter()
            .map(|i| {
                used[i] = true;
                c[i].clone()
            })
            .collect(),
    };
    for x in initial {
        let t0 = Instant::now();
        let y = evaluate(objective, &x, rows.len())?;
        let secs = cfg.record_time.then(|| t0.elapsed().as_secs_f64());
        rec.push(Phase::Initial, &x, y, None, secs)?;
        rows.push(x);
    }

    while let Some(s) = surrogate.as_deref_mut() {
        let index = rows.len();
        if index >= cfg.budget {
            break;
        }
        let t0 = Instant::now();
        let stats = ObjectiveStats::fit(&rec.ys)?;
        let fit = s.fit(&rows, &stats.normalize_all(&rec.ys))?;
        let mut acq_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let predict = |r: &[Vec<f64>]| s.predict(r);
        let x = match domain {
            Domain::Box => optimize_acquisition_with(&predict, space, &cfg.acquisition, &mut acq_rng)?.x,
            Domain::Candidates(c) => {
                let open: Vec<usize> = (0..c.len()).filter(|&i| !used[i]).collect();
                let pool: Vec<Vec<f64>> = open.iter().map(|&i| c[i].clone()).collect();
                let preds = predict(&pool)?;
                let pick = (0..pool.len()).fold(0, |b, i| {
                    if lcb(preds[i], cfg.acquisition.kappa) < lcb(preds[b], cfg.acquisition.kappa) {
                        i
                    } else {
                        b
                    }
                });
                used[open[pick]] = true;
                c[open[pick]].clone()
            }
        };
        let y = evaluate(objective, &x, index)?;
        let secs = cfg.record_time.then(|| t0.elapsed().as_secs_f64());
        rec.push(Phase::Acquisition, &x, y, Some(fit), secs)?;
        rows.push(x);
    }
    rec.finish()
}

/// Bayesian optimization (minimization). Evaluates `n_init` random points,
/// then on every iteration standardizes the observed objectives, refits the
/// surrogate, minimizes the LCB and evaluates the proposal. With a trace
/// path, records are written as they are produced.
pub fn bo_loop(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    space: &ParamSpace,
    surrogate: &mut dyn Surrogate,
    domain: Domain<'_>,
    cfg: &LoopConfig,
    trace_path: Option<&Path>,
) -> Result<RunTrace> {
    run(objective, space, Some(surrogate), domain, cfg, trace_path)
}

/// Uniform random search over the same domain, recorded in the same trace
/// format. Every evaluation is in the initial phase.
pub fn random_search(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    space: &ParamSpace,
    domain: Domain<'_>,
    cfg: &LoopConfig,
    trace_path: Option<&Path>,
) -> Result<RunTrace> {
    run(objective, space, None, domain, cfg, trace_path)
}

/// A ranked candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotPick {
    pub index: usize,
    pub mean: f64,
}

/// Ranks `candidates` by the model's predicted mean (ascending) and returns
/// the first `k`. Ties keep candidate order. No fitting is done.
pub fn zero_shot_batch(model: &FtDklModel, space: &ParamSpace, candidates: &[Vec<f64>], k: usize) -> Result<Vec<ZeroShotPick>> {
    if candidates.is_empty() || k == 0 || k > candidates.len() {
        return Err(Error::invalid(format!("cannot pick {k} of {} candidates", candidates.len())));
    }
    if let Some(r) = candidates.iter().find(|r| r.len() != space.len()) {
        return Err(Error::invalid(format!("candidate row has {} values, space has {}", r.len(), space.len())));
    }
    let predictor = model.predictor(space)?;
    let mut picks = Vec::with_capacity(candidates.len());
    for (c, chunk) in candidates.chunks(512).enumerate() {
        for (j, p) in predictor.predict(chunk)?.into_iter().enumerate() {
            if p.mean.is_nan() {
                return Err(Error::NonFinite("zero-shot prediction".into()));
            }
            picks.push(ZeroShotPick {
                index: c * 512 + j,
                mean: p.mean,
            });
        }
    }
    picks.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    picks.truncate(k);
    Ok(picks)
}
