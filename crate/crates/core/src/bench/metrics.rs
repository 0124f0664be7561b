use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(best - y_best) / (y_worst - y_best)` clamped to `[0, 1]`, after
/// turning `values` into a running minimum.
pub fn normalized_regret(values: &[f64], y_best: f64, y_worst: f64) -> Result<Vec<f64>> {
    if !(y_worst > y_best) {
        return Err(Error::invalid(format!("need y_best < y_worst, got {y_best} and {y_worst}")));
    }
    let mut best = f64::INFINITY;
    Ok(values
        .iter()
        .map(|&v| {
            best = best.min(v);
            ((best - y_best) / (y_worst - y_best)).clamp(0.0, 1.0)
        })
        .collect())
}

/// 1-based ranks (smaller value ranks first); tied values share the mean of
/// the ranks they span.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            out[k] = rank;
        }
        i = j;
    }
    out
}

/// Mean per-iteration rank of each method. `tasks[t][m]` is method `m`'s
/// best-so-far series on task (or seed) `t`; every series must have the
/// same length. Returns `[method][iteration]`.
pub fn average_rank(tasks: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = tasks.first().ok_or_else(|| Error::invalid("no tasks to rank"))?;
    let methods = first.len();
    let len = first.first().map_or(0, Vec::len);
    if tasks.iter().any(|t| t.len() != methods || t.iter().any(|s| s.len() != len)) {
        return Err(Error::invalid("misaligned iteration grids"));
    }
    let mut out = vec![vec![0.0; len]; methods];
    for t in tasks {
        for it in 0..len {
            let r = ranks(&t.iter().map(|s| s[it]).collect::<Vec<_>>());
            for (m, v) in r.into_iter().enumerate() {
                out[m][it] += v / tasks.len() as f64;
            }
        }
    }
    Ok(out)
}

/// One (method, evaluation) cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    /// 1-based evaluation count.
    pub iteration: usize,
    pub runs: usize,
    pub failed: usize,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub regret_median: f64,
    pub rank_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-method, per-seed regret series, `None` for failed runs.
pub struct RegretRuns<'a> {
    pub method: &'a str,
    pub series: Vec<Option<Vec<f64>>>,
}

impl MetricTable {
    /// Aggregates regret series over seeds. Ranks are computed per seed among
    /// the methods whose run for that seed succeeded.
    pub fn from_runs(runs: &[RegretRuns<'_>]) -> Result<Self> {
        let seeds = runs.first().map_or(0, |r| r.series.len());
        if runs.iter().any(|r| r.series.len() != seeds) {
            return Err(Error::invalid("methods were run on different seeds"));
        }
        let len = runs
            .iter()
            .flat_map(|r| r.series.iter().flatten())
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        if runs.iter().flat_map(|r| r.series.iter().flatten()).any(|s| s.len() != len) {
            return Err(Error::invalid("misaligned iteration grids"));
        }
        let mut rank_sum = vec![vec![0.0; len]; runs.len()];
        let mut rank_n = vec![0usize; runs.len()];
        for s in 0..seeds {
            let ok: Vec<usize> = (0..runs.len()).filter(|&m| runs[m].series[s].is_some()).collect();
            if ok.is_empty() {
                continue;
            }
            let task = vec![ok.iter().map(|&m| runs[m].series[s].clone().unwrap()).collect()];
            let r = average_rank(&task)?;
            for (k, &m) in ok.iter().enumerate() {
                rank_n[m] += 1;
                for it in 0..len {
                    rank_sum[m][it] += r[k][it];
                }
            }
        }
        let mut rows = Vec::new();
        for (m, run) in runs.iter().enumerate() {
            let done: Vec<&Vec<f64>> = run.series.iter().flatten().collect();
            for it in 0..len {
                let vals: Vec<f64> = done.iter().map(|s| s[it]).collect();
                let (mean, std) = mean_std(&vals);
                rows.push(MetricRow {
                    method: run.method.to_string(),
                    iteration: it + 1,
                    runs: done.len(),
                    failed: seeds - done.len(),
                    regret_mean: mean,
                    regret_std: std,
                    regret_median: median(&vals),
                    rank_mean: if rank_n[m] > 0 { rank_sum[m][it] / rank_n[m] as f64 } else { f64::NAN },
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn final_rows(&self) -> Vec<&MetricRow> {
        let last = self.rows.iter().map(|r| r.iteration).max().unwrap_or(0);
        self.rows.iter().filter(|r| r.iteration == last).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }
}
