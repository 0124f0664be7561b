//! Run traces as JSON Lines: one header line, one line per evaluation and a
//! closing summary line. Lines are flushed as they are produced, so an
//! interrupted run leaves a readable prefix.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bo::FitDiagnostics;
use crate::data::{ParamKind, ParamSpace};
use crate::error::{Error, Result};
use crate::io::check_version;
use crate::transfer::TransferReport;

pub const TRACE_FORMAT: &str = "ftdkl-trace";
pub const TRACE_VERSION: &str = "1.0";
const TRACE_MAJOR: u32 = 1;

/// A variable's value as written to a trace: numbers for numeric variables,
/// labels for categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Label(String),
}

pub fn named_values(space: &ParamSpace, x: &[f64]) -> BTreeMap<String, ParamValue> {
    space
        .params()
        .iter()
        .zip(x)
        .map(|(p, &v)| {
            let value = match &p.kind {
                ParamKind::Categorical { choices } => ParamValue::Label(choices[v as usize].clone()),
                ParamKind::Numeric { .. } => ParamValue::Number(v),
            };
            (p.name.clone(), value)
        })
        .collect()
}

/// Inverse of [`named_values`].
pub fn encode_values(space: &ParamSpace, values: &BTreeMap<String, ParamValue>) -> Result<Vec<f64>> {
    space
        .params()
        .iter()
        .map(|p| match (&p.kind, values.get(&p.name)) {
            (ParamKind::Numeric { .. }, Some(ParamValue::Number(v))) => Ok(*v),
            (ParamKind::Categorical { choices }, Some(ParamValue::Label(l))) => choices
                .iter()
                .position(|c| c == l)
                .map(|i| i as f64)
                .ok_or_else(|| Error::invalid(format!("unknown label `{l}` for `{}`", p.name))),
            _ => Err(Error::invalid(format!("missing or mistyped value for `{}`", p.name))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: String,
    pub method: String,
    pub problem: Option<String>,
    pub seed: u64,
    pub space: ParamSpace,
    pub transfer: Option<TransferReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Random initial design.
    Initial,
    /// Proposed by the acquisition.
    Acquisition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Zero-based evaluation index.
    pub index: usize,
    pub phase: Phase,
    pub x: BTreeMap<String, ParamValue>,
    pub y: f64,
    /// `y` standardized with the statistics of all observations so far.
    pub y_normalized: f64,
    /// Best raw objective seen up to and including this evaluation.
    pub best: f64,
    pub fit: Option<FitDiagnostics>,
    /// Wall-clock seconds for this iteration; only recorded on request so
    /// that traces stay reproducible byte for byte.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub evaluations: usize,
    pub best: f64,
    pub best_index: usize,
    pub best_x: BTreeMap<String, ParamValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum TraceLine {
    Header(TraceHeader),
    Iteration(TraceRecord),
    Summary(TraceSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    pub summary: Option<TraceSummary>,
}

impl RunTrace {
    pub fn new(method: impl Into<String>, problem: Option<String>, seed: u64, space: ParamSpace) -> Self {
        Self {
            header: TraceHeader {
                format: TRACE_FORMAT.into(),
                version: TRACE_VERSION.into(),
                method: method.into(),
                problem,
                seed,
                space,
                transfer: None,
            },
            records: Vec::new(),
            summary: None,
        }
    }

    /// Best-so-far raw objective after each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.best).collect()
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        self.records.iter().map(|r| encode_values(&self.header.space, &r.x)).collect()
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_line(&mut out, &TraceLine::Header(self.header.clone()))?;
        for r in &self.records {
            write_line(&mut out, &TraceLine::Iteration(r.clone()))?;
        }
        if let Some(s) = &self.summary {
            write_line(&mut out, &TraceLine::Summary(s.clone()))?;
        }
        Ok(out)
    }
}

fn write_line<W: Write>(w: &mut W, line: &TraceLine) -> Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Appends trace lines to a file, flushing after each one.
pub struct TraceWriter {
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path, header: &TraceHeader) -> Result<Self> {
        let mut w = Self {
            out: BufWriter::new(File::create(path)?),
        };
        w.emit(&TraceLine::Header(header.clone()))?;
        Ok(w)
    }

    fn emit(&mut self, line: &TraceLine) -> Result<()> {
        write_line(&mut self.out, line)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn record(&mut self, r: &TraceRecord) -> Result<()> {
        self.emit(&TraceLine::Iteration(r.clone()))
    }

    pub fn summary(&mut self, s: &TraceSummary) -> Result<()> {
        self.emit(&TraceLine::Summary(s.clone()))
    }
}

/// Reads a trace file. A truncated final line (an interrupted write) is
/// ignored with a warning; the summary may be absent.
pub fn read_trace(path: &Path) -> Result<RunTrace> {
    let data_err = |msg: String| Error::Data {
        path: path.to_path_buf(),
        msg,
    };
    let reader = BufReader::new(File::open(path).map_err(|e| data_err(e.to_string()))?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut trace: Option<RunTrace> = None;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = match serde_json::from_str(line) {
            Ok(l) => l,
            Err(e) if i == last && i > 0 => {
                log::warn!("{}: ignoring truncated last line ({e})", path.display());
                break;
            }
            Err(e) => return Err(data_err(format!("line {}: {e}", i + 1))),
        };
        match (parsed, trace.as_mut()) {
            (TraceLine::Header(h), None) => {
                if h.format != TRACE_FORMAT {
                    return Err(data_err("not a run trace".into()));
                }
                check_version(&h.version, TRACE_MAJOR)?;
                trace = Some(RunTrace {
                    header: h,
                    records: Vec::new(),
                    summary: None,
                });
            }
            (TraceLine::Iteration(r), Some(t)) if t.summary.is_none() => t.records.push(r),
            (TraceLine::Summary(s), Some(t)) if t.summary.is_none() => t.summary = Some(s),
            _ => return Err(data_err(format!("line {}: unexpected record", i + 1))),
        }
    }
    trace.ok_or_else(|| data_err("empty trace".into()))
}
