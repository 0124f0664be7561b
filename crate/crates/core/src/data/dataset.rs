use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Param, ParamKind, ParamSpace};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};

/// Name of the objective column in dataset files.
pub const OBJECTIVE_COLUMN: &str = "y";

/// One task's observations: a row per evaluation, columns ordered as in
/// `space`, categorical entries stored as label indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDataset {
    pub task_id: String,
    pub space: ParamSpace,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl SourceDataset {
    pub fn new(task_id: impl Into<String>, space: ParamSpace, rows: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let task_id = task_id.into();
        if rows.len() != y.len() {
            return Err(Error::shape(
                "SourceDataset",
                format!("{} rows but {} objective values", rows.len(), y.len()),
            ));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != space.len()) {
            return Err(Error::shape(
                "SourceDataset",
                format!("row of length {} for {} columns", r.len(), space.len()),
            ));
        }
        if rows.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("task `{task_id}` contains non-finite values")));
        }
        Ok(Self {
            task_id,
            space,
            rows,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.space.names()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.space.params().iter().position(|p| p.name == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn token_batch(&self) -> TokenBatch {
        TokenBatch {
            names: self.names(),
            values: self.rows.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            task_id: self.task_id.clone(),
            space: self.space.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Writes the dataset as CSV with categorical values as labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.names();
        header.push(OBJECTIVE_COLUMN.into());
        w.write_record(&header)?;
        for (row, y) in self.rows.iter().zip(&self.y) {
            let mut rec: Vec<String> = row
                .iter()
                .zip(self.space.params())
                .map(|(v, p)| match &p.kind {
                    ParamKind::Categorical { choices } => choices[*v as usize].clone(),
                    ParamKind::Numeric { .. } => format!("{v:?}"),
                })
                .collect();
            rec.push(format!("{y:?}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sidecar declaring the kind and bounds of dataset columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default)]
    pub columns: BTreeMap<String, ParamKind>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
        toml::from_str(&text).map_err(|e| data_err(path, e))
    }

    /// `<stem>.schema.toml` next to a dataset file.
    pub fn sidecar_path(dataset: &Path) -> PathBuf {
        let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        dataset.with_file_name(format!("{stem}.schema.toml"))
    }

    pub fn from_space(space: &ParamSpace) -> Self {
        Self {
            columns: space.params().iter().map(|p| (p.name.clone(), p.kind.clone())).collect(),
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Outcome details of [`load_dataset`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub dropped_rows: usize,
}

/// Reads a CSV whose header names the parameters plus the `y` column.
/// Rows with missing or NaN entries are dropped with a warning. Columns not
/// described by `schema` are numeric with bounds taken from the data.
pub fn load_dataset(path: &Path, task_id: &str, schema: Option<&Schema>) -> Result<(SourceDataset, LoadReport)> {
    let t = read_table(path, schema, true)?;
    let y = t.y.expect("objective column required");
    let ds = SourceDataset::new(task_id, t.space, t.rows, y).map_err(|e| data_err(path, e))?;
    Ok((ds, LoadReport { dropped_rows: t.dropped }))
}

/// Rows of a candidate table, with the objective when the file has a `y`
/// column.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateTable {
    pub space: ParamSpace,
    pub rows: Vec<Vec<f64>>,
    pub y: Option<Vec<f64>>,
}

/// Like [`load_dataset`], but the `y` column is optional.
pub fn load_candidates(path: &Path, schema: Option<&Schema>) -> Result<CandidateTable> {
    let t = read_table(path, schema, false)?;
    Ok(CandidateTable {
        space: t.space,
        rows: t.rows,
        y: t.y,
    })
}

struct Table {
    space: ParamSpace,
    rows: Vec<Vec<f64>>,
    y: Option<Vec<f64>>,
    dropped: usize,
}

fn read_table(path: &Path, schema: Option<&Schema>, require_y: bool) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let y_col = header.iter().position(|h| h == OBJECTIVE_COLUMN);
    if require_y && y_col.is_none() {
        return Err(data_err(path, "missing `y` column"));
    }
    let names: Vec<String> = header.iter().filter(|h| *h != OBJECTIVE_COLUMN).cloned().collect();
    let empty = Schema::default();
    let schema = schema.unwrap_or(&empty);
    if let Some(extra) = schema.columns.keys().find(|k| !names.contains(k)) {
        return Err(data_err(path, format!("schema column `{extra}` not in header")));
    }
    let kinds: Vec<Option<&ParamKind>> = names.iter().map(|n| schema.columns.get(n)).collect();

    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut dropped = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        if rec.len() != header.len() {
            return Err(data_err(path, format!("row {} has {} fields, expected {}", line + 2, rec.len(), header.len())));
        }
        let parse = |s: &str, col: &str| -> Result<f64> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse::<f64>()
                .map_err(|_| data_err(path, format!("row {}: non-numeric `{s}` in column `{col}`", line + 2)))
        };
        let yv = match y_col {
            Some(c) => parse(&rec[c], OBJECTIVE_COLUMN)?,
            None => 0.0,
        };
        let mut row = Vec::with_capacity(names.len());
        let mut fields = rec.iter().enumerate().filter(|(i, _)| Some(*i) != y_col).map(|(_, s)| s);
        for (name, kind) in names.iter().zip(&kinds) {
            let s = fields.next().expect("length checked");
            let v = match kind {
                Some(ParamKind::Categorical { choices }) => {
                    if s.is_empty() {
                        f64::NAN
                    } else {
                        choices.iter().position(|c| c == s).ok_or_else(|| {
                            data_err(path, format!("row {}: unknown label `{s}` in column `{name}`", line + 2))
                        })? as f64
                    }
                }
                _ => parse(s, name)?,
            };
            row.push(v);
        }
        if yv.is_nan() || row.iter().any(|v| v.is_nan()) {
            dropped += 1;
            continue;
        }
        if !yv.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(data_err(path, format!("row {}: infinite value", line + 2)));
        }
        rows.push(row);
        y.push(yv);
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing values", path.display());
    }
    if rows.is_empty() {
        return Err(data_err(path, "no data rows"));
    }
    let params = names
        .iter()
        .zip(&kinds)
        .enumerate()
        .map(|(j, (name, kind))| match kind {
            Some(k) => Param {
                name: name.clone(),
                kind: (*k).clone(),
            },
            None => {
                let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                Param::numeric(name.clone(), lo, hi)
            }
        })
        .collect();
    let space = ParamSpace::new(params).map_err(|e| data_err(path, e))?;
    if let Some(bad) = rows.iter().find(|r| !space.contains(r)) {
        return Err(data_err(path, format!("row {bad:?} violates the declared bounds")));
    }
    Ok(Table {
        space,
        rows,
        y: y_col.map(|_| y),
        dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
}

/// List of source tasks; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tasks: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| data_err(path, e))?;
        if m.tasks.is_empty() {
            return Err(data_err(path, "manifest lists no tasks"));
        }
        let mut ids: Vec<&str> = m.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(data_err(path, "duplicate task id"));
        }
        Ok(m)
    }
}

/// Loads every task of a manifest. A schema is taken from the entry, or
/// from the dataset's sidecar file when one exists.
pub fn load_manifest(path: &Path) -> Result<Vec<SourceDataset>> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .tasks
        .iter()
        .map(|t| {
            let data = base.join(&t.path);
            let schema_path = t
                .schema
                .as_ref()
                .map(|s| base.join(s))
                .or_else(|| Some(Schema::sidecar_path(&data)).filter(|p| p.exists()));
            let schema = schema_path.map(|p| Schema::load(&p)).transpose()?;
            Ok(load_dataset(&data, &t.id, schema.as_ref())?.0)
        })
        .collect()
}
