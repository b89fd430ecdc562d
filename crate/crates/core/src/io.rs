//! Plain-text dataset directories and result files.
//!
//! A dataset directory holds
//!
//! ```text
//! subjects.csv          id,y,z1,...,z<p0>[,extra columns]
//! matrices/<id>.csv     p x p comma-separated grid, one per subject
//! meta.json             optional: {"family": "gaussian-identity", "p": 32, ...}
//! ```
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::solvers::{Dataset, Factors, FitResult};
use crate::tensor::SymmetricMatrix;

/// Absolute asymmetry tolerated on ingest; within it the matrix is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-8;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    /// Anything else a generator wants to record (truth, noise level, ...).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Overrides the family in meta.json.
    pub family: Option<Family>,
    pub log_response: bool,
    /// Column of subjects.csv holding integer class labels for stratified folds.
    pub strata_column: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: Dataset,
    pub meta: DatasetMeta,
    pub strata: Option<Vec<i64>>,
    pub warnings: Vec<String>,
}

fn parse_num(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format_err(path, format!("line {line}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(format_err(path, format!("line {line}: non-finite value '{field}'")));
    }
    Ok(v)
}

/// Reads a headerless numeric grid.
pub fn read_grid(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec.iter().map(|f| parse_num(path, i + 1, f)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format_err(path, format!("line {}: {} fields, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, "empty matrix file"));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => format_err(path, format!("{other:?}")),
    }
}

fn read_matrix(path: &Path, p: Option<usize>, warnings: &mut Vec<String>) -> Result<SymmetricMatrix> {
    let m = read_grid(path)?;
    if m.nrows() != m.ncols() {
        return Err(format_err(path, format!("matrix is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    if let Some(p) = p {
        if m.nrows() != p {
            return Err(format_err(path, format!("matrix is {0}x{0}, expected {p}x{p}", m.nrows())));
        }
    }
    let (s, dev) = SymmetricMatrix::with_tolerance(m, SYMMETRY_TOL).map_err(|e| format_err(path, e.to_string()))?;
    if dev > 0.0 {
        warnings.push(format!("{}: symmetrized (max asymmetry {dev:e})", path.display()));
    }
    Ok(s)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Ok(DatasetMeta::default());
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path, opts: &ReadOptions) -> Result<LoadedDataset> {
    let meta = read_meta(dir)?;
    let family = opts.family.unwrap_or(meta.family);
    let path = dir.join("subjects.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(&path, e))?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 || header[0] != "id" || header[1] != "y" {
        return Err(format_err(&path, "header must start with id,y"));
    }
    let mut zcols = Vec::new();
    for k in 1.. {
        match header.iter().position(|h| *h == format!("z{k}")) {
            Some(c) => zcols.push(c),
            None => break,
        }
    }
    let strata_col = match &opts.strata_column {
        None => None,
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidArgument(format!("strata column '{name}' not found in {}", path.display()))
        })?),
    };

    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut zrows: Vec<Vec<f64>> = Vec::new();
    let mut strata = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(format_err(&path, format!("line {line}: invalid id '{id}'")));
        }
        let mut resp = parse_num(&path, line, rec.get(1).unwrap_or(""))?;
        if opts.log_response {
            if !(resp > 0.0) {
                return Err(format_err(&path, format!("line {line}: cannot take the log of {resp}")));
            }
            resp = resp.ln();
        }
        zrows.push(zcols.iter().map(|&c| parse_num(&path, line, rec.get(c).unwrap_or(""))).collect::<Result<_>>()?);
        if let Some(c) = strata_col {
            let raw = rec.get(c).unwrap_or("").trim();
            let label = raw
                .parse::<i64>()
                .map_err(|_| format_err(&path, format!("line {line}: strata label '{raw}' is not an integer")))?;
            strata.push(label);
        }
        ids.push(id);
        y.push(resp);
    }
    if ids.is_empty() {
        return Err(format_err(&path, "no subjects"));
    }

    let mut warnings = Vec::new();
    let mut p = meta.p;
    let mut xs = Vec::with_capacity(ids.len());
    for id in &ids {
        let m = read_matrix(&dir.join("matrices").join(format!("{id}.csv")), p, &mut warnings)?;
        p.get_or_insert(m.p());
        xs.push(m);
    }
    let n = ids.len();
    let z = DMatrix::from_fn(n, zcols.len(), |i, j| zrows[i][j]);
    let data = Dataset::with_ids(ids, y, z, xs, family).map_err(|e| format_err(&path, e.to_string()))?;
    Ok(LoadedDataset {
        data,
        meta,
        strata: strata_col.map(|_| strata),
        warnings,
    })
}

pub fn write_grid(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.row_iter() {
        out.push_str(&join(row.iter().copied()));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_dataset(dir: &Path, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir.join("matrices"))?;
    let mut out = String::from("id,y");
    for k in 1..=data.p0() {
        out.push_str(&format!(",z{k}"));
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&data.ids()[i]);
        out.push(',');
        out.push_str(&fmt_f64(data.y()[i]));
        for v in data.z().row(i).iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(dir.join("subjects.csv"), out)?;
    for (id, x) in data.ids().iter().zip(data.xs()) {
        write_grid(&dir.join("matrices").join(format!("{id}.csv")), x.as_matrix())?;
    }
    let meta = DatasetMeta {
        family: data.family(),
        p: Some(data.p()),
        extra: meta.extra.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub estimator: String,
    pub rank: usize,
    pub rho: f64,
    pub in_sample_mse: f64,
    pub nonzero_count: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub diagnostics: crate::solvers::Diagnostics,
    pub warnings: Vec<String>,
}

impl FitMetrics {
    pub fn new(fit: &FitResult, data: &Dataset, warnings: Vec<String>) -> Result<Self> {
        Ok(Self {
            estimator: fit.estimator.name().to_string(),
            rank: fit.config.rank,
            rho: fit.config.rho,
            in_sample_mse: crate::evaluate::mse_pred(&fit.predict(data), data.y())?,
            nonzero_count: fit.nonzero_count(),
            converged: fit.converged,
            iterations: fit.iterations,
            final_objective: fit.final_objective(),
            diagnostics: fit.diagnostics.clone(),
            warnings,
        })
    }
}

/// Writes gamma.csv, factors.csv, coef_full.csv, trace.csv and metrics.json.
pub fn write_fit(dir: &Path, fit: &FitResult, data: &Dataset, warnings: Vec<String>) -> Result<FitMetrics> {
    fs::create_dir_all(dir)?;
    let mut g = String::from("gamma\n");
    for v in &fit.gamma {
        g.push_str(&fmt_f64(*v));
        g.push('\n');
    }
    fs::write(dir.join("gamma.csv"), g)?;

    let mut f = String::new();
    let header = |r: usize| (1..=r).map(|k| format!("r{k}")).collect::<Vec<_>>().join(",");
    match &fit.factors {
        Factors::Sym(s) => {
            f.push_str(&format!("row,{}\n", header(s.rank())));
            f.push_str(&format!("lambda,{}\n", join(s.lambda.iter().copied())));
            for (i, row) in s.b.row_iter().enumerate() {
                f.push_str(&format!("b{},{}\n", i + 1, join(row.iter().copied())));
            }
        }
        Factors::Cp(c) => {
            f.push_str(&format!("row,{}\n", header(c.b1.cols())));
            for (name, m) in [("b1_", &c.b1), ("b2_", &c.b2)] {
                for (i, row) in m.row_iter().enumerate() {
                    f.push_str(&format!("{name}{},{}\n", i + 1, join(row.iter().copied())));
                }
            }
        }
    }
    fs::write(dir.join("factors.csv"), f)?;
    write_grid(&dir.join("coef_full.csv"), fit.coef_full.as_matrix())?;

    let mut t = String::from("iteration,objective\n");
    for (i, v) in fit.objective_trace.iter().enumerate() {
        t.push_str(&format!("{},{}\n", i + 1, fmt_f64(*v)));
    }
    fs::write(dir.join("trace.csv"), t)?;

    let metrics = FitMetrics::new(fit, data, warnings)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Record of one CLI invocation, written as manifest.json next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument list after the program name; `symreg rerun` replays it.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub rng_algorithm: String,
    pub seed: u64,
    pub duration_secs: f64,
    pub version: String,
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}
