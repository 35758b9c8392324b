//! Versioned result CSV: a `#schema=1` line, a header, one row per cell.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Metric;
use crate::error::{CliError, Result};

pub const SCHEMA_LINE: &str = "#schema=1";

pub const METHOD_MECHANISM: &str = "expm-quad";
pub const METHOD_ZERO_SHOT: &str = "zero-shot";
pub const METHOD_SGD: &str = "sgd";
pub const METHOD_DPSGD: &str = "dpsgd";

/// Non-private rows use `epsilon = inf`; unconstrained methods use
/// `radius = inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub epsilon: f64,
    pub radius: f64,
    pub p_tilde: usize,
    pub metric_name: Metric,
    pub mean: f64,
    pub std: f64,
    pub n_models: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn is_reference(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// Writes rows as they arrive and flushes after each batch.
pub struct ResultWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ResultWriter<W> {
    pub fn new(mut w: W) -> Result<Self> {
        writeln!(w, "{SCHEMA_LINE}").map_err(|e| CliError::io("results", e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record([
            "method",
            "epsilon",
            "radius",
            "p_tilde",
            "metric_name",
            "mean",
            "std",
            "n_models",
            "seed",
        ])?;
        Ok(Self { inner })
    }

    pub fn write_rows(&mut self, rows: &[ResultRow]) -> Result<()> {
        for r in rows {
            self.inner.serialize(r)?;
        }
        self.inner.flush().map_err(|e| CliError::io("results", e))?;
        Ok(())
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mismatch = |reason: String| CliError::SchemaMismatch {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::DataMissing {
            path: path.to_path_buf(),
        },
        _ => CliError::io(path, e),
    })?;
    let mut r = std::io::BufReader::new(file);
    let mut first = String::new();
    r.read_line(&mut first).map_err(|e| CliError::io(path, e))?;
    if first.trim_end() != SCHEMA_LINE {
        return Err(mismatch(format!(
            "expected `{SCHEMA_LINE}`, found {:?}",
            first.trim_end()
        )));
    }
    let mut rows: Vec<ResultRow> = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        rows.push(rec.map_err(|e| mismatch(e.to_string()))?);
    }
    if let Some(first) = rows.first() {
        if let Some(other) = rows.iter().find(|r| r.metric_name != first.metric_name) {
            return Err(mismatch(format!(
                "mixed metric names {:?} and {:?}",
                first.metric_name, other.metric_name
            )));
        }
    }
    if let Some(bad) = rows.iter().find(|r| !(r.std >= 0.0)) {
        return Err(mismatch(format!("negative std in row for {}", bad.method)));
    }
    Ok(rows)
}
