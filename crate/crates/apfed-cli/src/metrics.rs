//! Metrics persistence.
//!
//! One CSV per run: a header row, then one record per epoch. Floats print
//! in shortest round-trip form, so identical runs produce byte-identical
//! files except for the wall-clock column, and the report command can echo
//! source values without reformatting.

use std::fs;
use std::path::Path;

#[derive(Debug, Clone, thiserror::Error)]
#[error("metrics: {0}")]
pub struct MetricsError(pub String);

/// One epoch of one run. Byte counters are the active role's cumulative
/// transport totals; the passive side of each link mirrors them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub loss_active: f32,
    pub passive_losses: Vec<f32>,
    pub test_accuracy: f32,
    pub wall_ms: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

pub const WALL_COLUMN: &str = "wall_ms";

pub fn csv_header(passives: usize) -> String {
    let mut cols = vec!["method".to_string(), "seed".into(), "epoch".into(), "loss_active".into()];
    for p in 1..=passives {
        cols.push(format!("loss_p{p}"));
    }
    cols.extend(["test_accuracy".into(), WALL_COLUMN.into(), "bytes_sent".into(), "bytes_received".into()]);
    cols.join(",")
}

pub fn render_csv(records: &[RunRecord]) -> Result<String, MetricsError> {
    let passives = records
        .first()
        .map(|r| r.passive_losses.len())
        .unwrap_or(0);
    if records.iter().any(|r| r.passive_losses.len() != passives) {
        return Err(MetricsError(
            "records disagree on passive count".to_string(),
        ));
    }
    let mut out = csv_header(passives);
    out.push('\n');
    for r in records {
        out.push_str(&r.method);
        out.push(',');
        out.push_str(&r.seed.to_string());
        out.push(',');
        out.push_str(&r.epoch.to_string());
        out.push(',');
        out.push_str(&r.loss_active.to_string());
        for l in &r.passive_losses {
            out.push(',');
            out.push_str(&l.to_string());
        }
        out.push(',');
        out.push_str(&r.test_accuracy.to_string());
        out.push(',');
        out.push_str(&r.wall_ms.to_string());
        out.push(',');
        out.push_str(&r.bytes_sent.to_string());
        out.push(',');
        out.push_str(&r.bytes_received.to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<(), MetricsError> {
    let text = render_csv(records)?;
    fs::write(path.as_ref(), text)
        .map_err(|e| MetricsError(format!("{}: {e}", path.as_ref().display())))
}

/// A parsed CSV with column access by header name. Values stay as source
/// strings; callers parse what they need.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| MetricsError("empty csv".to_string()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(MetricsError(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(CsvTable { header, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| MetricsError(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn get<'a>(&'a self, row: &'a [String], name: &str) -> Result<&'a str, MetricsError> {
        let idx = self
            .column(name)
            .ok_or_else(|| MetricsError(format!("no column {name:?}")))?;
        Ok(&row[idx])
    }

    pub fn last_row(&self) -> Result<&[String], MetricsError> {
        self.rows
            .last()
            .map(Vec::as_slice)
            .ok_or_else(|| MetricsError("csv has no data rows".to_string()))
    }
}
