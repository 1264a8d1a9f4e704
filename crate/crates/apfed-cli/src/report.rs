//! Summarizes metrics CSVs into a per-method accuracy table.

use std::collections::BTreeMap;

use crate::metrics::{CsvTable, MetricsError};

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Source text echoed verbatim when a single run contributed, so the
    /// table never re-renders a number it did not compute.
    pub exact: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<MethodSummary>,
}

/// Collapses per-epoch rows to one final row per (method, seed) pair and
/// averages accuracy per method. Later files override earlier ones for
/// the same method and seed, so re-running an experiment supersedes it.
pub fn summarize(tables: &[CsvTable]) -> Result<Report, MetricsError> {
    // (method, seed) -> (epoch, accuracy text)
    let mut finals: BTreeMap<(String, String), (u64, String)> = BTreeMap::new();
    for table in tables {
        for row in &table.rows {
            let method = table.get(row, "method")?.to_string();
            let seed = table.get(row, "seed")?.to_string();
            let epoch: u64 = table
                .get(row, "epoch")?
                .parse()
                .map_err(|e| MetricsError(format!("bad epoch for {method}: {e}")))?;
            let acc = table.get(row, "test_accuracy")?.to_string();
            let entry = finals.entry((method, seed)).or_insert((epoch, acc.clone()));
            if epoch >= entry.0 {
                *entry = (epoch, acc);
            }
        }
    }
    if finals.is_empty() {
        return Err(MetricsError("no data rows".to_string()));
    }

    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ((method, _seed), (_epoch, acc)) in finals {
        grouped.entry(method).or_default().push(acc);
    }
    let mut summaries = Vec::with_capacity(grouped.len());
    for (method, accs) in grouped {
        let mut sum = 0.0f64;
        for a in &accs {
            sum += a
                .parse::<f64>()
                .map_err(|_| MetricsError(format!("bad accuracy {a:?} for {method}")))?;
        }
        let runs = accs.len();
        summaries.push(MethodSummary {
            method,
            runs,
            mean_accuracy: sum / runs as f64,
            exact: if runs == 1 { Some(accs.into_iter().next().expect("one run")) } else { None },
        });
    }
    summaries.sort_by(|a, b| {
        b.mean_accuracy
            .partial_cmp(&a.mean_accuracy)
            .expect("accuracies are finite")
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(Report { summaries })
}

impl Report {
    /// Plain-text table, best method(s) starred. Ties all get the star.
    pub fn render(&self) -> String {
        let best = self.summaries[0].mean_accuracy;
        let name_width = self
            .summaries
            .iter()
            .map(|s| s.method.len())
            .max()
            .unwrap_or(6)
            .max("method".len());
        let mut out = format!("{:name_width$}  runs  accuracy\n", "method");
        for s in &self.summaries {
            let acc = match &s.exact {
                Some(text) => text.clone(),
                None => format!("{:.6}", s.mean_accuracy),
            };
            let star = if s.mean_accuracy == best { " *" } else { "" };
            out.push_str(&format!(
                "{:name_width$}  {:>4}  {}{}\n",
                s.method, s.runs, acc, star
            ));
        }
        out
    }
}
