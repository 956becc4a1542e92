//! CSV and JSON output, and speedup tables against Vanilla.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{BlockReport, IterationReport, Strategy};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "iteration,block,strategy,attention_ms,expert_ms,dispatch_bytes,\
combine_bytes,expert_transfer_bytes,comm_ms,condensed_copies,migrated_sequences,cosine_evals";

/// Value of the `block` column on an iteration's totals row.
pub const TOTAL_ROW: &str = "total";

/// One CSV row. `block` is the block index or [`TOTAL_ROW`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub iteration: usize,
    pub block: String,
    pub strategy: Strategy,
    pub attention_ms: f64,
    pub expert_ms: f64,
    pub dispatch_bytes: u64,
    pub combine_bytes: u64,
    pub expert_transfer_bytes: u64,
    pub comm_ms: f64,
    pub condensed_copies: u64,
    pub migrated_sequences: u64,
    pub cosine_evals: u64,
}

impl CsvRow {
    fn new(r: &IterationReport, block: String, b: &BlockReport) -> Self {
        Self {
            iteration: r.iteration,
            block,
            strategy: r.strategy,
            attention_ms: b.attention_ms,
            expert_ms: b.expert_ms,
            dispatch_bytes: b.dispatch_bytes,
            combine_bytes: b.combine_bytes,
            expert_transfer_bytes: b.expert_transfer_bytes,
            comm_ms: b.comm_ms,
            condensed_copies: b.condensed_copies,
            migrated_sequences: b.migrated_sequences,
            cosine_evals: b.cosine_evals,
        }
    }

    pub fn is_total(&self) -> bool {
        self.block == TOTAL_ROW
    }
}

pub fn csv_rows(reports: &[IterationReport]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (i, b) in r.blocks.iter().enumerate() {
            rows.push(CsvRow::new(r, i.to_string(), b));
        }
        rows.push(CsvRow::new(r, TOTAL_ROW.to_string(), &r.totals));
    }
    rows
}

pub fn write_csv_to(reports: &[IterationReport], out: impl Write) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyReports);
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |source| Error::Csv {
        path: "<output>".into(),
        source,
    };
    for row in csv_rows(reports) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))
}

pub fn to_csv(reports: &[IterationReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv_to(reports, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn write_csv(reports: &[IterationReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_csv(reports)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_csv_from(input: impl Read) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<CsvRow>, _>>()
        .map_err(|source| Error::Csv {
            path: "<input>".into(),
            source,
        })?;
    if rows.is_empty() {
        return Err(Error::EmptyReports);
    }
    Ok(rows)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv {
            path: path.into(),
            source,
        },
        e => e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub iterations: usize,
    pub mean_computation_ms: f64,
    pub mean_communication_ms: f64,
    pub mean_iteration_ms: f64,
    pub total_bytes: u64,
    pub speedup_computation: f64,
    pub speedup_communication: f64,
    pub speedup_end_to_end: f64,
    /// Column sums over all iterations, same names as the CSV.
    pub totals: BlockReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    /// Batch seed of each iteration, shared by every strategy.
    pub seeds: Vec<u64>,
    /// Vanilla first, then the remaining strategies in canonical order.
    pub rows: Vec<StrategySummary>,
}

impl ComparisonSummary {
    pub fn row(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `baseline / value`; equal values (including both zero) give exactly 1.
pub fn speedup(baseline: f64, value: f64) -> f64 {
    if baseline == value {
        1.0
    } else {
        baseline / value
    }
}

/// Builds the speedup table. `reports` may hold any mix of strategies in any
/// order; every strategy must have run the same batch seeds as Vanilla.
pub fn summarize(reports: &[IterationReport]) -> Result<ComparisonSummary> {
    if reports.is_empty() {
        return Err(Error::EmptyReports);
    }
    let mut by_strategy: BTreeMap<Strategy, BTreeMap<usize, &IterationReport>> = BTreeMap::new();
    for r in reports {
        if by_strategy
            .entry(r.strategy)
            .or_default()
            .insert(r.iteration, r)
            .is_some()
        {
            return Err(Error::Summary(format!(
                "iteration {} of {} reported twice",
                r.iteration, r.strategy
            )));
        }
    }
    let vanilla = by_strategy
        .get(&Strategy::Vanilla)
        .ok_or_else(|| Error::Summary("no vanilla reports to compare against".into()))?;
    let seeds_of = |m: &BTreeMap<usize, &IterationReport>| -> Vec<(usize, u64)> {
        m.values().map(|r| (r.iteration, r.seed)).collect()
    };
    let base_seeds = seeds_of(vanilla);
    for (s, m) in &by_strategy {
        if seeds_of(m) != base_seeds {
            return Err(Error::SeedMismatch(format!("{s} differs from vanilla")));
        }
    }

    let stats = |m: &BTreeMap<usize, &IterationReport>| {
        let n = m.len() as f64;
        let totals = BlockReport::sum(m.values().map(|r| &r.totals));
        (
            totals.computation_ms() / n,
            totals.comm_ms / n,
            m.values().map(|r| r.iteration_ms()).sum::<f64>() / n,
            totals,
        )
    };
    let (v_comp, v_comm, v_iter, _) = stats(vanilla);
    // BTreeMap order is canonical order, which starts with Vanilla
    let rows = by_strategy
        .iter()
        .map(|(&strategy, m)| {
            let (comp, comm, iter, totals) = stats(m);
            StrategySummary {
                strategy,
                iterations: m.len(),
                mean_computation_ms: comp,
                mean_communication_ms: comm,
                mean_iteration_ms: iter,
                total_bytes: totals.total_bytes(),
                speedup_computation: speedup(v_comp, comp),
                speedup_communication: speedup(v_comm, comm),
                speedup_end_to_end: speedup(v_iter, iter),
                totals,
            }
        })
        .collect();
    Ok(ComparisonSummary {
        seeds: base_seeds.into_iter().map(|(_, s)| s).collect(),
        rows,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
