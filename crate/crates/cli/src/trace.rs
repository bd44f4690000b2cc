//! Trace export and re-import.
//!
//! The CSV layout is `iter,accepted,log_zhat,p,theta_0,...,tau` with floats
//! printed in shortest round-trip form, so a re-imported trace reproduces
//! the in-memory values bit for bit. The JSON export adds run metadata (the
//! effective config, seed, and crate version) sufficient to re-run.

use crate::config::RunConfig;
use crate::CliError;
use mlpmcmc::pmcmc::{ChainRecord, ChainRow};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// One exported chain row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub accepted: bool,
    pub log_zhat: f64,
    /// Level count behind this state.
    pub p: usize,
    pub theta: Vec<f64>,
    pub tau: u32,
}

impl From<&ChainRow> for TraceRow {
    fn from(row: &ChainRow) -> Self {
        Self {
            iter: row.iteration,
            accepted: row.accepted,
            log_zhat: row.log_zhat,
            p: row.level_count,
            theta: row.theta.clone(),
            tau: row.total_tau,
        }
    }
}

pub fn rows_from_record(record: &ChainRecord) -> Vec<TraceRow> {
    record.rows.iter().map(TraceRow::from).collect()
}

/// Render the CSV document for a trace.
pub fn to_csv(rows: &[TraceRow]) -> String {
    let dim = rows.first().map(|r| r.theta.len()).unwrap_or(0);
    let mut out = String::from("iter,accepted,log_zhat,p");
    for i in 0..dim {
        let _ = write!(out, ",theta_{i}");
    }
    out.push_str(",tau\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.iter,
            u8::from(r.accepted),
            r.log_zhat,
            r.p
        );
        for t in &r.theta {
            let _ = write!(out, ",{t}");
        }
        let _ = writeln!(out, ",{}", r.tau);
    }
    out
}

/// Parse a CSV trace document.
pub fn from_csv(text: &str) -> Result<Vec<TraceRow>, CliError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Validation("empty trace file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[0] != "iter" || cols[1] != "accepted" || cols[2] != "log_zhat" {
        return Err(CliError::Validation(format!(
            "unrecognized trace header: {header}"
        )));
    }
    let dim = cols.len() - 5;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CliError::Validation(format!(
                "trace line {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse_err =
            |what: &str| CliError::Validation(format!("trace line {}: bad {what}", lineno + 2));
        let mut theta = Vec::with_capacity(dim);
        for f in &fields[4..4 + dim] {
            theta.push(f.parse::<f64>().map_err(|_| parse_err("theta"))?);
        }
        rows.push(TraceRow {
            iter: fields[0].parse().map_err(|_| parse_err("iter"))?,
            accepted: fields[1] == "1",
            log_zhat: fields[2].parse().map_err(|_| parse_err("log_zhat"))?,
            p: fields[3].parse().map_err(|_| parse_err("p"))?,
            theta,
            tau: fields[4 + dim].parse().map_err(|_| parse_err("tau"))?,
        });
    }
    Ok(rows)
}

/// The JSON export: run metadata plus the full row array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn from_name(name: &str) -> Result<Self, CliError> {
        match name {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(CliError::Validation(format!(
                "unknown trace format {other:?}; expected csv or json"
            ))),
        }
    }
}

/// Write a trace to disk in the requested format.
pub fn export_trace(
    record: &ChainRecord,
    config: &RunConfig,
    path: &Path,
    format: TraceFormat,
) -> Result<(), CliError> {
    let rows = rows_from_record(record);
    let text = match format {
        TraceFormat::Csv => to_csv(&rows),
        TraceFormat::Json => {
            let doc = TraceDocument {
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: config.seed,
                config: config.clone(),
                rows,
            };
            let mut text = serde_json::to_string_pretty(&doc)
                .map_err(|e| CliError::Runtime(format!("trace serialization: {e}")))?;
            text.push('\n');
            text
        }
    };
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}
