//! Chain diagnostics: acceptance rate, autocorrelation, histograms, and the
//! per-run summary. Everything operates on trace rows so the same numbers
//! come out of an in-memory record and a re-imported CSV.

use crate::trace::TraceRow;
use crate::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Fraction of post-initialization rows that were accepted. Row 0 is the
/// initial state and does not count.
pub fn acceptance_rate(rows: &[TraceRow]) -> Result<f64, CliError> {
    if rows.len() < 2 {
        return Err(CliError::Validation(
            "acceptance rate needs at least one iteration".into(),
        ));
    }
    let accepted = rows[1..].iter().filter(|r| r.accepted).count();
    Ok(accepted as f64 / (rows.len() - 1) as f64)
}

/// Biased (length-normalized) autocorrelation estimate up to `max_lag`;
/// entry 0 is 1 by construction.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>, CliError> {
    if series.len() <= max_lag {
        return Err(CliError::Validation(format!(
            "series of length {} cannot support lag {max_lag}",
            series.len()
        )));
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(CliError::Validation(
            "constant series has no autocorrelation".into(),
        ));
    }
    let mut acf = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let num: f64 = (0..n - lag)
            .map(|t| (series[t] - mean) * (series[t + lag] - mean))
            .sum();
        acf.push(num / denom);
    }
    Ok(acf)
}

/// Histogram over half-open bins `[edge[i], edge[i+1])`, with everything
/// below the first edge and at or above the last counted separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

pub fn histogram(samples: &[f64], edges: &[f64]) -> Result<Histogram, CliError> {
    if edges.len() < 2 {
        return Err(CliError::Validation("need at least two bin edges".into()));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Validation(
            "bin edges must strictly increase".into(),
        ));
    }
    let mut h = Histogram {
        counts: vec![0; edges.len() - 1],
        underflow: 0,
        overflow: 0,
    };
    for &x in samples {
        if x < edges[0] {
            h.underflow += 1;
        } else if x >= *edges.last().unwrap() {
            h.overflow += 1;
        } else {
            // A sample sitting on an edge belongs to the bin on its right.
            let bin = edges[1..].partition_point(|&e| e <= x);
            h.counts[bin] += 1;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub acf: Vec<f64>,
}

/// Per-run summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iterations: usize,
    pub acceptance_rate: f64,
    pub parameters: Vec<ParamSummary>,
    /// How often each level count appeared in the chain.
    pub level_counts: BTreeMap<usize, usize>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarize a trace: acceptance rate, per-parameter posterior moments and
/// autocorrelation, level-count histogram.
pub fn summarize(rows: &[TraceRow], max_lag: usize) -> Result<Summary, CliError> {
    let rate = acceptance_rate(rows)?;
    let dim = rows[0].theta.len();
    let mut parameters = Vec::with_capacity(dim);
    for j in 0..dim {
        let series: Vec<f64> = rows.iter().map(|r| r.theta[j]).collect();
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let mut sorted = series.clone();
        sorted.sort_by(f64::total_cmp);
        let lag = max_lag.min(series.len() - 1);
        let acf = match autocorrelation(&series, lag) {
            Ok(acf) => acf,
            // A chain that never moved has a constant trace; report the
            // degenerate ACF rather than failing the whole summary.
            Err(_) => vec![1.0],
        };
        parameters.push(ParamSummary {
            mean,
            q025: quantile(&sorted, 0.025),
            median: quantile(&sorted, 0.5),
            q975: quantile(&sorted, 0.975),
            acf,
        });
    }
    let mut level_counts = BTreeMap::new();
    for r in rows {
        *level_counts.entry(r.p).or_insert(0) += 1;
    }
    Ok(Summary {
        iterations: rows.len() - 1,
        acceptance_rate: rate,
        parameters,
        level_counts,
    })
}
