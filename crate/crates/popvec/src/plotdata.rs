//! Reshapes run logs and benchmark results into per-figure tables.
//!
//! * `scaling.csv`: `mode, n, median_ms, iqr_ms, warmup_ms`
//! * `cost.csv`: `hardware, runtime_s, dollars`
//! * `returns.csv`: `update_steps, env_steps, member_id, episode_return`

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchMode, BenchResult};
use crate::cost::{cost_estimate, PriceTable};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;

/// One benchmark result as stored by `bench --out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub k: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub warmup_ms: f64,
    pub kernel_launches: Option<u64>,
}

impl From<&BenchResult> for BenchRow {
    fn from(r: &BenchResult) -> Self {
        Self {
            mode: r.mode,
            n: r.n,
            k: r.k,
            repetitions: r.repetitions,
            median_ms: r.median_ms,
            iqr_ms: r.iqr_ms,
            warmup_ms: r.warmup_ms,
            kernel_launches: r.kernel_launches,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mode: BenchMode,
    pub n: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub warmup_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub hardware: String,
    pub runtime_s: f64,
    pub dollars: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRow {
    pub update_steps: u64,
    pub env_steps: u64,
    pub member_id: usize,
    pub episode_return: f64,
}

/// Scaling rows ordered by mode, then population size.
pub fn scaling_table(rows: &[BenchRow]) -> Vec<ScalingRow> {
    let mut out: Vec<ScalingRow> = rows
        .iter()
        .map(|r| ScalingRow {
            mode: r.mode,
            n: r.n,
            median_ms: r.median_ms,
            iqr_ms: r.iqr_ms,
            warmup_ms: r.warmup_ms,
        })
        .collect();
    out.sort_by_key(|r| (r.mode.name(), r.n));
    out
}

/// Cost of a run lasting as long as the last metrics row, on every priced
/// hardware.
pub fn cost_table(metrics: &[MetricsRow], prices: &PriceTable) -> Result<Vec<CostRow>> {
    let runtime_s = metrics.iter().map(|r| r.wall_clock_s).fold(0.0, f64::max);
    prices
        .names()
        .map(|h| {
            Ok(CostRow {
                hardware: h.to_string(),
                runtime_s,
                dollars: cost_estimate(runtime_s, h, prices)?,
            })
        })
        .collect()
}

pub fn returns_table(metrics: &[MetricsRow]) -> Vec<ReturnRow> {
    metrics
        .iter()
        .filter_map(|r| {
            Some(ReturnRow {
                update_steps: r.update_steps,
                env_steps: r.env_steps,
                member_id: r.member_id?,
                episode_return: r.episode_return?,
            })
        })
        .collect()
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Writes whichever tables the inputs allow; returns the files written.
pub fn emit(
    out_dir: &Path,
    metrics: Option<&Path>,
    bench: Option<&Path>,
    prices: &PriceTable,
) -> Result<Vec<PathBuf>> {
    if metrics.is_none() && bench.is_none() {
        return Err(popvec_core::Error::Usage(
            "emit-plot-data needs --metrics and/or --bench".into(),
        )
        .into());
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    if let Some(b) = bench {
        let rows: Vec<BenchRow> = read_csv(b)?;
        let p = out_dir.join("scaling.csv");
        write_csv(&p, &scaling_table(&rows))?;
        written.push(p);
    }
    if let Some(m) = metrics {
        let rows = crate::metrics::read_metrics(m)?;
        let p = out_dir.join("cost.csv");
        write_csv(&p, &cost_table(&rows, prices)?)?;
        written.push(p);
        let p = out_dir.join("returns.csv");
        write_csv(&p, &returns_table(&rows))?;
        written.push(p);
    }
    Ok(written)
}
