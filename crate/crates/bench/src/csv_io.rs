//! Per-episode CSV rows and their aggregation into summary tables. All
//! floating-point values are written with fixed precision so reruns of the
//! same spec produce byte-identical files.

use std::io::Write;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tmpc_core::sim::{MetricsRecord, PlannerKind};

/// One CSV row per episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub seed: u64,
    pub planner: String,
    pub n_peds: usize,
    pub duration_s: f64,
    pub collisions: usize,
    pub timed_out: bool,
    pub avg_vel_mps: f64,
    pub min_clearance_m: f64,
    pub infeasible_frac: f64,
    pub mean_cycle_ms: f64,
}

impl EpisodeRow {
    pub fn from_metrics(
        seed: u64,
        planner: PlannerKind,
        n_peds: usize,
        metrics: &MetricsRecord,
        with_timing: bool,
    ) -> Self {
        Self {
            seed,
            planner: planner.label().to_string(),
            n_peds,
            duration_s: round6(metrics.duration),
            collisions: metrics.collisions,
            timed_out: metrics.timed_out,
            avg_vel_mps: round6(metrics.avg_velocity),
            min_clearance_m: round6(metrics.min_clearance),
            infeasible_frac: round6(metrics.infeasible_cycle_fraction),
            mean_cycle_ms: if with_timing {
                round6(metrics.mean_cycle_time() * 1000.0)
            } else {
                0.0
            },
        }
    }

    pub fn header() -> &'static str {
        "seed,planner,n_peds,duration_s,collisions,timed_out,avg_vel_mps,min_clearance_m,infeasible_frac,mean_cycle_ms"
    }

    pub fn write_line(&self, out: &mut impl Write) -> Result<()> {
        writeln!(
            out,
            "{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.seed,
            self.planner,
            self.n_peds,
            self.duration_s,
            self.collisions,
            self.timed_out,
            self.avg_vel_mps,
            self.min_clearance_m,
            self.infeasible_frac,
            self.mean_cycle_ms,
        )?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Vec<EpisodeRow>> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            let row: EpisodeRow = record.context("malformed episode CSV row")?;
            rows.push(row);
        }
        Ok(rows)
    }
}

fn round6(v: f64) -> f64 {
    if v.is_finite() {
        (v * 1e6).round() / 1e6
    } else {
        v
    }
}

/// Aggregated cell of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n_peds: usize,
    pub planner: String,
    pub mean_duration_s: f64,
    pub duration_std_s: f64,
    pub collisions_total: usize,
    pub timeouts_total: usize,
    pub mean_avg_vel_mps: f64,
    pub runs: usize,
}

impl SummaryRow {
    pub fn header() -> &'static str {
        "n_peds,planner,mean_duration_s,duration_std_s,collisions_total,timeouts_total,mean_avg_vel_mps,runs"
    }

    pub fn write_line(&self, out: &mut impl Write) -> Result<()> {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{:.6},{}",
            self.n_peds,
            self.planner,
            self.mean_duration_s,
            self.duration_std_s,
            self.collisions_total,
            self.timeouts_total,
            self.mean_avg_vel_mps,
            self.runs,
        )?;
        Ok(())
    }
}

/// Aggregate episode rows into summary cells (ordered by pedestrian count,
/// then planner name as first encountered).
pub fn summarize_rows(rows: &[EpisodeRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<(usize, String, Vec<&EpisodeRow>)> = Vec::new();
    for row in rows {
        match cells
            .iter_mut()
            .find(|(n, p, _)| *n == row.n_peds && *p == row.planner)
        {
            Some((_, _, list)) => list.push(row),
            None => cells.push((row.n_peds, row.planner.clone(), vec![row])),
        }
    }
    cells.sort_by(|a, b| a.0.cmp(&b.0));
    cells
        .into_iter()
        .map(|(n_peds, planner, list)| {
            let n = list.len() as f64;
            let mean_dur = list.iter().map(|r| r.duration_s).sum::<f64>() / n;
            let var = if list.len() > 1 {
                list.iter()
                    .map(|r| (r.duration_s - mean_dur).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            SummaryRow {
                n_peds,
                planner,
                mean_duration_s: round6(mean_dur),
                duration_std_s: round6(var.sqrt()),
                collisions_total: list.iter().map(|r| r.collisions).sum(),
                timeouts_total: list.iter().filter(|r| r.timed_out).count(),
                mean_avg_vel_mps: round6(list.iter().map(|r| r.avg_vel_mps).sum::<f64>() / n),
                runs: list.len(),
            }
        })
        .collect()
}

/// Formatted comparison grid mirroring the reference table layout: rows
/// grouped by pedestrian count; the zero-pedestrian block lists only the
/// braking baseline and the full planner.
pub fn format_grid(summary: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<3} {:<22} {:>12} {:>11} {:>10} {:>14}\n",
        "#", "Method", "Dur. [s]", "Collisions", "Time-outs", "Avg. Vel. [m/s]"
    ));
    out.push_str(&"-".repeat(78));
    out.push('\n');
    let mut counts: Vec<usize> = summary.iter().map(|s| s.n_peds).collect();
    counts.dedup();
    for &count in &counts {
        for row in summary.iter().filter(|s| s.n_peds == count) {
            if count == 0 && row.planner != "braking" && row.planner != "tmpcpp" {
                continue;
            }
            out.push_str(&format!(
                "{:<3} {:<22} {:>6.1} ({:.1}) {:>11} {:>10} {:>14.2}\n",
                count,
                row.planner,
                row.mean_duration_s,
                row.duration_std_s,
                row.collisions_total,
                row.timeouts_total,
                row.mean_avg_vel_mps,
            ));
        }
        out.push_str(&"-".repeat(78));
        out.push('\n');
    }
    out
}
