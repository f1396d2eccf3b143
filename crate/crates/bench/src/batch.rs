//! Seeded batch execution: a grid of (pedestrian count, planner, run)
//! episodes sharing paired seeds, run in parallel with deterministic output
//! ordering.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tmpc_core::sim::{run_episode, PlannerKind, ScenarioConfig};

use crate::csv_io::{format_grid, summarize_rows, EpisodeRow, SummaryRow};

/// Batch description (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    /// Scenario file the episodes are based on (relative to the spec file).
    pub scenario: PathBuf,
    pub planners: Vec<PlannerKind>,
    pub ped_counts: Vec<usize>,
    /// Episodes per (count, planner) cell.
    pub runs: usize,
    pub base_seed: u64,
    pub out_dir: PathBuf,
    /// Record and write per-episode logs.
    pub write_logs: bool,
    /// Fill the mean_cycle_ms column with measured wall time. Off by
    /// default so identical specs rerun to byte-identical CSVs.
    pub timing: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            scenario: PathBuf::from("crossing.json"),
            planners: vec![
                PlannerKind::Braking,
                PlannerKind::Lmpcc,
                PlannerKind::TmpcppNoFallback,
                PlannerKind::Tmpcpp,
            ],
            ped_counts: vec![0, 2, 4],
            runs: 25,
            base_seed: 1000,
            out_dir: PathBuf::from("bench_out"),
            write_logs: false,
            timing: false,
        }
    }
}

impl BatchSpec {
    pub fn load(path: &Path) -> Result<(Self, ScenarioConfig)> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading batch spec {}", path.display()))?;
        let spec: BatchSpec =
            serde_json::from_str(&text).context("parsing batch spec JSON")?;
        if spec.runs == 0 {
            bail!("batch spec needs runs >= 1");
        }
        if spec.planners.is_empty() {
            bail!("batch spec needs at least one planner");
        }
        let scenario_path = if spec.scenario.is_absolute() {
            spec.scenario.clone()
        } else {
            path.parent().unwrap_or(Path::new(".")).join(&spec.scenario)
        };
        let scenario_text = fs::read_to_string(&scenario_path)
            .with_context(|| format!("reading scenario {}", scenario_path.display()))?;
        let scenario: ScenarioConfig =
            serde_json::from_str(&scenario_text).context("parsing scenario JSON")?;
        Ok((spec, scenario))
    }
}

/// Files written by [`run_batch`].
pub struct BatchOutcome {
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<SummaryRow>,
    pub episodes_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub grid_txt: PathBuf,
    pub failures: usize,
}

/// Execute the batch grid. Episodes run in parallel; rows are written to
/// the episode CSV incrementally in spec order (count, planner, run).
pub fn run_batch(spec: &BatchSpec, scenario: &ScenarioConfig) -> Result<BatchOutcome> {
    fs::create_dir_all(&spec.out_dir)
        .with_context(|| format!("creating output dir {}", spec.out_dir.display()))?;
    let episodes_csv = spec.out_dir.join("episodes.csv");
    let mut writer = fs::File::create(&episodes_csv)
        .with_context(|| format!("creating {}", episodes_csv.display()))?;
    writeln!(writer, "{}", EpisodeRow::header())?;

    struct Job {
        index: usize,
        count: usize,
        planner: PlannerKind,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for &count in &spec.ped_counts {
        for &planner in &spec.planners {
            for run in 0..spec.runs {
                jobs.push(Job {
                    index: jobs.len(),
                    count,
                    planner,
                    seed: spec.base_seed + run as u64,
                });
            }
        }
    }

    let (tx, rx) = mpsc::channel::<(usize, EpisodeRow, bool, Option<(String, String)>)>();
    let write_logs = spec.write_logs;
    let timing = spec.timing;
    let out_dir = spec.out_dir.clone();

    let worker = |job: &Job| -> (EpisodeRow, bool, Option<(String, String)>) {
        let mut cfg = scenario.clone();
        cfg.seed = job.seed;
        cfg.n_pedestrians = job.count;
        cfg.planner = job.planner;
        cfg.record_log = write_logs;
        let outcome = std::panic::catch_unwind(|| run_episode(&cfg));
        match outcome {
            Ok(result) => {
                let row = EpisodeRow::from_metrics(
                    job.seed,
                    job.planner,
                    job.count,
                    &result.metrics,
                    timing,
                );
                let log = result.log.map(|log| {
                    (
                        format!(
                            "episode_{}_{}p_seed{}.jsonl",
                            job.planner.label(),
                            job.count,
                            job.seed
                        ),
                        log.to_jsonl(),
                    )
                });
                (row, result.metrics.failed, log)
            }
            Err(_) => {
                // Panicking episode: record a failure row.
                let row = EpisodeRow {
                    seed: job.seed,
                    planner: job.planner.label().to_string(),
                    n_peds: job.count,
                    duration_s: f64::NAN,
                    collisions: 0,
                    timed_out: false,
                    avg_vel_mps: f64::NAN,
                    min_clearance_m: f64::NAN,
                    infeasible_frac: f64::NAN,
                    mean_cycle_ms: f64::NAN,
                };
                (row, true, None)
            }
        }
    };

    let n_jobs = jobs.len();

    // Writer thread: buffer out-of-order results, flush in spec order.
    let writer_handle = std::thread::spawn(move || {
        let mut rows: Vec<Option<EpisodeRow>> = vec![None; n_jobs];
        let mut failures = 0usize;
        let mut pending: std::collections::BTreeMap<usize, EpisodeRow> =
            std::collections::BTreeMap::new();
        let mut next = 0usize;
        let mut received = 0usize;
        while received < n_jobs {
            let Ok((index, row, failed, log)) = rx.recv() else {
                break;
            };
            received += 1;
            if failed {
                failures += 1;
            }
            if let Some((name, text)) = log {
                let _ = fs::write(out_dir.join(name), text);
            }
            pending.insert(index, row);
            while let Some(row) = pending.remove(&next) {
                row.write_line(&mut writer).expect("episode CSV write");
                rows[next] = Some(row);
                next += 1;
            }
        }
        for (index, row) in pending {
            rows[index] = Some(row.clone());
            row.write_line(&mut writer).expect("episode CSV write");
        }
        writer.flush().expect("episode CSV flush");
        (rows, failures)
    });

    jobs.par_iter().for_each_with(tx, |tx, job| {
        let (row, failed, log) = worker(job);
        let _ = tx.send((job.index, row, failed, log));
    });

    let (rows, failures) = writer_handle.join().expect("writer thread");
    let rows: Vec<EpisodeRow> = rows.into_iter().map(|r| r.expect("all jobs ran")).collect();

    // Aggregate from the values as they round-trip through the CSV so the
    // standalone summarize command reproduces the summary exactly.
    let csv_text = fs::read_to_string(&episodes_csv)?;
    let parsed = EpisodeRow::parse_csv(&csv_text)?;
    let summary = summarize_rows(&parsed);

    let summary_csv = spec.out_dir.join("summary.csv");
    let mut sw = fs::File::create(&summary_csv)?;
    writeln!(sw, "{}", SummaryRow::header())?;
    for row in &summary {
        row.write_line(&mut sw)?;
    }
    sw.flush()?;

    let grid_txt = spec.out_dir.join("table.txt");
    fs::write(&grid_txt, format_grid(&summary))?;

    Ok(BatchOutcome {
        rows,
        summary,
        episodes_csv,
        summary_csv,
        grid_txt,
        failures,
    })
}
