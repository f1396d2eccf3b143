//! Command-line benchmark harness.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tmpc_bench::batch::{run_batch, BatchSpec};
use tmpc_bench::csv_io::{format_grid, summarize_rows, EpisodeRow, SummaryRow};
use tmpc_bench::plot::render_svg;
use tmpc_core::sim::{EpisodeLog, PlannerKind};

#[derive(Parser)]
#[command(name = "bench", about = "Seeded planner benchmark harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch spec: episodes CSV, summary CSV, and a comparison grid.
    Run {
        /// Batch spec JSON (references a scenario JSON).
        spec: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to a comma-separated planner list
        /// (braking,lmpcc,tmpcpp_no_fallback,tmpcpp).
        #[arg(long, value_delimiter = ',')]
        planner: Option<Vec<String>>,
        /// Override the pedestrian counts.
        #[arg(long, value_delimiter = ',')]
        peds: Option<Vec<usize>>,
        /// Override the runs per cell.
        #[arg(long)]
        runs: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Record wall-clock timing in the CSV (makes reruns non-identical).
        #[arg(long)]
        timing: bool,
        /// Write per-episode structured logs.
        #[arg(long)]
        logs: bool,
    },
    /// Render an episode log to SVG.
    Plot {
        /// Episode log (JSON lines).
        log: PathBuf,
        /// Output SVG path (default: alongside the log).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Planning cycle whose candidates/uncertainty are drawn.
        #[arg(long)]
        cycle: Option<usize>,
    },
    /// Recompute the summary table from a per-episode CSV.
    Summarize {
        csv: PathBuf,
        /// Write summary CSV here (default: print the grid only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_planner(name: &str) -> Result<PlannerKind> {
    match name {
        "braking" => Ok(PlannerKind::Braking),
        "lmpcc" => Ok(PlannerKind::Lmpcc),
        "tmpcpp_no_fallback" => Ok(PlannerKind::TmpcppNoFallback),
        "tmpcpp" => Ok(PlannerKind::Tmpcpp),
        other => anyhow::bail!(
            "unknown planner '{other}' (expected braking, lmpcc, tmpcpp_no_fallback, tmpcpp)"
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            spec,
            seed,
            out,
            planner,
            peds,
            runs,
            jobs,
            timing,
            logs,
        } => {
            if let Some(jobs) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build_global()
                    .context("configuring worker threads")?;
            }
            let (mut batch, scenario) = BatchSpec::load(&spec)?;
            if let Some(seed) = seed {
                batch.base_seed = seed;
            }
            if let Some(out) = out {
                batch.out_dir = out;
            }
            if let Some(names) = planner {
                batch.planners = names
                    .iter()
                    .map(|n| parse_planner(n))
                    .collect::<Result<Vec<_>>>()?;
            }
            if let Some(peds) = peds {
                batch.ped_counts = peds;
            }
            if let Some(runs) = runs {
                batch.runs = runs;
            }
            if timing {
                batch.timing = true;
            }
            if logs {
                batch.write_logs = true;
            }
            let outcome = run_batch(&batch, &scenario)?;
            println!("{}", format_grid(&outcome.summary));
            println!("episodes: {}", outcome.episodes_csv.display());
            println!("summary:  {}", outcome.summary_csv.display());
            println!("grid:     {}", outcome.grid_txt.display());
            if outcome.failures > 0 {
                eprintln!("{} episode(s) failed", outcome.failures);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { log, out, cycle } => {
            let text = fs::read_to_string(&log)
                .with_context(|| format!("reading {}", log.display()))?;
            let parsed = EpisodeLog::from_jsonl(&text)?;
            let svg = render_svg(&parsed, cycle)?;
            let out = out.unwrap_or_else(|| log.with_extension("svg"));
            fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { csv, out } => {
            let text = fs::read_to_string(&csv)
                .with_context(|| format!("reading {}", csv.display()))?;
            let rows = EpisodeRow::parse_csv(&text)?;
            let summary = summarize_rows(&rows);
            print!("{}", format_grid(&summary));
            if let Some(out) = out {
                let mut buf = Vec::new();
                use std::io::Write;
                writeln!(buf, "{}", SummaryRow::header())?;
                for row in &summary {
                    row.write_line(&mut buf)?;
                }
                fs::write(&out, buf)?;
                println!("wrote {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
