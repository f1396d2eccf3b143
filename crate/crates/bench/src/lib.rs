//! Benchmark harness library: batch execution over seeded scenario grids,
//! per-episode CSV output, Table-style summaries, and SVG episode plots.

pub mod batch;
pub mod csv_io;
pub mod plot;

pub use batch::{run_batch, BatchOutcome, BatchSpec};
pub use csv_io::{summarize_rows, EpisodeRow, SummaryRow};
