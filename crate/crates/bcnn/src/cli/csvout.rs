//! Run-metrics CSV emission with a frozen column set.
//!
//! Every command writes the same header, so downstream tooling can stack
//! files from different runs.  `train_loss` is empty for rows that do not
//! come from a training iteration (checkpoint evaluations, summaries).
//! Floats print in Rust's shortest round-trip form, making files
//! byte-stable across identical runs; `wall_ms` is the only column allowed
//! to differ between reruns.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

pub const CSV_HEADER: &str = "run_id,model,mode,T,iter,train_loss,test_error,seed,wall_ms";

/// One metrics row.
pub struct Row<'a> {
    pub run_id: &'a str,
    pub model: &'a str,
    /// `standard` or `mc`.
    pub mode: &'a str,
    /// Monte Carlo sample count; 0 for standard-mode rows.
    pub t: usize,
    /// Training iterations behind the row; 0 when evaluating a checkpoint.
    pub iter: u64,
    pub train_loss: Option<f64>,
    pub test_error: f64,
    pub seed: u64,
    pub wall_ms: u128,
}

/// Writes rows under the frozen header, flushing after every row so partial
/// runs still leave consistent files.
pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, r: &Row<'_>) -> io::Result<()> {
        let loss = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id, r.model, r.mode, r.t, r.iter, loss, r.test_error, r.seed, r.wall_ms
        )?;
        self.out.flush()
    }
}
