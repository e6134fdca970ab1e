//! CSV and JSON output helpers shared by every subcommand.
//!
//! Every CSV starts with a `#` comment line carrying the wall-clock stamp;
//! `#` lines are metadata and regression comparisons strip them, so the
//! remaining body is byte-identical across reruns with the same config and
//! seed. Floats are printed with 17 significant digits so they round-trip
//! exactly through `f64`.

use df_lab::Result;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Full-precision cell formatting used for every float in a CSV.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// A line-oriented CSV writer with a timestamp comment up front.
pub struct CsvOut {
    w: BufWriter<File>,
}

impl CsvOut {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(w, "# generated at unix {now}")?;
        Ok(Self { w })
    }

    pub fn header(&mut self, cols: &[&str]) -> Result<()> {
        writeln!(self.w, "{}", cols.join(","))?;
        Ok(())
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.w, "{}", cells.join(","))?;
        Ok(())
    }

    /// A `#`-prefixed metadata line (timings and the like), excluded from
    /// byte-identity comparisons.
    pub fn comment(&mut self, text: &str) -> Result<()> {
        writeln!(self.w, "# {text}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Sidecar summary path: the primary output path with `.json` appended.
pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the run's JSON summary (resolved config echo plus per-command
/// results) next to the primary output.
pub fn write_summary(out: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(summary_path(out))?);
    writeln!(
        w,
        "{}",
        serde_json::to_string_pretty(value).expect("summary value serializes")
    )?;
    w.flush()?;
    Ok(())
}

/// Milliseconds elapsed since `start`, for timing metadata.
pub fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
