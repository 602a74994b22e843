//! Merge training logs into a long-format CSV for external plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use probtrans::config::RunConfig;
use probtrans::trainer::LOG_HEADER;

pub const REPORT_HEADER: &str = "run,seed,epoch,series,value";

/// One training log: a run label, its seed and the raw CSV text.
pub struct LogSource {
    pub run: String,
    pub seed: u64,
    pub text: String,
}

impl LogSource {
    /// Read `path`, either a run directory holding `log.csv` and
    /// `config.json` or a bare log file (seed 0 unless a sibling config exists).
    pub fn read(path: &Path) -> Result<Self> {
        let (log, dir) = if path.is_dir() {
            (path.join("log.csv"), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")))
        };
        let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
        let cfg_path = dir.join("config.json");
        let seed = if cfg_path.is_file() {
            RunConfig::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?.train.seed
        } else {
            0
        };
        let run = if path.is_dir() { path } else { dir.as_path() }
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Ok(Self { run, seed, text })
    }
}

/// Long-format rows `run,seed,epoch,series,value`, one per logged value.
pub fn merge(sources: &[LogSource]) -> Result<String> {
    if sources.is_empty() {
        bail!("no training logs given");
    }
    let series: Vec<&str> = LOG_HEADER.split(',').skip(1).collect();
    let mut out = format!("{REPORT_HEADER}\n");
    for src in sources {
        let mut lines = src.text.lines();
        let header = lines.next().unwrap_or_default();
        if header != LOG_HEADER {
            bail!("log of run {} has columns {header:?}, expected {LOG_HEADER:?}", src.run);
        }
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != series.len() + 1 {
                bail!("log of run {} line {}: expected {} columns, found {}", src.run, i + 2, series.len() + 1, cells.len());
            }
            for (name, value) in series.iter().zip(&cells[1..]) {
                let _ = writeln!(out, "{},{},{},{name},{value}", src.run, src.seed, cells[0]);
            }
        }
    }
    Ok(out)
}
