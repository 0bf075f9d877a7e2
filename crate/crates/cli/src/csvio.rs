//! CSV artifacts. Every file opens with a comment carrying the config hash
//! and seed, and nothing is overwritten without `--force`.

use std::fmt::Write as _;
use std::path::Path;

use crate::AppError;

pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(header: &str, run_hash: u64, seed: u64) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "# config_hash={run_hash:016x} seed={seed}");
        let _ = writeln!(buf, "{header}");
        Self { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn comment(&mut self, text: &str) {
        let _ = writeln!(self.buf, "# {text}");
    }

    pub fn write(&self, path: &Path) -> Result<(), AppError> {
        std::fs::write(path, &self.buf)
            .map_err(|e| AppError::config(format!("cannot write {}: {e}", path.display())))
    }
}

/// Refuse to clobber an existing output unless forced.
pub fn guard_output(path: &Path, force: bool) -> Result<(), AppError> {
    if path.exists() && !force {
        return Err(AppError::config(format!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

pub fn format_f32(v: f32) -> String {
    // shortest exact round-trip keeps files byte-stable across runs
    format!("{v}")
}

pub fn format_rho(v: f64) -> String {
    format!("{v:.6}")
}
