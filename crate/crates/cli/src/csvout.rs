//! Plain CSV emission. Floats use Rust's shortest round-trip formatting, so
//! identical runs produce byte-identical files.

use anyhow::{Context, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct CsvFile {
    path: PathBuf,
    buf: Vec<u8>,
}

impl CsvFile {
    pub fn create(dir: &Path, name: &str, header: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let mut buf = Vec::new();
        writeln!(buf, "{header}").expect("in-memory write");
        Ok(Self { path: dir.join(name), buf })
    }

    pub fn row(&mut self, fields: &[String]) {
        writeln!(self.buf, "{}", fields.join(",")).expect("in-memory write");
    }

    pub fn finish(self) -> Result<PathBuf> {
        std::fs::write(&self.path, &self.buf)
            .with_context(|| format!("writing {}", self.path.display()))?;
        Ok(self.path)
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
