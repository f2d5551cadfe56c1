use std::fmt;
use std::path::Path;

use crate::CliError;

/// In-memory CSV written in one go.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { text: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<(), CliError> {
        std::fs::write(dir.join(name), &self.text).map_err(|e| io_error(dir, e))
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// `manifest.txt`: the command and its resolved configuration, loadable
/// again with `--config`.
pub fn write_manifest(dir: &Path, command: &str, resolved: &[(String, String)], outputs: &[&str]) -> Result<(), CliError> {
    let mut text = format!("# tailcast {command}\n# outputs: {}\n", outputs.join(" "));
    for (k, v) in resolved {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), text).map_err(|e| io_error(dir, e))
}

pub fn cell(x: impl fmt::Display) -> String {
    x.to_string()
}

pub fn opt_cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}
