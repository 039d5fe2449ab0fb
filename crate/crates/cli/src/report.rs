//! CSV tables and key/value reports.

use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::fsio;

/// A CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = line.iter().map(|c| field(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::atomic_write(path, self.render().as_bytes())
    }
}

/// Fixed-precision float cell; stable across runs and platforms.
pub fn num(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| CliError::data(format!("cannot render report: {e}")))
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fsio::atomic_write(path, to_toml(value)?.as_bytes())
}
