//! Deterministic CSV output. Floats use 17 significant digits so a value
//! survives a text round trip; metadata goes in leading `# key=value` lines.

use std::path::{Path, PathBuf};

use super::HarnessError;

/// Formats a float with 17 significant digits. NaN is written as `nan`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    /// File stem; the file is written as `<name>.csv`.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub meta: Vec<(String, String)>,
}

impl CsvReport {
    pub fn new(name: &str, header: &[&str]) -> Self {
        CsvReport { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new(), meta: Vec::new() }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width does not match header of {}", self.name);
        self.rows.push(row);
    }

    /// Index of a header column.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join(format!("{}.csv", self.name));
        std::fs::write(&path, self.render()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Reads back the data rows of a rendered report, skipping metadata.
pub fn parse_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}
