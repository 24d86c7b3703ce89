//! Row tables and their CSV / JSON-lines encodings.

use std::io::Write;
use std::path::Path;

use crate::config::Format;
use crate::CliError;

/// Bumped whenever a column is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        let mut c = vec!["schema_version".to_string()];
        c.extend(columns.iter().map(|s| s.to_string()));
        Table { columns: c, rows: Vec::new() }
    }

    pub fn push(&mut self, values: Vec<String>) {
        let mut row = vec![SCHEMA_VERSION.to_string()];
        row.extend(values);
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn encode(&self, format: Format) -> Result<Vec<u8>, CliError> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.columns).map_err(io_err)?;
                for r in &self.rows {
                    w.write_record(r).map_err(io_err)?;
                }
                w.into_inner().map_err(|e| CliError::Io(e.to_string()))
            }
            Format::Jsonl => {
                let mut out = Vec::new();
                for r in &self.rows {
                    let obj: serde_json::Map<String, serde_json::Value> = self
                        .columns
                        .iter()
                        .zip(r)
                        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                        .collect();
                    serde_json::to_writer(&mut out, &obj).map_err(|e| CliError::Io(e.to_string()))?;
                    out.push(b'\n');
                }
                Ok(out)
            }
        }
    }

    /// Writes to `path`, replacing any previous file, or to stdout.
    pub fn write(&self, format: Format, path: Option<&Path>) -> Result<(), CliError> {
        let bytes = self.encode(format)?;
        match path {
            Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
            None => std::io::stdout().lock().write_all(&bytes).map_err(|e| CliError::Io(e.to_string())),
        }
    }
}

fn io_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}
