//! Plain numeric CSV tables.
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! table read back with [`read_table`] reproduces the written arrays exactly.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

/// A CSV table with a header row and numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_table(path, self)
    }
}

pub fn write_table(path: impl AsRef<Path>, table: &Table) -> Result<()> {
    let file = File::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(&table.headers)?;
    for row in &table.rows {
        if row.len() != table.headers.len() {
            return Err(Error::ShapeMismatch(format!(
                "row has {} fields, header has {}",
                row.len(),
                table.headers.len()
            )));
        }
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.iter().map(str::to_owned).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { headers, rows })
}
