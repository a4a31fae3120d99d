//! Append-only CSV tables.

use std::fs::{File, OpenOptions};
use std::path::Path;

use csv::Writer;

pub const METRICS_HEADER: [&str; 4] = ["step", "name", "value", "walltime"];
pub const REPORT_HEADER: [&str; 5] = ["protocol", "granularity", "k", "metric", "value"];

pub struct Table {
    writer: Writer<File>,
}

impl Table {
    /// Create `path` with `header`, or append to it when `append` is set and
    /// the file exists.
    pub fn open(path: &Path, header: &[&str], append: bool) -> csv::Result<Self> {
        let existing = append && path.exists();
        let file = if existing {
            OpenOptions::new().append(true).open(path)?
        } else {
            File::create(path)?
        };
        let mut writer = Writer::from_writer(file);
        if !existing {
            writer.write_record(header)?;
        }
        Ok(Table { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> csv::Result<()> {
        self.writer.write_record(fields)
    }

    pub fn finish(mut self) -> csv::Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Fixed-precision number formatting, so identical runs give identical bytes.
pub fn num(v: f64) -> String {
    format!("{v:.6e}")
}
