use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::Result;

/// Line-delimited JSON training log. Records are also kept in memory.
#[derive(Debug, Default)]
pub struct Logger {
    file: Option<BufWriter<File>>,
    dir: Option<PathBuf>,
    records: Vec<Value>,
}

impl Logger {
    /// Keeps records in memory only.
    pub fn memory() -> Self {
        Logger::default()
    }

    /// Appends records to `path`, creating parent directories.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Logger {
            file: Some(BufWriter::new(File::create(path)?)),
            dir: path.parent().map(Path::to_path_buf),
            records: Vec::new(),
        })
    }

    /// Directory holding the log file, if any.
    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn write(&mut self, record: Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

impl Drop for Logger {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
