use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Line-delimited JSON sink. Each record is written and flushed as one line;
/// nothing already written is ever rewritten.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Starts a fresh file at `path`.
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize + ?Sized>(&mut self, record: &T) -> CliResult<()> {
        let io = |e| CliError::io(&self.path, e);
        serde_json::to_writer(&mut self.out, record).map_err(|e| CliError::io(&self.path, e.into()))?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
