//! Line-delimited JSON dataset files.
//!
//! Line 1 is a [`DatasetHeader`]; every following line is one
//! [`PreferencePair`] object. Floats are written in shortest round-trip
//! form, so a load returns bit-identical values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use semidpo_core::dpo::PreferencePair;

use crate::error::{CliError, CliResult};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d: usize,
    pub d_c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub tool: String,
    pub config_hash: String,
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, pairs: &[PreferencePair]) -> CliResult<()> {
    let io = |e| CliError::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(json_line(header).as_bytes()).map_err(io)?;
    for p in pairs {
        w.write_all(json_line(p).as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn check_pair(header: &DatasetHeader, p: &PreferencePair) -> Result<(), String> {
    let dims = [
        ("c", p.c.len(), header.d_c),
        ("x0_w", p.x0_w.len(), header.d),
        ("x0_l", p.x0_l.len(), header.d),
    ];
    for (name, got, want) in dims {
        if got != want {
            return Err(format!("{name} has {got} entries, header says {want}"));
        }
    }
    if let Some(d) = &p.delta_r {
        if d.len() != header.k {
            return Err(format!("delta_r has {} entries, header says K = {}", d.len(), header.k));
        }
    }
    p.validate().map_err(|e| e.to_string())
}

pub fn load_dataset(path: &Path) -> CliResult<(DatasetHeader, Vec<PreferencePair>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::format(path, "empty file, expected a header line"))?
        .map_err(|e| CliError::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| CliError::format(path, format!("header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(CliError::format(
            path,
            format!("dataset version {} (this build reads {DATASET_VERSION})", header.version),
        ));
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line)
            .map_err(|e| CliError::format(path, format!("record {i}: {e}")))?;
        check_pair(&header, &pair).map_err(|e| CliError::format(path, format!("record {i}: {e}")))?;
        pairs.push(pair);
    }
    Ok((header, pairs))
}
