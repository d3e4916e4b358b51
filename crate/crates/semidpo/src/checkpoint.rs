//! Binary checkpoints of denoiser parameters.
//!
//! Layout, all integers little-endian:
//!
//! | offset     | size         | content                                 |
//! |------------|--------------|-----------------------------------------|
//! | 0          | 8            | magic `SDPOCKPT`                        |
//! | 8          | 4            | format version (`u32`, currently 1)     |
//! | 12         | 4            | header length `h` in bytes (`u32`)      |
//! | 16         | `h`          | UTF-8 JSON [`CheckpointHeader`]         |
//! | 16 + `h`   | `8·n_params` | θ as `f64` little-endian                |

use std::path::Path;

use serde::{Deserialize, Serialize};

use semidpo_core::model::{Arch, DenoiserParams};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"SDPOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub n_params: usize,
    pub seed: u64,
    /// Free-form role, e.g. `reference` or `iter1`.
    pub label: String,
    pub tool: String,
    pub config_hash: String,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &DenoiserParams) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.theta() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, DenoiserParams), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != CHECKPOINT_VERSION {
        return Err(format!("checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"));
    }
    let h = word(12) as usize;
    let body = bytes.get(16..16 + h).ok_or("truncated header")?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| format!("header: {e}"))?;
    if header.n_params != header.arch.param_count() {
        return Err(format!(
            "header declares {} parameters, the architecture has {}",
            header.n_params,
            header.arch.param_count()
        ));
    }
    let data = &bytes[16 + h..];
    if data.len() != 8 * header.n_params {
        return Err(format!("expected {} parameter bytes, found {}", 8 * header.n_params, data.len()));
    }
    let theta: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err("non-finite parameter".into());
    }
    let params = DenoiserParams::new(header.arch.clone(), theta).map_err(|e| e.to_string())?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &DenoiserParams) -> CliResult<()> {
    std::fs::write(path, encode_checkpoint(header, params)).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> CliResult<(CheckpointHeader, DenoiserParams)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| CliError::format(path, e))
}
