use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{check_version, write_atomic};
use crate::surrogate::FtDklModel;

pub const CHECKPOINT_FORMAT: &str = "ftdkl-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1.0";
const CHECKPOINT_MAJOR: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    version: String,
    model: M,
}

pub fn checkpoint_bytes(model: &FtDklModel) -> Result<Vec<u8>> {
    let env = Envelope {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION.into(),
        model,
    };
    Ok(serde_json::to_vec(&env)?)
}

/// Writes the model as versioned JSON; the file appears atomically.
pub fn save_checkpoint(model: &FtDklModel, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<FtDklModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let header: Envelope<serde::de::IgnoredAny> = serde_json::from_slice(&bytes)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("{}: not a model checkpoint", path.display())));
    }
    check_version(&header.version, CHECKPOINT_MAJOR)?;
    let env: Envelope<FtDklModel> = serde_json::from_slice(&bytes)?;
    Ok(env.model)
}
