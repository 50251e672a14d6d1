pub mod enhance;
pub mod eval;
pub mod info;
pub mod init;
pub mod synthesize;
pub mod train;

use std::fs;
use std::path::Path;

use iat_core::model::IatConfig;
use iat_core::training::TrainConfig;
use iat_core::Error;

use crate::error::{usage, CliError};

pub fn read_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn override_model(model: &mut IatConfig, channels: Option<usize>, blocks: Option<usize>, dim: Option<usize>) {
    if let Some(c) = channels {
        model.channels = c;
    }
    if let Some(b) = blocks {
        model.blocks = b;
    }
    if let Some(d) = dim {
        model.dim = d;
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
