//! Pair discovery by file name: `input_<id>.{png,ppm}` with
//! `target_<id>.{png,ppm}` and an optional `raw_<id>.pfm`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use iat_core::image_io::{is_supported_image, load_image, load_pfm};
use iat_core::isp::LinearImage;
use iat_core::training::Sample;
use iat_core::Error;

use crate::error::{usage, CliError};

#[derive(Debug, Clone)]
pub struct PairFiles {
    pub id: String,
    pub input: PathBuf,
    pub target: PathBuf,
    pub raw: Option<PathBuf>,
}

pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn split(path: &Path) -> Option<(&str, &str)> {
    let name = path.file_stem()?.to_str()?;
    let (kind, id) = name.split_once('_')?;
    Some((kind, id))
}

/// Matched pairs sorted by id. Unmatched inputs or targets are reported on
/// stderr and skipped.
pub fn discover(dir: &Path) -> Result<Vec<PairFiles>, CliError> {
    let mut inputs = BTreeMap::new();
    let mut targets = BTreeMap::new();
    let mut raws = BTreeMap::new();
    for path in list_dir(dir)? {
        let Some((kind, id)) = split(&path) else { continue };
        let id = id.to_string();
        match kind {
            "input" if is_supported_image(&path) => {
                inputs.insert(id, path);
            }
            "target" if is_supported_image(&path) => {
                targets.insert(id, path);
            }
            "raw" if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) => {
                raws.insert(id, path);
            }
            _ => {}
        }
    }
    let mut pairs = Vec::new();
    for (id, input) in inputs {
        match targets.remove(&id) {
            Some(target) => pairs.push(PairFiles {
                raw: raws.remove(&id),
                id,
                input,
                target,
            }),
            None => eprintln!("warning: {} has no matching target, skipped", input.display()),
        }
    }
    for target in targets.values() {
        eprintln!("warning: {} has no matching input, skipped", target.display());
    }
    Ok(pairs)
}

/// Loads every pair; `need_raw` makes a missing pseudo-raw a usage error
/// that names the expected files.
pub fn load_samples(dir: &Path, need_raw: bool) -> Result<Vec<Sample>, CliError> {
    let pairs = discover(dir)?;
    if pairs.is_empty() {
        return Err(usage(format!("{}: no input_*/target_* pairs found", dir.display())));
    }
    if need_raw {
        let missing: Vec<String> = pairs
            .iter()
            .filter(|p| p.raw.is_none())
            .map(|p| dir.join(format!("raw_{}.pfm", p.id)).display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(usage(format!("loss mixed_raw needs pseudo-raw files; missing: {}", missing.join(", "))));
        }
    }
    pairs
        .iter()
        .map(|p| {
            let raw = match &p.raw {
                Some(path) => {
                    let (h, w, data) = load_pfm(path)?;
                    Some(LinearImage::new(h, w, data)?)
                }
                None => None,
            };
            Ok(Sample::new(load_image(&p.input)?, load_image(&p.target)?, raw)?)
        })
        .collect()
}
