use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sintermon::checksum::sha256_hex;
use sintermon::{Error, Result};

use crate::config::ExperimentConfig;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record written by every stage next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// Paths relative to the run directory mapped to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn load(stage_dir: &Path) -> Result<Self> {
        let path = stage_dir.join(RUN_MANIFEST);
        let bytes = read(&path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, stage_dir: &Path) -> Result<()> {
        let path = stage_dir.join(RUN_MANIFEST);
        write(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Checksums of every regular file in `dir` except the run manifest, keyed
/// by path relative to `root`.
pub fn dir_checksums(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_MANIFEST))
        .collect();
    files.sort();
    for f in files {
        out.insert(relative(root, &f), file_sha(&f)?);
    }
    Ok(out)
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Fails unless every recorded input checksum still matches the file on disk.
pub fn verify_recorded(root: &Path, recorded: &BTreeMap<String, String>) -> Result<()> {
    for (rel, sha) in recorded {
        let path = root.join(rel);
        if file_sha(&path)? != *sha {
            return Err(Error::Checksum(path));
        }
    }
    Ok(())
}

/// Makes `dir` an empty directory, refusing to clobber existing content
/// unless `overwrite` is set.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied {
            if !overwrite {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
