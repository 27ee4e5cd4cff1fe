//! Dataset directories, content hashes and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use refdiff_core::io::{decode_ngv, encode_ngv};
use refdiff_core::CaseRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(CliError::io(path))?))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Write each case as `<subject_id>.ngv` and return the hash of the set.
pub fn save_dataset(dir: &Path, cases: &[CaseRecord]) -> Result<String> {
    create_dir(dir)?;
    let mut digest = Sha256::new();
    for case in cases {
        let bytes = encode_ngv(case);
        digest.update(&bytes);
        write_file(&dir.join(format!("{}.ngv", case.subject_id)), &bytes)?;
    }
    Ok(digest.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Load every `.ngv` file in `dir`, ordered by file name, with the hash of
/// the set.
pub fn load_dataset(dir: &Path) -> Result<(Vec<CaseRecord>, String)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ngv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no .ngv files in {}", dir.display())));
    }
    let mut digest = Sha256::new();
    let mut cases = Vec::with_capacity(paths.len());
    for p in &paths {
        let bytes = std::fs::read(p).map_err(CliError::io(p))?;
        digest.update(&bytes);
        cases.push(decode_ngv(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?);
    }
    Ok((cases, digest.finalize().iter().map(|b| format!("{b:02x}")).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// What a run consumed and produced, so a rerun can be checked by hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn record(&mut self, stage: &str, path: &Path) -> Result<String> {
        let sha256 = hash_file(path)?;
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(Artifact {
            stage: stage.to_string(),
            path: path.to_path_buf(),
            sha256: sha256.clone(),
        });
        Ok(sha256)
    }

    pub fn artifact(&self, path: &Path) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("manifest serialises").as_bytes())
    }
}
