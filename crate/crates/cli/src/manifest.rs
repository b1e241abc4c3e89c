//! `manifest.json`: command, flags, seed, input and artifact hashes. No
//! timestamps or absolute output paths, so reruns with the same flags produce
//! the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub flags: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("cannot list {}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `dir` (recursively), keyed by `/`-separated relative path.
pub fn hash_tree(dir: &Path, skip: &[&str]) -> CliResult<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("walked under dir");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if skip.contains(&key.as_str()) {
            continue;
        }
        out.insert(key, hash_file(&f)?);
    }
    Ok(out)
}

/// Hash of a file, or of every file in a directory keyed `dir/name`.
pub fn hash_input(path: &Path, into: &mut BTreeMap<String, String>) -> CliResult<()> {
    let name = path.display().to_string();
    if path.is_dir() {
        for (k, v) in hash_tree(path, &[])? {
            into.insert(format!("{name}/{k}"), v);
        }
    } else {
        into.insert(name, hash_file(path)?);
    }
    Ok(())
}

impl Manifest {
    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        let path = out_dir.join(MANIFEST_NAME);
        fs::write(&path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
    }
}
