//! Run manifests and content hashes of inputs.
//!
//! A file hashes like a git blob (`blob <len>\0<bytes>`), a directory like a
//! tree of its sorted entries; both use SHA-256.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Content hash of a file or directory tree. `manifest.json` files are skipped
/// so a dataset's own manifest does not feed back into its hash.
pub fn content_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        bail!("path does not exist: {}", path.display());
    }
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries: Vec<_> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut tree = String::new();
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE {
            continue;
        }
        tree.push_str(&format!("{} {name}\n", content_hash(&e.path())?));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", tree.len()).as_bytes());
    h.update(tree.as_bytes());
    Ok(hex(&h.finalize()))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub seed: u64,
    pub config: Value,
    /// Input name to content hash.
    pub inputs: Vec<(String, String)>,
    pub artifacts: Vec<String>,
    /// Extra command-specific fields.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, config: Value) -> Self {
        Manifest {
            command,
            seed,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.push((name.to_string(), content_hash(path)?));
        Ok(())
    }

    pub fn extra(&mut self, key: &str, value: impl Into<Value>) {
        self.extra.insert(key.to_string(), value.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
