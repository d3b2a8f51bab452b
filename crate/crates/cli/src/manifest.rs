use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".evsdf.lock";

/// Provenance record written into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Value,
    /// Digest of command, seed and config.
    pub hash: String,
    /// Digest of the dataset files, once known.
    pub dataset_hash: Option<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(config.to_string().as_bytes());
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            hash: hex(&h.finalize()),
            dataset_hash: None,
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(now());
    }

    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the named files in order, each prefixed by its name.
pub fn hash_files(dir: &Path, names: &[&str]) -> Result<String, Failure> {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for name in names {
        let path = dir.join(name);
        buf.clear();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        h.update(name.as_bytes());
        h.update((buf.len() as u64).to_le_bytes());
        h.update(&buf);
    }
    Ok(hex(&h.finalize()))
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Failure::runtime(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Failure::runtime(format!("{}: {e}", path.display()))
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
