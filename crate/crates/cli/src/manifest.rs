//! Stage manifests. Each records the hashes of a stage's inputs and outputs
//! and chains them with the stage's configuration, so a stage is reused only
//! while nothing upstream of it has changed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use couplings::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
    /// Hash of the stage name, config hash and every input hash.
    pub chain: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a serialisable value through its JSON form.
pub fn hash_value<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serialisable").as_bytes())
}

fn chain(stage: &str, config_hash: &str, inputs: &[FileHash]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(config_hash.as_bytes());
    for i in inputs {
        h.update(i.path.as_bytes());
        h.update(i.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.manifest.json"))
}

fn hashes(dir: &Path, files: &[&str]) -> Result<Vec<FileHash>> {
    files
        .iter()
        .map(|f| {
            let p = dir.join(f);
            if !p.exists() {
                return Err(Error::MissingArtifact { path: p.display().to_string(), detail: "file not found".into() });
            }
            Ok(FileHash { path: f.to_string(), sha256: hash_file(&p)? })
        })
        .collect()
}

/// True when the stage's manifest matches the current configuration,
/// inputs and outputs.
pub fn is_fresh(dir: &Path, stage: &str, config_hash: &str, inputs: &[&str]) -> bool {
    let Ok(text) = fs::read_to_string(manifest_path(dir, stage)) else { return false };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else { return false };
    if m.version != MANIFEST_VERSION || m.config_hash != config_hash {
        return false;
    }
    let Ok(now) = hashes(dir, inputs) else { return false };
    if now != m.inputs || m.chain != chain(stage, config_hash, &now) {
        return false;
    }
    m.outputs.iter().all(|o| hash_file(&dir.join(&o.path)).is_ok_and(|h| h == o.sha256))
}

pub fn write(dir: &Path, stage: &str, config_hash: &str, seed: u64, inputs: &[&str], outputs: &[&str], wall_time_s: f64) -> Result<Manifest> {
    let inputs = hashes(dir, inputs)?;
    let m = Manifest {
        version: MANIFEST_VERSION,
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        chain: chain(stage, config_hash, &inputs),
        inputs,
        outputs: hashes(dir, outputs)?,
        wall_time_s,
    };
    fs::write(manifest_path(dir, stage), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freshness_follows_inputs_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("in.txt"), "a").unwrap();
        fs::write(d.join("out.txt"), "b").unwrap();
        write(d, "s", "cfg", 1, &["in.txt"], &["out.txt"], 0.0).unwrap();
        assert!(is_fresh(d, "s", "cfg", &["in.txt"]));
        assert!(!is_fresh(d, "s", "other", &["in.txt"]));
        fs::write(d.join("in.txt"), "changed").unwrap();
        assert!(!is_fresh(d, "s", "cfg", &["in.txt"]));
        fs::write(d.join("in.txt"), "a").unwrap();
        fs::write(d.join("out.txt"), "tampered").unwrap();
        assert!(!is_fresh(d, "s", "cfg", &["in.txt"]));
    }
}
