//! Provenance written next to every artifact.

use std::path::{Path, PathBuf};

use apa_core::data::{payload_path, save_json};
use apa_core::rng::RNG_ALGORITHM;
use apa_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Settings;

pub const TOOL: &str = "apa";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub rng_algorithm: &'static str,
    pub config: Settings,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Headers of volumes and atlases bring their raw payload along.
fn with_payload(path: &Path) -> Vec<PathBuf> {
    let name = path.to_string_lossy();
    if name.ends_with(".vol.json") || name.ends_with(".atlas.json") {
        vec![path.to_path_buf(), payload_path(path)]
    } else {
        vec![path.to_path_buf()]
    }
}

impl Manifest {
    pub fn new(command: &str, settings: &Settings) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            seed: settings.seed,
            rng_algorithm: RNG_ALGORITHM,
            config: settings.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        for p in with_payload(path) {
            self.inputs.push(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(&p)?,
            });
        }
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// `<artifact>.manifest.json`
    pub fn sidecar(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write_for(&self, artifact: &Path) -> Result<()> {
        save_json(&Self::sidecar(artifact), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_inputs_hash_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("a.vol.json");
        std::fs::write(&header, "{}").unwrap();
        std::fs::write(payload_path(&header), b"abc").unwrap();
        let mut m = Manifest::new("test", &Settings::default());
        m.input(&header).unwrap();
        assert_eq!(m.inputs.len(), 2);
        // sha256("abc")
        assert_eq!(m.inputs[1].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(matches!(m.input(&dir.path().join("missing.tsv")), Err(Error::NotFound(_))));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(Manifest::sidecar(Path::new("out/tau.json")), Path::new("out/tau.json.manifest.json"));
    }
}
