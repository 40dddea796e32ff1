//! Provenance blocks embedded in every emitted artifact.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub producer: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub inputs: Vec<InputDigest>,
    #[serde(default)]
    pub config_sha256: Option<String>,
}

impl Provenance {
    pub fn new(seed: Option<u64>) -> Self {
        Self {
            producer: concat!("toolwatch ", env!("CARGO_PKG_VERSION")).to_string(),
            seed,
            inputs: Vec::new(),
            config_sha256: None,
        }
    }

    pub fn with_input(mut self, name: impl Into<String>, sha256: String) -> Self {
        self.inputs.push(InputDigest {
            name: name.into(),
            sha256,
        });
        self
    }

    pub fn with_file(self, path: &Path) -> std::io::Result<Self> {
        let digest = sha256_file(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(self.with_input(name, digest))
    }

    pub fn with_config(mut self, config_bytes: &[u8]) -> Self {
        self.config_sha256 = Some(sha256_hex(config_bytes));
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
