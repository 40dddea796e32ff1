//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Deserialize;
use toolwatch::provenance::{sha256_hex, Provenance};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub risk: RiskSettings,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub rows: Option<PathBuf>,
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub sae: Vec<PathBuf>,
    pub features: Option<PathBuf>,
    pub tool_need_model: Option<PathBuf>,
    pub tool_risk_model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub preset: Option<String>,
    pub n_select: Option<usize>,
    pub test_fraction: Option<f64>,
    pub decision_threshold: Option<f64>,
    pub uncertainty_band: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSettings {
    pub scheme: Option<PathBuf>,
}

/// Loaded configuration plus the digest recorded in provenance blocks.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let (config, config_sha256) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (config, Some(sha256_hex(text.as_bytes())))
            }
            None => (RunConfig::default(), None),
        };
        let seed = seed.or(config.seed).unwrap_or(0);
        Ok(Self {
            config,
            config_sha256,
            seed,
            out,
        })
    }

    pub fn provenance(&self, inputs: &[&Path]) -> Result<Provenance> {
        let mut p = Provenance::new(Some(self.seed));
        for path in inputs {
            p = p
                .with_file(path)
                .with_context(|| format!("hashing {}", path.display()))?;
        }
        p.config_sha256 = self.config_sha256.clone();
        Ok(p)
    }

    pub fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

/// Flag value, else config value, else an error naming both.
pub fn pick<T: Clone>(flag: Option<T>, config: Option<&T>, what: &str) -> Result<T> {
    flag.or_else(|| config.cloned())
        .with_context(|| format!("missing {what}: pass the flag or set it in the config file"))
}

pub fn provenance_sidecar(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

pub fn write_sidecar(artifact: &Path, provenance: &Provenance) -> Result<()> {
    let path = provenance_sidecar(artifact);
    std::fs::write(&path, serde_json::to_string_pretty(provenance)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
