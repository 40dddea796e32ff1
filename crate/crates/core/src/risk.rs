//! Keyword-based risk tiers for tool actions.
//!
//! A [`RiskScheme`] maps a tool name to one of three tiers. Low is the
//! default and covers read-only retrieval; medium covers bounded writes;
//! high covers authentication, outbound messaging and arbitrary execution.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DecisionRow;

const SEEDED_SCHEME: &str = include_str!("../config/risk_scheme.toml");

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("tool name is empty")]
    EmptyName,
    #[error("keyword {0:?} appears in both the high and medium groups")]
    OverlappingKeyword(String),
    #[error("empty keyword in the {0} group")]
    EmptyKeyword(&'static str),
    #[error("unknown risk tier {0:?}")]
    UnknownTier(String),
    #[error("invalid scheme file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Consequence tier of the next tool action. Ordered low < medium < high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskTier {
    Low,
    Medium,
    High,
}

impl RiskTier {
    pub const ALL: [RiskTier; 3] = [RiskTier::Low, RiskTier::Medium, RiskTier::High];

    /// Class index used by the ternary probe (low = 0, medium = 1, high = 2).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskTier::Low => "low",
            RiskTier::Medium => "medium",
            RiskTier::High => "high",
        }
    }
}

impl fmt::Display for RiskTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskTier {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(RiskTier::Low),
            "medium" | "med" => Ok(RiskTier::Medium),
            "high" => Ok(RiskTier::High),
            other => Err(RiskError::UnknownTier(other.to_string())),
        }
    }
}

#[derive(Debug, Deserialize)]
struct SchemeFile {
    #[serde(default = "default_low")]
    default_tier: RiskTier,
    #[serde(default)]
    high: Vec<String>,
    #[serde(default)]
    medium: Vec<String>,
}

fn default_low() -> RiskTier {
    RiskTier::Low
}

/// Immutable keyword scheme. Keywords are stored lowercased.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RiskScheme {
    high_keywords: BTreeSet<String>,
    medium_keywords: BTreeSet<String>,
    default_tier: RiskTier,
}

impl RiskScheme {
    pub fn new<I, J, S, T>(high: I, medium: J, default_tier: RiskTier) -> Result<Self, RiskError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let high_keywords = normalize_group(high, "high")?;
        let medium_keywords = normalize_group(medium, "medium")?;
        if let Some(dup) = high_keywords.intersection(&medium_keywords).next() {
            return Err(RiskError::OverlappingKeyword(dup.clone()));
        }
        Ok(Self {
            high_keywords,
            medium_keywords,
            default_tier,
        })
    }

    /// The scheme shipped with the crate (`config/risk_scheme.toml`).
    pub fn seeded() -> Self {
        Self::from_toml(SEEDED_SCHEME).expect("bundled risk scheme is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, RiskError> {
        let file: SchemeFile = toml::from_str(text).map_err(|e| RiskError::Parse(e.to_string()))?;
        Self::new(file.high, file.medium, file.default_tier)
    }

    pub fn load(path: &Path) -> Result<Self, RiskError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn high_keywords(&self) -> impl Iterator<Item = &str> {
        self.high_keywords.iter().map(String::as_str)
    }

    pub fn medium_keywords(&self) -> impl Iterator<Item = &str> {
        self.medium_keywords.iter().map(String::as_str)
    }

    pub fn default_tier(&self) -> RiskTier {
        self.default_tier
    }

    /// Classify a tool name: exact match first, then substring, high before medium.
    pub fn classify(&self, name: &str) -> Result<RiskTier, RiskError> {
        let name = name.trim().to_lowercase();
        if name.is_empty() {
            return Err(RiskError::EmptyName);
        }
        if self.high_keywords.contains(&name) {
            return Ok(RiskTier::High);
        }
        if self.medium_keywords.contains(&name) {
            return Ok(RiskTier::Medium);
        }
        if self.high_keywords.iter().any(|k| name.contains(k.as_str())) {
            return Ok(RiskTier::High);
        }
        if self.medium_keywords.iter().any(|k| name.contains(k.as_str())) {
            return Ok(RiskTier::Medium);
        }
        Ok(self.default_tier)
    }
}

fn normalize_group<I, S>(words: I, group: &'static str) -> Result<BTreeSet<String>, RiskError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    words
        .into_iter()
        .map(|w| {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() {
                Err(RiskError::EmptyKeyword(group))
            } else {
                Ok(w)
            }
        })
        .collect()
}

pub fn classify_tool(name: &str, scheme: &RiskScheme) -> Result<RiskTier, RiskError> {
    scheme.classify(name)
}

/// Counts of labeled rows per tier, plus rows that need no tool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierDistribution {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
    pub no_tool: usize,
}

impl TierDistribution {
    fn record(&mut self, tier: Option<RiskTier>) {
        match tier {
            Some(RiskTier::Low) => self.low += 1,
            Some(RiskTier::Medium) => self.medium += 1,
            Some(RiskTier::High) => self.high += 1,
            None => self.no_tool += 1,
        }
    }
}

/// Attach a risk tier to every tool row; clear it on no-tool rows.
///
/// Tool rows without an expected tool name get the scheme's default tier.
pub fn label_rows(mut rows: Vec<DecisionRow>, scheme: &RiskScheme) -> (Vec<DecisionRow>, TierDistribution) {
    let mut dist = TierDistribution::default();
    for row in &mut rows {
        row.risk_tier = if row.tool_needed {
            let tier = row
                .expected_tool
                .as_deref()
                .and_then(|name| scheme.classify(name).ok())
                .unwrap_or(scheme.default_tier);
            Some(tier)
        } else {
            None
        };
        dist.record(row.risk_tier);
    }
    (rows, dist)
}
