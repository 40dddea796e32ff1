//! Tool-Need (binary) and Tool-Risk (ternary) linear probes over SAE features.
//!
//! Training selects the most class-separating features, standardizes them on
//! the training rows, and fits an L1/L2-regularized logistic (or softmax)
//! readout. The regularizer is chosen from a grid by log-loss on a stratified
//! held-out split, then the model is refit on all training rows.

pub mod metrics;
pub mod select;
pub mod solver;

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{FeatureSet, SegmentMap, SparseVec};
use crate::ingest::{DecisionRow, StepKey};
use crate::provenance::Provenance;
use crate::risk::RiskTier;

pub use metrics::{ClassMetrics, Metrics};
pub use select::{select_features, separation_scores};
pub use solver::{sigmoid, softmax, Design, FitResult, Objective, SolverOptions};

const PROBE_FORMAT: &str = "toolwatch-probe";
const PROBE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least two classes in the labels")]
    SingleClass,
    #[error("no feature has nonzero variance")]
    NoSeparatingFeature,
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature vector has length {found}, expected at least {expected}")]
    FeatureDimension { expected: usize, found: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("empty input")]
    Empty,
    #[error("model is a {found} probe, operation needs {expected}")]
    WrongKind { expected: ProbeKind, found: ProbeKind },
    #[error("no features for step {0}")]
    MissingFeatures(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    ToolNeed,
    ToolRisk,
}

impl ProbeKind {
    pub fn n_classes(self) -> usize {
        match self {
            ProbeKind::ToolNeed => 2,
            ProbeKind::ToolRisk => 3,
        }
    }
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeKind::ToolNeed => "tool_need",
            ProbeKind::ToolRisk => "tool_risk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub l1: f64,
    pub l2: f64,
}

impl RegConfig {
    pub fn ridge(l2: f64) -> Self {
        Self { l1: 0.0, l2 }
    }

    pub fn lasso(l1: f64) -> Self {
        Self { l1, l2: 0.0 }
    }

    pub fn elastic_net(strength: f64, l1_ratio: f64) -> Self {
        Self {
            l1: strength * l1_ratio,
            l2: strength * (1.0 - l1_ratio),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyFamily {
    Ridge,
    Lasso,
    ElasticNet,
    /// Ridge, lasso and elastic net together.
    Any,
}

/// Default grid strengths, in units of the mean per-row loss.
pub const DEFAULT_STRENGTHS: [f64; 3] = [1e-3, 1e-2, 1e-1];

pub fn reg_grid(family: PenaltyFamily) -> Vec<RegConfig> {
    let mut grid = Vec::new();
    for &s in &DEFAULT_STRENGTHS {
        if matches!(family, PenaltyFamily::Ridge | PenaltyFamily::Any) {
            grid.push(RegConfig::ridge(s));
        }
        if matches!(family, PenaltyFamily::Lasso | PenaltyFamily::Any) {
            grid.push(RegConfig::lasso(s));
        }
        if matches!(family, PenaltyFamily::ElasticNet | PenaltyFamily::Any) {
            grid.push(RegConfig::elastic_net(s, 0.5));
        }
    }
    grid
}

/// Feature-count and penalty presets for the two monitored backbones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbePreset {
    pub name: &'static str,
    pub kind: ProbeKind,
    pub n_select: usize,
    pub family: PenaltyFamily,
}

pub const PRESETS: [ProbePreset; 3] = [
    ProbePreset {
        name: "gpt-oss-tool-need",
        kind: ProbeKind::ToolNeed,
        n_select: 200,
        family: PenaltyFamily::Lasso,
    },
    ProbePreset {
        name: "gemma-tool-need",
        kind: ProbeKind::ToolNeed,
        n_select: 2000,
        family: PenaltyFamily::ElasticNet,
    },
    ProbePreset {
        name: "tool-risk",
        kind: ProbeKind::ToolRisk,
        n_select: 1000,
        family: PenaltyFamily::ElasticNet,
    },
];

pub fn preset(name: &str) -> Option<ProbePreset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ProbeKind,
    pub n_select: usize,
    pub grid: Vec<RegConfig>,
    pub seed: u64,
    /// Fraction of rows held out (per class) to choose the regularizer.
    pub validation_fraction: f64,
    pub class_weighting: ClassWeighting,
    pub decision_threshold: f64,
    pub uncertainty_band: f64,
    pub solver: SolverOptions,
}

impl TrainConfig {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            n_select: match kind {
                ProbeKind::ToolNeed => 200,
                ProbeKind::ToolRisk => 1000,
            },
            grid: reg_grid(PenaltyFamily::Any),
            seed: 0,
            validation_fraction: 0.2,
            class_weighting: ClassWeighting::None,
            decision_threshold: 0.5,
            uncertainty_band: 0.15,
            solver: SolverOptions::default(),
        }
    }

    pub fn from_preset(p: &ProbePreset) -> Self {
        Self {
            n_select: p.n_select,
            grid: reg_grid(p.family),
            ..Self::new(p.kind)
        }
    }
}

/// Per-feature `(μ, s)`; `s > 0` always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    fn fit(x: &Design) -> Self {
        let n = x.n as f64;
        let mut mean = vec![0.0; x.p];
        for i in 0..x.n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.p];
        for i in 0..x.n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &mut Design) {
        for i in 0..x.n {
            let row = &mut x.data[i * x.p..(i + 1) * x.p];
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    /// Held-out log-loss of every grid entry, in grid order.
    #[serde(default)]
    pub grid_log_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    /// Length of the concatenated feature vector the model was trained on.
    pub feature_dim: usize,
    pub selected: Vec<usize>,
    pub standardizer: Standardizer,
    /// One row for tool_need, three (low, medium, high) for tool_risk.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub reg: RegConfig,
    pub decision_threshold: f64,
    pub uncertainty_band: f64,
    #[serde(default)]
    pub segments: Option<SegmentMap>,
    pub diagnostics: FitDiagnostics,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

#[derive(Serialize)]
struct ProbeFileOut<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    model: &'a ProbeModel,
}

#[derive(Deserialize)]
struct ProbeFileIn {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: ProbeModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolDecision {
    Tool,
    NoTool,
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolNeedPrediction {
    pub p_tool: f64,
    pub decision: ToolDecision,
    /// Plain threshold decision, ignoring the uncertainty band.
    pub predicted_tool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    /// (p_low, p_medium, p_high)
    pub p: [f64; 3],
    pub tier: RiskTier,
}

impl ProbeModel {
    /// Hand-built model; mostly for fixtures and tests.
    pub fn from_parts(
        kind: ProbeKind,
        feature_dim: usize,
        selected: Vec<usize>,
        standardizer: Standardizer,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self, ProbeError> {
        let model = Self {
            kind,
            feature_dim,
            selected,
            standardizer,
            weights,
            bias,
            reg: RegConfig::ridge(0.0),
            decision_threshold: 0.5,
            uncertainty_band: 0.15,
            segments: None,
            diagnostics: FitDiagnostics {
                converged: true,
                iterations: 0,
                final_objective: 0.0,
                grid_log_loss: Vec::new(),
            },
            provenance: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::ModelFile(m.to_string()));
        let p = self.selected.len();
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return bad("selected indices must be unique and sorted");
        }
        if self.selected.last().is_some_and(|&j| j >= self.feature_dim) {
            return bad("selected index beyond feature_dim");
        }
        if self.standardizer.mean.len() != p || self.standardizer.scale.len() != p {
            return bad("standardizer length differs from selected count");
        }
        if self.standardizer.scale.iter().any(|s| !(*s > 0.0)) {
            return bad("standardizer scale must be positive");
        }
        let rows = match self.kind {
            ProbeKind::ToolNeed => 1,
            ProbeKind::ToolRisk => 3,
        };
        if self.weights.len() != rows || self.bias.len() != rows {
            return bad("weight/bias row count does not match probe kind");
        }
        if self.weights.iter().any(|w| w.len() != p) {
            return bad("weight row length differs from selected count");
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad("decision_threshold must lie in (0, 1)");
        }
        if !(self.uncertainty_band >= 0.0) {
            return bad("uncertainty_band must be nonnegative");
        }
        if let Some(seg) = &self.segments {
            seg.validate().map_err(|e| ProbeError::ModelFile(e.to_string()))?;
        }
        Ok(())
    }

    pub fn n_selected(&self) -> usize {
        self.selected.len()
    }

    /// Standardized selected features `ẑ` for one raw vector.
    pub fn standardized(&self, z: &SparseVec) -> Result<Vec<f64>, ProbeError> {
        if let Some(&max) = self.selected.last() {
            if z.len() <= max {
                return Err(ProbeError::FeatureDimension {
                    expected: max + 1,
                    found: z.len(),
                });
            }
        }
        Ok(self
            .selected
            .iter()
            .zip(&self.standardizer.mean)
            .zip(&self.standardizer.scale)
            .map(|((&j, m), s)| (z.get(j) - m) / s)
            .collect())
    }

    pub fn logits(&self, z: &SparseVec) -> Result<Vec<f64>, ProbeError> {
        let zs = self.standardized(z)?;
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(&zs).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect())
    }

    pub fn decide(&self, p_tool: f64) -> ToolDecision {
        if (p_tool - self.decision_threshold).abs() < self.uncertainty_band {
            ToolDecision::Uncertain
        } else if p_tool >= self.decision_threshold {
            ToolDecision::Tool
        } else {
            ToolDecision::NoTool
        }
    }

    pub fn predict_tool_need(&self, z: &SparseVec) -> Result<ToolNeedPrediction, ProbeError> {
        self.expect_kind(ProbeKind::ToolNeed)?;
        let p_tool = sigmoid(self.logits(z)?[0]);
        Ok(ToolNeedPrediction {
            p_tool,
            decision: self.decide(p_tool),
            predicted_tool: p_tool >= self.decision_threshold,
        })
    }

    pub fn predict_risk(&self, z: &SparseVec) -> Result<RiskPrediction, ProbeError> {
        self.expect_kind(ProbeKind::ToolRisk)?;
        let p = softmax(&self.logits(z)?);
        let p = [p[0], p[1], p[2]];
        Ok(RiskPrediction {
            p,
            tier: argmax_high(&p),
        })
    }

    /// Predicted class index (tool_need: 1 iff p_tool ≥ threshold).
    pub fn predict_class(&self, z: &SparseVec) -> Result<usize, ProbeError> {
        match self.kind {
            ProbeKind::ToolNeed => Ok(usize::from(self.predict_tool_need(z)?.predicted_tool)),
            ProbeKind::ToolRisk => Ok(self.predict_risk(z)?.tier.index()),
        }
    }

    fn expect_kind(&self, expected: ProbeKind) -> Result<(), ProbeError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(ProbeError::WrongKind {
                expected,
                found: self.kind,
            })
        }
    }

    pub fn to_json(&self) -> String {
        let file = ProbeFileOut {
            format: PROBE_FORMAT,
            version: PROBE_VERSION,
            model: self,
        };
        serde_json::to_string_pretty(&file).expect("probe model serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ProbeError> {
        let file: ProbeFileIn = serde_json::from_str(text).map_err(|e| ProbeError::ModelFile(e.to_string()))?;
        if file.format != PROBE_FORMAT || file.version != PROBE_VERSION {
            return Err(ProbeError::ModelFile(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Argmax over (low, medium, high); exact ties resolve to the higher tier.
fn argmax_high(p: &[f64; 3]) -> RiskTier {
    let mut best = 0;
    for i in 1..3 {
        if p[i] >= p[best] {
            best = i;
        }
    }
    RiskTier::from_index(best).expect("three tiers")
}

fn dense_columns(features: &[SparseVec], rows: &[usize], columns: &[usize]) -> Design {
    let p = columns.len();
    let mut data = vec![0.0; rows.len() * p];
    for (r, &i) in rows.iter().enumerate() {
        let z = &features[i];
        for (c, &j) in columns.iter().enumerate() {
            data[r * p + c] = z.get(j);
        }
    }
    Design::new(rows.len(), p, data)
}

fn sample_weights(labels: &[usize], n_classes: usize, scheme: ClassWeighting) -> Option<Vec<f64>> {
    match scheme {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => {
            let mut counts = vec![0usize; n_classes];
            labels.iter().for_each(|&l| counts[l] += 1);
            let present = counts.iter().filter(|c| **c > 0).count() as f64;
            let n = labels.len() as f64;
            Some(labels.iter().map(|&l| n / (present * counts[l] as f64)).collect())
        }
    }
}

/// Fit on the already standardized design; returns the solver result.
pub fn fit_standardized(
    x: &Design,
    labels: &[usize],
    n_classes: usize,
    reg: RegConfig,
    weights: Option<&[f64]>,
    opts: &SolverOptions,
) -> FitResult {
    let objective = Objective::new(x, labels, n_classes, weights, reg.l2);
    let x0 = vec![0.0; objective.n_params()];
    solver::proximal_gradient(&objective, reg.l1, x0, opts)
}

struct Fitted {
    model: ProbeModel,
}

fn fit_on(
    features: &[SparseVec],
    labels: &[usize],
    rows: &[usize],
    reg: RegConfig,
    config: &TrainConfig,
) -> Result<Fitted, ProbeError> {
    let n_classes = config.kind.n_classes();
    let sub_features: Vec<SparseVec> = rows.iter().map(|&i| features[i].clone()).collect();
    let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let selected = select_features(&sub_features, &sub_labels, n_classes, config.n_select)?;
    let all: Vec<usize> = (0..rows.len()).collect();
    let mut x = dense_columns(&sub_features, &all, &selected);
    let standardizer = Standardizer::fit(&x);
    standardizer.apply(&mut x);
    let weights = sample_weights(&sub_labels, n_classes, config.class_weighting);
    let fit = fit_standardized(&x, &sub_labels, n_classes, reg, weights.as_deref(), &config.solver);
    if !fit.converged {
        warn!(
            "{} probe did not converge after {} iterations (l1={}, l2={})",
            config.kind, fit.iterations, reg.l1, reg.l2
        );
    }
    let p = selected.len();
    let n_out = if n_classes == 2 { 1 } else { n_classes };
    let weight_rows = (0..n_out).map(|k| fit.params[k * p..(k + 1) * p].to_vec()).collect();
    let bias = fit.params[n_out * p..].to_vec();
    let model = ProbeModel {
        kind: config.kind,
        feature_dim: features[0].len(),
        selected,
        standardizer,
        weights: weight_rows,
        bias,
        reg,
        decision_threshold: config.decision_threshold,
        uncertainty_band: config.uncertainty_band,
        segments: None,
        diagnostics: FitDiagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            final_objective: *fit.objective_trace.last().expect("trace has the start value"),
            grid_log_loss: Vec::new(),
        },
        provenance: None,
    };
    Ok(Fitted { model })
}

fn held_out_log_loss(model: &ProbeModel, features: &[SparseVec], labels: &[usize], rows: &[usize]) -> Result<f64, ProbeError> {
    let mut total = 0.0;
    for &i in rows {
        let logits = model.logits(&features[i])?;
        let y = labels[i];
        let p = if model.kind == ProbeKind::ToolNeed {
            let p1 = sigmoid(logits[0]);
            if y == 1 {
                p1
            } else {
                1.0 - p1
            }
        } else {
            softmax(&logits)[y]
        };
        total -= p.max(1e-300).ln();
    }
    Ok(total / rows.len() as f64)
}

/// Deterministic per-class split into (fit, validation) row indices.
pub fn stratified_split(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_val = if members.len() >= 2 {
            ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

fn data_hash(features: &[SparseVec], labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for (z, &y) in features.iter().zip(labels) {
        h.update((y as u64).to_le_bytes());
        h.update((z.len() as u64).to_le_bytes());
        for (j, v) in z.iter() {
            h.update((j as u64).to_le_bytes());
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Train a probe. `labels` are 0/1 for tool_need and tier indices for tool_risk.
pub fn train_probe(
    features: &[SparseVec],
    labels: &[usize],
    segments: Option<&SegmentMap>,
    config: &TrainConfig,
) -> Result<ProbeModel, ProbeError> {
    if features.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    if config.grid.is_empty() {
        return Err(ProbeError::Config("empty regularization grid".into()));
    }
    if let Some(bad) = config.grid.iter().find(|r| !(r.l1 >= 0.0 && r.l2 >= 0.0)) {
        return Err(ProbeError::Config(format!("negative penalty {bad:?}")));
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return Err(ProbeError::Config("validation_fraction must lie in (0, 1)".into()));
    }
    if features.iter().any(|z| z.values().iter().any(|v| !v.is_finite())) {
        return Err(ProbeError::NonFinite);
    }
    let n_classes = config.kind.n_classes();
    select::check_labels(labels, n_classes)?;

    let mut grid_losses = Vec::new();
    let reg = if config.grid.len() == 1 {
        config.grid[0]
    } else {
        let (fit_rows, val_rows) = stratified_split(labels, n_classes, config.validation_fraction, config.seed);
        let mut best: Option<(f64, RegConfig)> = None;
        for &reg in &config.grid {
            let fitted = fit_on(features, labels, &fit_rows, reg, config)?;
            let loss = held_out_log_loss(&fitted.model, features, labels, &val_rows)?;
            grid_losses.push(loss);
            if best.is_none_or(|(b, _)| loss < b) {
                best = Some((loss, reg));
            }
        }
        best.expect("grid is non-empty").1
    };

    let all: Vec<usize> = (0..features.len()).collect();
    let mut model = fit_on(features, labels, &all, reg, config)?.model;
    model.diagnostics.grid_log_loss = grid_losses;
    model.segments = segments.cloned();
    model.provenance = Some(Provenance::new(Some(config.seed)).with_input("training-data", data_hash(features, labels)));
    Ok(model)
}

/// Join rows to features by step key and derive labels for `kind`.
///
/// Tool-risk uses only rows that need a tool (they carry a tier).
pub fn assemble(
    kind: ProbeKind,
    rows: &[DecisionRow],
    features: &FeatureSet,
) -> Result<(Vec<StepKey>, Vec<SparseVec>, Vec<usize>), ProbeError> {
    let index: std::collections::HashMap<&StepKey, &SparseVec> = features.rows.iter().map(|(k, v)| (k, v)).collect();
    let mut keys = Vec::new();
    let mut zs = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        let label = match kind {
            ProbeKind::ToolNeed => usize::from(row.tool_needed),
            ProbeKind::ToolRisk => match (row.tool_needed, row.risk_tier) {
                (true, Some(tier)) => tier.index(),
                _ => continue,
            },
        };
        let key = row.key();
        let z = index
            .get(&key)
            .ok_or_else(|| ProbeError::MissingFeatures(key.to_string()))?;
        zs.push((*z).clone());
        keys.push(key);
        labels.push(label);
    }
    Ok((keys, zs, labels))
}

/// Metrics of `model` on labeled rows (tool rows only for tool_risk).
pub fn evaluate(model: &ProbeModel, rows: &[DecisionRow], features: &FeatureSet) -> Result<Metrics, ProbeError> {
    let (_, zs, labels) = assemble(model.kind, rows, features)?;
    evaluate_vectors(model, &zs, &labels)
}

pub fn evaluate_vectors(model: &ProbeModel, features: &[SparseVec], labels: &[usize]) -> Result<Metrics, ProbeError> {
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    let predicted = features
        .iter()
        .map(|z| model.predict_class(z))
        .collect::<Result<Vec<_>, _>>()?;
    Metrics::from_predictions(labels, &predicted, model.kind.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn linear_model(weights: Vec<f64>, bias: f64) -> ProbeModel {
        let p = weights.len();
        ProbeModel::from_parts(
            ProbeKind::ToolNeed,
            p,
            (0..p).collect(),
            Standardizer::identity(p),
            vec![weights],
            vec![bias],
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uncertain() {
        let m = linear_model(vec![0.0, 0.0], 0.0);
        let pred = m.predict_tool_need(&SparseVec::from_dense(&[1.0, 2.0])).unwrap();
        assert_eq!(pred.p_tool, 0.5);
        assert_eq!(pred.decision, ToolDecision::Uncertain);
    }

    #[test]
    fn fixture_probability_formats_to_three_places() {
        let p: f64 = 0.846;
        let m = linear_model(vec![0.0], (p / (1.0 - p)).ln());
        let pred = m.predict_tool_need(&SparseVec::zeros(1)).unwrap();
        assert_eq!(format!("{:.3}", pred.p_tool), "0.846");
        assert_eq!(pred.decision, ToolDecision::Tool);
    }

    #[test]
    fn prediction_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let dim = 12;
            let selected = vec![1, 4, 5, 9];
            let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let m = ProbeModel::from_parts(
                ProbeKind::ToolNeed,
                dim,
                selected.clone(),
                Standardizer {
                    mean: mean.clone(),
                    scale: scale.clone(),
                },
                vec![w.clone()],
                vec![b],
            )
            .unwrap();
            let dense: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..3.0)).collect();
            let mut logit = b;
            for c in 0..4 {
                logit += w[c] * (dense[selected[c]] - mean[c]) / scale[c];
            }
            let want = 1.0 / (1.0 + (-logit).exp());
            let got = m.predict_tool_need(&SparseVec::from_dense(&dense)).unwrap().p_tool;
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn short_vector_rejected() {
        let m = linear_model(vec![1.0, 1.0, 1.0], 0.0);
        assert!(matches!(
            m.predict_tool_need(&SparseVec::zeros(2)),
            Err(ProbeError::FeatureDimension { expected: 3, found: 2 })
        ));
    }

    fn risk_model(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> ProbeModel {
        let p = weights[0].len();
        ProbeModel::from_parts(ProbeKind::ToolRisk, p, (0..p).collect(), Standardizer::identity(p), weights, bias)
            .unwrap()
    }

    #[test]
    fn uniform_risk_ties_to_high() {
        let m = risk_model(vec![vec![0.0]; 3], vec![0.0; 3]);
        let pred = m.predict_risk(&SparseVec::zeros(1)).unwrap();
        for p in pred.p {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(pred.tier, RiskTier::High);
    }

    #[test]
    fn risk_fixture_low() {
        let probs: [f64; 3] = [0.997, 0.003, 0.0001];
        let m = risk_model(vec![vec![0.0]; 3], probs.iter().map(|p| p.ln()).collect());
        let pred = m.predict_risk(&SparseVec::zeros(1)).unwrap();
        assert_eq!(pred.tier, RiskTier::Low);
        assert!((pred.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn medium_high_tie_goes_high() {
        let m = risk_model(vec![vec![0.0]; 3], vec![-1.0, 2.0, 2.0]);
        assert_eq!(m.predict_risk(&SparseVec::zeros(1)).unwrap().tier, RiskTier::High);
    }

    #[test]
    fn wrong_kind_rejected() {
        let m = linear_model(vec![1.0], 0.0);
        assert!(matches!(m.predict_risk(&SparseVec::zeros(1)), Err(ProbeError::WrongKind { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = linear_model(vec![0.1, -0.9, 0.5], 0.25);
        m.segments = Some(SegmentMap::from_sizes([(23, 3)]));
        let back = ProbeModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let tampered = m.to_json().replace("toolwatch-probe", "other");
        assert!(ProbeModel::from_json(&tampered).is_err());
    }

    #[test]
    fn model_validation() {
        let err = ProbeModel::from_parts(
            ProbeKind::ToolNeed,
            3,
            vec![2, 1],
            Standardizer::identity(2),
            vec![vec![0.0; 2]],
            vec![0.0],
        );
        assert!(err.is_err());
        let err = ProbeModel::from_parts(
            ProbeKind::ToolRisk,
            3,
            vec![0],
            Standardizer::identity(1),
            vec![vec![0.0]],
            vec![0.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn stratified_split_keeps_classes() {
        let labels: Vec<usize> = (0..50).map(|i| usize::from(i % 5 == 0)).collect();
        let (fit, val) = stratified_split(&labels, 2, 0.2, 3);
        assert_eq!(fit.len() + val.len(), 50);
        assert!(val.iter().any(|&i| labels[i] == 1));
        assert!(fit.iter().any(|&i| labels[i] == 1));
        assert_eq!(stratified_split(&labels, 2, 0.2, 3), (fit, val));
    }

    #[test]
    fn trains_on_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..120).map(|i| i % 2).collect();
        let feats: Vec<SparseVec> = labels
            .iter()
            .map(|&y| {
                let mut d: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
                d[3] = y as f64 * 2.0 + rng.random_range(0.0..0.5);
                SparseVec::from_dense(&d)
            })
            .collect();
        let mut cfg = TrainConfig::new(ProbeKind::ToolNeed);
        cfg.n_select = 4;
        let m = train_probe(&feats, &labels, None, &cfg).unwrap();
        assert!(m.selected.contains(&3));
        assert_eq!(m.diagnostics.grid_log_loss.len(), cfg.grid.len());
        let metrics = evaluate_vectors(&m, &feats, &labels).unwrap();
        assert!(metrics.accuracy > 0.97);
        let again = train_probe(&feats, &labels, None, &cfg).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn inverse_frequency_weights_average_to_one() {
        let w = sample_weights(&[0, 0, 0, 1], 2, ClassWeighting::InverseFrequency).unwrap();
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!((w[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        assert_eq!(preset("gpt-oss-tool-need").unwrap().n_select, 200);
        assert_eq!(preset("gemma-tool-need").unwrap().n_select, 2000);
        assert_eq!(preset("tool-risk").unwrap().n_select, 1000);
        assert_eq!(reg_grid(PenaltyFamily::Lasso).iter().filter(|r| r.l2 != 0.0).count(), 0);
        assert_eq!(reg_grid(PenaltyFamily::Any).len(), 9);
    }
}
