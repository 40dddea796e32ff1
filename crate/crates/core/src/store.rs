//! Pooled pre-action hidden states keyed by (trajectory, step), plus a seeded
//! synthetic generator used when no model is available.
//!
//! # Binary layout (version 1)
//!
//! The file uses the shared container (magic `TWACTIV\0`, version, JSON
//! manifest header), followed by
//!
//! ```text
//! key block     count × { step_index: u32 LE, id_len: u16 LE, trajectory_id: id_len bytes UTF-8 }
//! vector block  count × layers × d × f32 LE   (fixed stride, layer order = manifest.layer_ids)
//! ```
//!
//! The manifest is also written next to the store as `<store>.manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::ingest::{build_decision_rows, Actor, DecisionRow, StepKey, ToolAction, TrajectoryStep};
use crate::risk::RiskTier;
use crate::sae::{Nonlinearity, SaeError, SaeLayer, SaeStack};

const STORE_MAGIC: &[u8; 8] = b"TWACTIV\0";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("record {record}: {reason}")]
    Inconsistent { record: usize, reason: String },
    #[error("record {record}, layer {layer_id}: non-finite value at index {index}")]
    NonFinite { record: usize, layer_id: u32, index: usize },
    #[error("synthetic spec: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingDescriptor {
    /// Number of trailing pre-action tokens averaged; shorter contexts use all tokens.
    pub window: u32,
    pub reduction: String,
    pub excludes_special_tokens: bool,
}

impl Default for PoolingDescriptor {
    fn default() -> Self {
        Self {
            window: 32,
            reduction: "mean".into(),
            excludes_special_tokens: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub model_id: String,
    pub layer_ids: Vec<u32>,
    pub d: usize,
    pub count: usize,
    pub endianness: String,
    pub pooling: PoolingDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub layer_id: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub trajectory_id: String,
    pub step_index: u32,
    pub layers: Vec<LayerState>,
}

impl ActivationRecord {
    pub fn layer(&self, layer_id: u32) -> Option<&[f32]> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .map(|l| l.values.as_slice())
    }

    pub fn key(&self) -> StepKey {
        StepKey::new(self.trajectory_id.clone(), self.step_index)
    }
}

/// Validated, homogeneous set of activation records.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    manifest: StoreManifest,
    records: Vec<ActivationRecord>,
}

impl ActivationStore {
    pub fn new(
        model_id: impl Into<String>,
        layer_ids: Vec<u32>,
        d: usize,
        records: Vec<ActivationRecord>,
    ) -> Result<Self, StoreError> {
        let manifest = StoreManifest {
            format_version: STORE_VERSION,
            model_id: model_id.into(),
            layer_ids,
            d,
            count: records.len(),
            endianness: "little".into(),
            pooling: PoolingDescriptor::default(),
        };
        let store = Self { manifest, records };
        store.validate()?;
        Ok(store)
    }

    pub fn with_pooling(mut self, pooling: PoolingDescriptor) -> Self {
        self.manifest.pooling = pooling;
        self
    }

    fn validate(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        if m.d == 0 {
            return Err(StoreError::Manifest("d must be positive".into()));
        }
        if m.layer_ids.is_empty() {
            return Err(StoreError::Manifest("no layers".into()));
        }
        if m.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StoreError::Manifest("layer_ids must be strictly ascending".into()));
        }
        if m.count != self.records.len() {
            return Err(StoreError::Manifest(format!(
                "count {} but {} records",
                m.count,
                self.records.len()
            )));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.trajectory_id.len() > u16::MAX as usize {
                return Err(StoreError::Inconsistent {
                    record: i,
                    reason: "trajectory_id longer than 65535 bytes".into(),
                });
            }
            let ids: Vec<u32> = rec.layers.iter().map(|l| l.layer_id).collect();
            if ids != m.layer_ids {
                return Err(StoreError::Inconsistent {
                    record: i,
                    reason: format!("layers {ids:?} differ from manifest {:?}", m.layer_ids),
                });
            }
            for layer in &rec.layers {
                if layer.values.len() != m.d {
                    return Err(StoreError::Inconsistent {
                        record: i,
                        reason: format!("layer {} has width {}, expected {}", layer.layer_id, layer.values.len(), m.d),
                    });
                }
                if let Some(index) = layer.values.iter().position(|v| !v.is_finite()) {
                    return Err(StoreError::NonFinite {
                        record: i,
                        layer_id: layer.layer_id,
                        index,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ActivationRecord> {
        self.records
    }

    pub fn get(&self, key: &StepKey) -> Option<&ActivationRecord> {
        self.records
            .iter()
            .find(|r| r.step_index == key.step_index && r.trajectory_id == key.trajectory_id)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        container::write_header(&mut w, STORE_MAGIC, STORE_VERSION, &self.manifest)?;
        let mut keys = Vec::new();
        for rec in &self.records {
            keys.extend_from_slice(&rec.step_index.to_le_bytes());
            keys.extend_from_slice(&(rec.trajectory_id.len() as u16).to_le_bytes());
            keys.extend_from_slice(rec.trajectory_id.as_bytes());
        }
        w.write_all(&keys)?;
        for rec in &self.records {
            for layer in &rec.layers {
                container::write_f32s(&mut w, &layer.values)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let (manifest, mut offset): (StoreManifest, u64) =
            container::read_header(&mut r, STORE_MAGIC, STORE_VERSION)?;
        if manifest.endianness != "little" {
            return Err(StoreError::Manifest(format!("unsupported endianness {:?}", manifest.endianness)));
        }
        let mut keys = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let step_index = container::read_u32(&mut r, offset)?;
            let len = container::read_u16(&mut r, offset + 4)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id).map_err(|_| ContainerError::Truncated(offset + 6))?;
            offset += 6 + len as u64;
            let id = String::from_utf8(id).map_err(|_| StoreError::Inconsistent {
                record: i,
                reason: "trajectory_id is not UTF-8".into(),
            })?;
            keys.push((id, step_index));
        }
        let stride = manifest.d;
        let mut records = Vec::with_capacity(manifest.count);
        for (trajectory_id, step_index) in keys {
            let mut layers = Vec::with_capacity(manifest.layer_ids.len());
            for &layer_id in &manifest.layer_ids {
                let values = container::read_f32s(&mut r, stride, offset)?;
                offset += (stride * 4) as u64;
                layers.push(LayerState { layer_id, values });
            }
            records.push(ActivationRecord {
                trajectory_id,
                step_index,
                layers,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(StoreError::Manifest(format!(
                "trailing bytes after {} declared records",
                manifest.count
            )));
        }
        let store = Self { manifest, records };
        store.validate()?;
        Ok(store)
    }

    /// Write the store and its `<path>.manifest.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.write(BufWriter::new(File::create(path)?))?;
        let sidecar = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::from)?;
        std::fs::write(manifest_sidecar_path(path), sidecar + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub fn manifest_sidecar_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_store<W: Write>(w: W, store: &ActivationStore) -> Result<(), StoreError> {
    store.write(w)
}

pub fn read_store<R: Read>(r: R) -> Result<ActivationStore, StoreError> {
    ActivationStore::read(r)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub d: usize,
    pub layer_ids: Vec<u32>,
    /// Shift applied along the planted direction(s) in the last layer; `None` plants nothing.
    pub planted_margin: Option<f64>,
    /// SAE features per layer in the paired stack.
    pub features_per_layer: usize,
    pub tool_fraction: f64,
    /// Rows per synthetic trajectory.
    pub steps_per_trajectory: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_rows: 400,
            d: 16,
            layer_ids: vec![3, 7, 11, 15, 19, 23],
            planted_margin: Some(8.0),
            features_per_layer: 32,
            tool_fraction: 0.5,
            steps_per_trajectory: 8,
        }
    }
}

/// Number of SAE features in the last layer aligned with the tool direction.
pub const PLANTED_TOOL_FEATURES: usize = 4;

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub store: ActivationStore,
    pub rows: Vec<DecisionRow>,
    pub stack: SaeStack,
    /// Global feature indices aligned with the planted tool direction.
    pub planted_tool_features: Vec<usize>,
    /// Global feature indices aligned with the low/medium/high directions (empty if `d < 4`).
    pub planted_risk_features: Vec<usize>,
}

const TIER_TOOLS: [(&str, RiskTier); 3] = [
    ("get_stock_overview", RiskTier::Low),
    ("write_file", RiskTier::Medium),
    ("sendemail", RiskTier::High),
];

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn orthogonalize(v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut v = v;
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
    normalize(v)
}

/// Deterministic synthetic activations, decision rows and a paired SAE stack.
///
/// Hidden states are standard normal. With a planted margin `m`, tool rows
/// get `m·u` added to the last layer's state and every row gets `m·v_t` for
/// a uniformly drawn tier `t`, where `u, v_low, v_med, v_high` are
/// orthonormal. Only tool rows carry the drawn tier as a label. The last
/// layer's encoder has [`PLANTED_TOOL_FEATURES`] rows aligned with `u` and one
/// row per `v_t`, so after ReLU encoding the classes separate linearly.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticData, StoreError> {
    if spec.d == 0 || spec.n_rows == 0 {
        return Err(StoreError::Synthetic("d and n_rows must be at least 1".into()));
    }
    if spec.layer_ids.is_empty() {
        return Err(StoreError::Synthetic("at least one layer required".into()));
    }
    if !(0.0..=1.0).contains(&spec.tool_fraction) {
        return Err(StoreError::Synthetic("tool_fraction must lie in [0, 1]".into()));
    }
    let steps_per_trajectory = spec.steps_per_trajectory.max(1);
    let risk_planted = spec.d >= 4;
    let planted_rows = PLANTED_TOOL_FEATURES + if risk_planted { 3 } else { 0 };
    if spec.features_per_layer < planted_rows {
        return Err(StoreError::Synthetic(format!(
            "features_per_layer must be at least {planted_rows}"
        )));
    }
    let mut layer_ids = spec.layer_ids.clone();
    layer_ids.sort_unstable();
    layer_ids.dedup();
    let last_layer = *layer_ids.last().expect("non-empty");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.d;
    let u = unit_gaussian(&mut rng, d);
    let mut basis = vec![u.clone()];
    let mut tier_dirs = Vec::new();
    if risk_planted {
        for _ in 0..3 {
            let v = orthogonalize(unit_gaussian(&mut rng, d), &basis);
            basis.push(v.clone());
            tier_dirs.push(v);
        }
    }

    // paired encoder stack
    let k = spec.features_per_layer;
    let mut sae_layers = Vec::with_capacity(layer_ids.len());
    for &layer_id in &layer_ids {
        let mut rows: Vec<Vec<f64>> = (0..k).map(|_| unit_gaussian(&mut rng, d)).collect();
        if layer_id == last_layer {
            for row in rows.iter_mut().take(PLANTED_TOOL_FEATURES) {
                let jitter: Vec<f64> = u
                    .iter()
                    .map(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                *row = normalize(jitter);
            }
            for (t, dir) in tier_dirs.iter().enumerate() {
                rows[PLANTED_TOOL_FEATURES + t] = dir.clone();
            }
        }
        let weights = rows.into_iter().flatten().map(|x| x as f32).collect();
        sae_layers.push(SaeLayer::new(layer_id, d, k, weights, vec![0.0; k], Nonlinearity::Relu)?.with_source("synthetic"));
    }
    let stack = SaeStack::new(sae_layers)?;
    let last_start = stack
        .segments()
        .segment_of(last_layer)
        .map(|s| s.start)
        .expect("last layer in stack");
    let planted_tool_features = (last_start..last_start + PLANTED_TOOL_FEATURES).collect();
    let planted_risk_features = (0..tier_dirs.len())
        .map(|t| last_start + PLANTED_TOOL_FEATURES + t)
        .collect();

    let margin = spec.planted_margin.unwrap_or(0.0);
    let mut records = Vec::with_capacity(spec.n_rows);
    let mut steps = Vec::with_capacity(spec.n_rows);
    let mut tiers = Vec::with_capacity(spec.n_rows);
    for i in 0..spec.n_rows {
        let trajectory_id = format!("synth-{:05}", i / steps_per_trajectory);
        let step_index = (i % steps_per_trajectory) as u32;
        let tool = rng.random_bool(spec.tool_fraction);
        // Every row gets a tier shift so the tier features carry no tool-need signal.
        let drawn = TIER_TOOLS[rng.random_range(0..3)];
        let tier = tool.then_some(drawn);
        let mut layers = Vec::with_capacity(layer_ids.len());
        for &layer_id in &layer_ids {
            let mut h: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if layer_id == last_layer && margin != 0.0 {
                if tool {
                    h.iter_mut().zip(&u).for_each(|(x, y)| *x += margin * y);
                }
                if let Some(dir) = tier_dirs.get(drawn.1.index()) {
                    h.iter_mut().zip(dir).for_each(|(x, y)| *x += margin * y);
                }
            }
            layers.push(LayerState {
                layer_id,
                values: h.into_iter().map(|x| x as f32).collect(),
            });
        }
        records.push(ActivationRecord {
            trajectory_id: trajectory_id.clone(),
            step_index,
            layers,
        });
        let mut step = TrajectoryStep::new(trajectory_id, step_index, Actor::User, format!("synthetic request {i}"));
        if let Some((name, _)) = tier {
            step = step.with_action(ToolAction::new(name, format!("row={i}")));
        }
        steps.push(step);
        tiers.push(tier.map(|(_, t)| t));
    }

    let mut rows = Vec::with_capacity(spec.n_rows);
    for chunk in steps.chunks(steps_per_trajectory) {
        rows.extend(build_decision_rows(chunk));
    }
    for (row, tier) in rows.iter_mut().zip(tiers) {
        row.risk_tier = tier;
    }

    let store = ActivationStore::new("synthetic", layer_ids, d, records)?;
    Ok(SyntheticData {
        store,
        rows,
        stack,
        planted_tool_features,
        planted_risk_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, step: u32, layers: &[u32], d: usize, fill: f32) -> ActivationRecord {
        ActivationRecord {
            trajectory_id: id.into(),
            step_index: step,
            layers: layers
                .iter()
                .map(|&layer_id| LayerState {
                    layer_id,
                    values: (0..d).map(|j| fill + j as f32).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_store_round_trip() {
        let store = ActivationStore::new("m", vec![3, 7], 4, vec![]).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let back = ActivationStore::read(buf.as_slice()).unwrap();
        assert_eq!(back.manifest().count, 0);
        assert_eq!(back, store);
    }

    #[test]
    fn gpt_oss_layout_manifest() {
        let layers = [3, 7, 11, 15, 19, 23];
        let store = ActivationStore::new("gpt-oss-20b", layers.to_vec(), 2, vec![record("3344", 0, &layers, 2, 0.5)]).unwrap();
        assert_eq!(store.manifest().layer_ids, vec![3, 7, 11, 15, 19, 23]);
        assert_eq!(store.manifest().pooling.window, 32);
    }

    #[test]
    fn rejects_inconsistent_records() {
        let err = ActivationStore::new("m", vec![3, 7], 2, vec![record("a", 0, &[3], 2, 0.0)]).unwrap_err();
        assert!(matches!(err, StoreError::Inconsistent { record: 0, .. }));
        let err = ActivationStore::new("m", vec![3], 2, vec![record("a", 0, &[3], 3, 0.0)]).unwrap_err();
        assert!(matches!(err, StoreError::Inconsistent { .. }));
        let mut bad = record("a", 0, &[3], 2, 0.0);
        bad.layers[0].values[1] = f32::NAN;
        let err = ActivationStore::new("m", vec![3], 2, vec![bad]).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { record: 0, layer_id: 3, index: 1 }));
        assert!(ActivationStore::new("m", vec![7, 3], 2, vec![]).is_err());
    }

    #[test]
    fn load_rejects_bad_version_and_nan() {
        let store = ActivationStore::new("m", vec![1], 1, vec![record("a", 0, &[1], 1, 2.0)]).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();

        let mut wrong_version = buf.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            ActivationStore::read(wrong_version.as_slice()),
            Err(StoreError::Container(ContainerError::VersionMismatch { found: 9, .. }))
        ));

        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(ActivationStore::read(nan.as_slice()), Err(StoreError::NonFinite { .. })));

        let truncated = &buf[..buf.len() - 2];
        assert!(ActivationStore::read(truncated).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(ActivationStore::read(trailing.as_slice()).is_err());
    }

    #[test]
    fn sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        let store = ActivationStore::new("m", vec![1, 2], 3, vec![record("a", 0, &[1, 2], 3, 0.0)]).unwrap();
        store.save(&path).unwrap();
        let sidecar: StoreManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(&sidecar, store.manifest());
        assert_eq!(ActivationStore::load(&path).unwrap(), store);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec {
            n_rows: 20,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.store.write(&mut ba).unwrap();
        b.store.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.stack, b.stack);
        let c = generate_synthetic(&spec, 6).unwrap();
        assert_ne!(c.store, a.store);
    }

    #[test]
    fn synthetic_rows_align_with_records() {
        let data = generate_synthetic(&SynthSpec::default(), 1).unwrap();
        assert_eq!(data.rows.len(), data.store.records().len());
        for (row, rec) in data.rows.iter().zip(data.store.records()) {
            assert_eq!(row.key(), rec.key());
            assert_eq!(row.risk_tier.is_some(), row.tool_needed);
        }
        assert_eq!(data.planted_tool_features.len(), PLANTED_TOOL_FEATURES);
        assert_eq!(data.planted_risk_features.len(), 3);
        assert_eq!(data.stack.total_features(), 6 * 32);
    }

    #[test]
    fn synthetic_rejects_degenerate_spec() {
        let spec = SynthSpec {
            d: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
        let spec = SynthSpec {
            n_rows: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }
}
