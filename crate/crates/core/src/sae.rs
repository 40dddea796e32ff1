//! Sparse autoencoder encoders: `z = φ(W_enc · h + b_enc)` per layer, concatenated
//! across a layer stack.
//!
//! Only the encoder half is loaded; decoders are never needed because ablation
//! happens directly in latent space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::features::{ConcatenatedFeatures, FeatureSet, SegmentMap, SparseVec};
use crate::store::{ActivationRecord, ActivationStore};

const SAE_MAGIC: &[u8; 8] = b"TWSAE\0\0\0";
const SAE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("layer {layer_id}: input has dimension {found}, encoder expects {expected}")]
    DimensionMismatch { layer_id: u32, expected: usize, found: usize },
    #[error("layer {layer_id}: {message}")]
    Shape { layer_id: u32, message: String },
    #[error("record is missing layer {0}")]
    MissingLayer(u32),
    #[error("layer {0} appears twice in the stack")]
    DuplicateLayer(u32),
    #[error("layer {layer_id}: non-finite input at index {index}")]
    NonFinite { layer_id: u32, index: usize },
    #[error("text dump line {line}: {message}")]
    TextDump { line: usize, message: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    /// Keeps `pre` where `pre > θ_i`, zero elsewhere.
    JumpRelu { thresholds: Vec<f32> },
    /// ReLU, then only the `k_active` largest survivors (ties to the lower index).
    TopK { k_active: usize },
}

impl Nonlinearity {
    fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::JumpRelu { .. } => "jump_relu",
            Nonlinearity::TopK { .. } => "top_k",
        }
    }
}

/// Encoder weights for one layer. `weights` is row-major `k × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeLayer {
    layer_id: u32,
    d: usize,
    k: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    nonlinearity: Nonlinearity,
    source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SaeHeader {
    layer_id: u32,
    d: usize,
    k: usize,
    nonlinearity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_active: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

impl SaeLayer {
    pub fn new(
        layer_id: u32,
        d: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self, SaeError> {
        let shape = |message: String| SaeError::Shape { layer_id, message };
        if d == 0 || k == 0 {
            return Err(shape("d and k must be positive".into()));
        }
        if weights.len() != k * d {
            return Err(shape(format!("W_enc has {} values, expected {k}×{d}", weights.len())));
        }
        if bias.len() != k {
            return Err(shape(format!("b_enc has {} values, expected {k}", bias.len())));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(shape("non-finite encoder weight".into()));
        }
        match &nonlinearity {
            Nonlinearity::JumpRelu { thresholds } => {
                if thresholds.len() != k {
                    return Err(shape(format!("θ has {} values, expected {k}", thresholds.len())));
                }
                if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
                    return Err(shape("θ must be finite and nonnegative".into()));
                }
            }
            Nonlinearity::TopK { k_active } if *k_active == 0 => {
                return Err(shape("top_k needs k_active ≥ 1".into()));
            }
            _ => {}
        }
        Ok(Self {
            layer_id,
            d,
            k,
            weights,
            bias,
            nonlinearity,
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    /// `W_enc · h + b_enc`, accumulated in f64.
    pub fn pre_activation(&self, h: &[f32]) -> Result<Vec<f64>, SaeError> {
        if h.len() != self.d {
            return Err(SaeError::DimensionMismatch {
                layer_id: self.layer_id,
                expected: self.d,
                found: h.len(),
            });
        }
        if let Some(index) = h.iter().position(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite {
                layer_id: self.layer_id,
                index,
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.d)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter().zip(h).map(|(w, x)| f64::from(*w) * f64::from(*x)).sum::<f64>() + f64::from(*b)
            })
            .collect())
    }

    pub fn encode(&self, h: &[f32]) -> Result<SparseVec, SaeError> {
        let mut z = self.pre_activation(h)?;
        match &self.nonlinearity {
            Nonlinearity::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Nonlinearity::JumpRelu { thresholds } => {
                for (v, t) in z.iter_mut().zip(thresholds) {
                    if *v <= f64::from(*t) {
                        *v = 0.0;
                    }
                }
            }
            Nonlinearity::TopK { k_active } => {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut order: Vec<usize> = (0..z.len()).filter(|&i| z[i] > 0.0).collect();
                if order.len() > *k_active {
                    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
                    for &i in &order[*k_active..] {
                        z[i] = 0.0;
                    }
                }
            }
        }
        Ok(SparseVec::from_dense(&z))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), SaeError> {
        let header = SaeHeader {
            layer_id: self.layer_id,
            d: self.d,
            k: self.k,
            nonlinearity: self.nonlinearity.name().to_string(),
            k_active: match self.nonlinearity {
                Nonlinearity::TopK { k_active } => Some(k_active),
                _ => None,
            },
            source: self.source.clone(),
        };
        container::write_header(&mut w, SAE_MAGIC, SAE_VERSION, &header)?;
        container::write_f32s(&mut w, &self.weights)?;
        container::write_f32s(&mut w, &self.bias)?;
        if let Nonlinearity::JumpRelu { thresholds } = &self.nonlinearity {
            container::write_f32s(&mut w, thresholds)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, SaeError> {
        let (header, mut offset): (SaeHeader, u64) = container::read_header(&mut r, SAE_MAGIC, SAE_VERSION)?;
        let (d, k) = (header.d, header.k);
        let weights = container::read_f32s(&mut r, k * d, offset)?;
        offset += (k * d * 4) as u64;
        let bias = container::read_f32s(&mut r, k, offset)?;
        offset += (k * 4) as u64;
        let nonlinearity = match header.nonlinearity.as_str() {
            "relu" => Nonlinearity::Relu,
            "jump_relu" => Nonlinearity::JumpRelu {
                thresholds: container::read_f32s(&mut r, k, offset)?,
            },
            "top_k" => Nonlinearity::TopK {
                k_active: header.k_active.ok_or_else(|| SaeError::Shape {
                    layer_id: header.layer_id,
                    message: "top_k header without k_active".into(),
                })?,
            },
            other => {
                return Err(SaeError::Shape {
                    layer_id: header.layer_id,
                    message: format!("unknown nonlinearity {other:?}"),
                })
            }
        };
        let mut layer = Self::new(header.layer_id, d, k, weights, bias, nonlinearity)?;
        layer.source = header.source;
        Ok(layer)
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Import a whitespace-separated text dump:
    ///
    /// ```text
    /// layer_id 23
    /// d 3
    /// k 2
    /// nonlinearity relu        (or: jump_relu | top_k <k_active>)
    /// W
    /// <k lines of d values>
    /// b
    /// <k values>
    /// theta                    (jump_relu only)
    /// <k values>
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn from_text_dump(text: &str) -> Result<Self, SaeError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let layer_id = scalar_field(&mut lines, "layer_id")? as u32;
        let d = scalar_field(&mut lines, "d")?;
        let k = scalar_field(&mut lines, "k")?;
        let (nl_line, nl) = named_field(&mut lines, "nonlinearity")?;
        let kind = nl.first().map(String::as_str).unwrap_or_default();

        expect_marker(&mut lines, "W")?;
        let weights = take_values(&mut lines, k * d, "W")?;
        expect_marker(&mut lines, "b")?;
        let bias = take_values(&mut lines, k, "b")?;
        let nonlinearity = match kind {
            "relu" => Nonlinearity::Relu,
            "jump_relu" => {
                expect_marker(&mut lines, "theta")?;
                Nonlinearity::JumpRelu {
                    thresholds: take_values(&mut lines, k, "theta")?,
                }
            }
            "top_k" => Nonlinearity::TopK {
                k_active: nl
                    .get(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| dump_error(nl_line, "top_k needs k_active"))?,
            },
            other => return Err(dump_error(nl_line, &format!("unknown nonlinearity {other:?}"))),
        };
        Self::new(layer_id, d, k, weights, bias, nonlinearity)
    }
}

type DumpLines<'a> = dyn Iterator<Item = (usize, &'a str)> + 'a;

fn dump_error(line: usize, message: &str) -> SaeError {
    SaeError::TextDump {
        line,
        message: message.to_string(),
    }
}

fn named_field<'a>(lines: &mut DumpLines<'a>, name: &str) -> Result<(usize, Vec<String>), SaeError> {
    let (n, l) = lines.next().ok_or_else(|| dump_error(0, &format!("missing {name}")))?;
    let mut parts = l.split_whitespace().map(str::to_string);
    match parts.next() {
        Some(first) if first == name => Ok((n, parts.collect())),
        _ => Err(dump_error(n, &format!("expected {name}, found {l:?}"))),
    }
}

fn scalar_field<'a>(lines: &mut DumpLines<'a>, name: &str) -> Result<usize, SaeError> {
    let (n, rest) = named_field(lines, name)?;
    rest.first()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| dump_error(n, &format!("{name}: expected a nonnegative integer")))
}

fn expect_marker<'a>(lines: &mut DumpLines<'a>, marker: &str) -> Result<(), SaeError> {
    match lines.next() {
        Some((_, l)) if l.eq_ignore_ascii_case(marker) => Ok(()),
        Some((n, l)) => Err(dump_error(n, &format!("expected {marker}, found {l:?}"))),
        None => Err(dump_error(0, &format!("missing {marker} block"))),
    }
}

fn take_values<'a>(lines: &mut DumpLines<'a>, count: usize, what: &str) -> Result<Vec<f32>, SaeError> {
    let mut out = Vec::with_capacity(count);
    let mut last_line = 0;
    while out.len() < count {
        let (n, l) = lines.next().ok_or_else(|| SaeError::TextDump {
            line: last_line,
            message: format!("{what}: expected {count} values, got {}", out.len()),
        })?;
        last_line = n;
        for tok in l.split_whitespace() {
            out.push(tok.parse::<f32>().map_err(|_| SaeError::TextDump {
                line: n,
                message: format!("bad number {tok:?}"),
            })?);
        }
    }
    if out.len() != count {
        return Err(SaeError::TextDump {
            line: last_line,
            message: format!("{what}: expected {count} values, got {}", out.len()),
        });
    }
    Ok(out)
}

pub fn encode_layer(h: &[f32], layer: &SaeLayer) -> Result<SparseVec, SaeError> {
    layer.encode(h)
}

/// Ordered list of per-layer encoders. Segment order follows stack order.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeStack {
    layers: Vec<SaeLayer>,
}

impl SaeStack {
    pub fn new(layers: Vec<SaeLayer>) -> Result<Self, SaeError> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|p| p.layer_id == l.layer_id) {
                return Err(SaeError::DuplicateLayer(l.layer_id));
            }
        }
        Ok(Self { layers })
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, SaeError> {
        let layers = paths
            .iter()
            .map(|p| SaeLayer::load(p.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[SaeLayer] {
        &self.layers
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    pub fn segments(&self) -> SegmentMap {
        SegmentMap::from_sizes(self.layers.iter().map(|l| (l.layer_id, l.k)))
    }

    pub fn total_features(&self) -> usize {
        self.layers.iter().map(|l| l.k).sum()
    }

    /// Encode every stack layer from `layers` (any superset, any order) and concatenate.
    pub fn encode_vectors<'a>(
        &self,
        lookup: impl Fn(u32) -> Option<&'a [f32]>,
    ) -> Result<ConcatenatedFeatures, SaeError> {
        let mut z = SparseVec::zeros(0);
        for layer in &self.layers {
            let h = lookup(layer.layer_id).ok_or(SaeError::MissingLayer(layer.layer_id))?;
            z.extend(&layer.encode(h)?);
        }
        Ok(ConcatenatedFeatures {
            z,
            segments: self.segments(),
        })
    }
}

pub fn encode_step(record: &ActivationRecord, stack: &SaeStack) -> Result<ConcatenatedFeatures, SaeError> {
    stack.encode_vectors(|id| record.layer(id))
}

/// Encode every record of `store`, in store order.
pub fn encode_store(store: &ActivationStore, stack: &SaeStack) -> Result<FeatureSet, SaeError> {
    let rows = store
        .records()
        .iter()
        .map(|r| Ok((r.key(), encode_step(r, stack)?.z)))
        .collect::<Result<Vec<_>, SaeError>>()?;
    Ok(FeatureSet {
        segments: stack.segments(),
        rows,
        provenance: None,
    })
}
