//! Sparse feature vectors, layer segment maps and the encoded feature file.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::StepKey;
use crate::provenance::Provenance;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("sparse index {index} out of range for length {len}")]
    IndexOutOfRange { index: u32, len: usize },
    #[error("sparse indices must be strictly increasing (position {0})")]
    Unsorted(usize),
    #[error("indices and values differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("segments do not partition [0, {0})")]
    BadSegments(usize),
    #[error("feature file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse real vector storing only nonzero entries, indices ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    len: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn new(len: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self, FeatureError> {
        if indices.len() != values.len() {
            return Err(FeatureError::LengthMismatch(indices.len(), values.len()));
        }
        for (pos, w) in indices.windows(2).enumerate() {
            if w[0] >= w[1] {
                return Err(FeatureError::Unsorted(pos + 1));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= len {
                return Err(FeatureError::IndexOutOfRange { index: last, len });
            }
        }
        let mut v = Self { len, indices, values };
        v.prune();
        Ok(v)
    }

    /// Build from a dense slice, keeping only nonzeros.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self {
            len: dense.len(),
            indices,
            values,
        }
    }

    fn prune(&mut self) {
        let mut keep = 0;
        for i in 0..self.indices.len() {
            if self.values[i] != 0.0 {
                self.indices[keep] = self.indices[i];
                self.values[keep] = self.values[i];
                keep += 1;
            }
        }
        self.indices.truncate(keep);
        self.values.truncate(keep);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.indices.binary_search(&(index as u32)) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.len];
        for (i, v) in self.iter() {
            dense[i] = v;
        }
        dense
    }

    /// Append `other` after this vector, shifting its indices.
    pub fn extend(&mut self, other: &SparseVec) {
        let offset = self.len as u32;
        self.indices.extend(other.indices.iter().map(|i| i + offset));
        self.values.extend_from_slice(&other.values);
        self.len += other.len;
    }

    /// Copy with the given global indices set to zero.
    pub fn with_zeroed(&self, zeroed: &[usize]) -> SparseVec {
        let mut out = self.clone();
        for (i, v) in out.indices.iter().zip(out.values.iter_mut()) {
            if zeroed.contains(&(*i as usize)) {
                *v = 0.0;
            }
        }
        out.prune();
        out
    }

    /// Slice `[range)` as its own vector, indices rebased to 0.
    pub fn slice(&self, range: Range<usize>) -> SparseVec {
        let (indices, values) = self
            .iter()
            .filter(|(i, _)| range.contains(i))
            .map(|(i, v)| ((i - range.start) as u32, v))
            .unzip();
        SparseVec {
            len: range.len(),
            indices,
            values,
        }
    }
}

/// One layer's block inside the concatenated feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer_id: u32,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Ordered layer segments partitioning `[0, total)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentMap {
    segments: Vec<Segment>,
}

impl SegmentMap {
    /// Build from `(layer_id, feature_count)` pairs in stack order.
    pub fn from_sizes(sizes: impl IntoIterator<Item = (u32, usize)>) -> Self {
        let mut start = 0;
        let segments = sizes
            .into_iter()
            .map(|(layer_id, k)| {
                let seg = Segment {
                    layer_id,
                    start,
                    end: start + k,
                };
                start += k;
                seg
            })
            .collect();
        Self { segments }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut expected = 0;
        for seg in &self.segments {
            if seg.start != expected || seg.end < seg.start {
                return Err(FeatureError::BadSegments(self.total_len()));
            }
            expected = seg.end;
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.segments.iter().map(|s| s.layer_id).collect()
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_of(&self, layer_id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer_id == layer_id)
    }

    /// Map a global index to `(layer_id, in-layer feature id)`.
    pub fn locate(&self, global: usize) -> Option<(u32, usize)> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&global))
            .map(|s| (s.layer_id, global - s.start))
    }
}

/// Concatenated per-layer SAE features for one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatenatedFeatures {
    pub z: SparseVec,
    pub segments: SegmentMap,
}

impl ConcatenatedFeatures {
    pub fn layer(&self, layer_id: u32) -> Option<SparseVec> {
        self.segments.segment_of(layer_id).map(|s| self.z.slice(s.range()))
    }
}

/// Encoded corpus: one sparse vector per step, all sharing one segment map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub segments: SegmentMap,
    pub rows: Vec<(StepKey, SparseVec)>,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    segments: SegmentMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    trajectory_id: String,
    step_index: u32,
    indices: Vec<u32>,
    values: Vec<f64>,
}

const FEATURE_FORMAT: &str = "toolwatch-features";
const FEATURE_VERSION: u32 = 1;

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.segments.total_len()
    }

    pub fn get(&self, key: &StepKey) -> Option<&SparseVec> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// JSON lines: a header object, then one object per step.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let header = FeatureHeader {
            format: FEATURE_FORMAT.into(),
            version: FEATURE_VERSION,
            dim: self.dim(),
            count: self.rows.len(),
            segments: self.segments.clone(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for (key, z) in &self.rows {
            let line = FeatureLine {
                trajectory_id: key.trajectory_id.clone(),
                step_index: key.step_index,
                indices: z.indices().to_vec(),
                values: z.values().to_vec(),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, FeatureError> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: String| FeatureError::Parse { line, message };
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty feature file".into()))?;
        let header: FeatureHeader = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != FEATURE_FORMAT || header.version != FEATURE_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported feature file {} v{}", header.format, header.version),
            ));
        }
        header.segments.validate()?;
        let dim = header.segments.total_len();
        let mut rows = Vec::with_capacity(header.count);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FeatureLine = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let z = SparseVec::new(dim, rec.indices, rec.values).map_err(|e| parse_err(i + 1, e.to_string()))?;
            rows.push((StepKey::new(rec.trajectory_id, rec.step_index), z));
        }
        if rows.len() != header.count {
            return Err(parse_err(0, format!("header declares {} rows, found {}", header.count, rows.len())));
        }
        Ok(Self {
            segments: header.segments,
            rows,
            provenance: header.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_basics() {
        let v = SparseVec::from_dense(&[0.0, 2.0, 0.0, -1.0]);
        assert_eq!(v.nnz(), 2);
        assert_eq!(v.get(1), 2.0);
        assert_eq!(v.get(2), 0.0);
        assert_eq!(v.to_dense(), vec![0.0, 2.0, 0.0, -1.0]);
        assert_eq!(v.with_zeroed(&[1]).to_dense(), vec![0.0, 0.0, 0.0, -1.0]);
        assert_eq!(v.slice(1..3).to_dense(), vec![2.0, 0.0]);
    }

    #[test]
    fn sparse_validation() {
        assert!(SparseVec::new(3, vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseVec::new(3, vec![3], vec![1.0]).is_err());
        assert!(SparseVec::new(3, vec![0], vec![]).is_err());
        assert_eq!(SparseVec::new(3, vec![0, 2], vec![0.0, 1.0]).unwrap().nnz(), 1);
    }

    #[test]
    fn segments_locate() {
        let map = SegmentMap::from_sizes([(3, 4), (7, 4)]);
        map.validate().unwrap();
        assert_eq!(map.total_len(), 8);
        assert_eq!(map.locate(0), Some((3, 0)));
        assert_eq!(map.locate(5), Some((7, 1)));
        assert_eq!(map.locate(8), None);
    }

    #[test]
    fn feature_file_round_trip() {
        let segments = SegmentMap::from_sizes([(1, 2), (2, 3)]);
        let set = FeatureSet {
            segments,
            rows: vec![
                (StepKey::new("a", 0), SparseVec::from_dense(&[0.0, 0.1, 0.0, 3.25, 0.0])),
                (StepKey::new("a", 1), SparseVec::zeros(5)),
            ],
            provenance: None,
        };
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        assert_eq!(FeatureSet::read(buf.as_slice()).unwrap(), set);
    }
}
