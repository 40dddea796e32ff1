//! Feature ranking, layer concentration, latent ablation and evidence packets.
//!
//! Ablation zeroes raw SAE latents before standardization, so an ablated
//! feature enters the probe as `-μ/s` rather than 0.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{SegmentMap, SparseVec};
use crate::ingest::StepKey;
use crate::probe::{ProbeError, ProbeKind, ProbeModel};

/// Snippets keep the tail of the context, where the pending decision sits.
pub const SNIPPET_CHARS: usize = 240;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("model has no segment map; layer attribution is impossible")]
    MissingSegments,
    #[error("feature {0} is not among the model's selected features")]
    NotSelected(usize),
    #[error("feature {index} is outside the {dim}-wide feature space")]
    OutOfRange { index: usize, dim: usize },
    #[error("top_k {top_k} exceeds the {available} ranked features")]
    TopKTooLarge { top_k: usize, available: usize },
    #[error("no steps to ablate")]
    NoSteps,
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScore {
    /// |w| on the standardized scale (max over classes for tool_risk).
    #[default]
    AbsWeight,
    /// |training mean activation × w|.
    MeanActivationWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub layer_id: u32,
    pub feature_id: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Positions into `m.selected` ordered by score, descending; ties to the
/// lower feature index.
fn ranked_positions(m: &ProbeModel, score: RankScore) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..m.selected.len())
        .map(|c| {
            let w = m.weights.iter().map(|row| row[c].abs()).fold(0.0, f64::max);
            let s = match score {
                RankScore::AbsWeight => w,
                RankScore::MeanActivationWeight => w * m.standardizer.mean[c].abs(),
            };
            (c, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Selected feature indices in rank order; needs no segment map.
pub fn ranked_indices(m: &ProbeModel, score: RankScore) -> Vec<usize> {
    ranked_positions(m, score)
        .into_iter()
        .map(|(c, _)| m.selected[c])
        .collect()
}

pub fn rank_features(m: &ProbeModel, score: RankScore) -> Result<Vec<RankedFeature>, AnalysisError> {
    let segments = m.segments.as_ref().ok_or(AnalysisError::MissingSegments)?;
    ranked_positions(m, score)
        .into_iter()
        .map(|(c, s)| {
            let index = m.selected[c];
            let (layer_id, feature_id) = segments.locate(index).ok_or(AnalysisError::OutOfRange {
                index,
                dim: segments.total_len(),
            })?;
            Ok(RankedFeature {
                index,
                layer_id,
                feature_id,
                score: s,
                label: None,
            })
        })
        .collect()
}

/// Count of the first `top_k` ranked features per layer. Every layer in
/// `segments` appears, with zero counts where nothing ranked.
pub fn layer_concentration(
    ranked: &[RankedFeature],
    top_k: usize,
    segments: &SegmentMap,
) -> Result<BTreeMap<u32, usize>, AnalysisError> {
    if top_k > ranked.len() {
        return Err(AnalysisError::TopKTooLarge {
            top_k,
            available: ranked.len(),
        });
    }
    let mut hist: BTreeMap<u32, usize> = segments.layer_ids().into_iter().map(|l| (l, 0)).collect();
    for f in &ranked[..top_k] {
        *hist.entry(f.layer_id).or_insert(0) += 1;
    }
    Ok(hist)
}

pub fn format_concentration(hist: &BTreeMap<u32, usize>) -> String {
    hist.iter()
        .rev()
        .map(|(l, c)| format!("L{l}={c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub step: StepKey,
    pub baseline_p: f64,
    pub ablated_p: f64,
    /// `ablated_p - baseline_p`
    pub delta_p: f64,
    pub flip: bool,
}

/// Zero the raw latents at `indices` and re-run the tool-need probe.
pub fn ablate(m: &ProbeModel, step: StepKey, z: &SparseVec, indices: &[usize]) -> Result<AblationResult, AnalysisError> {
    if let Some(&bad) = indices.iter().find(|j| m.selected.binary_search(j).is_err()) {
        return Err(AnalysisError::NotSelected(bad));
    }
    let baseline = m.predict_tool_need(z)?;
    let ablated = m.predict_tool_need(&z.with_zeroed(indices))?;
    Ok(AblationResult {
        step,
        baseline_p: baseline.p_tool,
        ablated_p: ablated.p_tool,
        delta_p: ablated.p_tool - baseline.p_tool,
        flip: baseline.predicted_tool != ablated.predicted_tool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetKind {
    Top,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetSummary {
    pub name: String,
    pub kind: AblationSetKind,
    pub indices: Vec<usize>,
    pub flips: usize,
    pub n_steps: usize,
    pub mean_abs_delta: f64,
    pub details: Vec<AblationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub seed: u64,
    pub sets: Vec<AblationSetSummary>,
}

impl AblationStudy {
    pub fn set(&self, name: &str) -> Option<&AblationSetSummary> {
        self.sets.iter().find(|s| s.name == name)
    }
}

fn run_set(
    m: &ProbeModel,
    steps: &[(StepKey, SparseVec)],
    name: String,
    kind: AblationSetKind,
    indices: Vec<usize>,
) -> Result<AblationSetSummary, AnalysisError> {
    let details = steps
        .iter()
        .map(|(k, z)| ablate(m, k.clone(), z, &indices))
        .collect::<Result<Vec<_>, _>>()?;
    let flips = details.iter().filter(|d| d.flip).count();
    let mean_abs_delta = details.iter().map(|d| d.delta_p.abs()).sum::<f64>() / details.len() as f64;
    Ok(AblationSetSummary {
        name,
        kind,
        indices,
        flips,
        n_steps: details.len(),
        mean_abs_delta,
        details,
    })
}

/// Ablate the top-k sets for every size in `sizes`, each followed by a
/// size-matched random control drawn uniformly from the selected features.
pub fn ablation_study(
    m: &ProbeModel,
    steps: &[(StepKey, SparseVec)],
    sizes: &[usize],
    score: RankScore,
    seed: u64,
) -> Result<AblationStudy, AnalysisError> {
    if m.kind != ProbeKind::ToolNeed {
        return Err(ProbeError::WrongKind {
            expected: ProbeKind::ToolNeed,
            found: m.kind,
        }
        .into());
    }
    if steps.is_empty() {
        return Err(AnalysisError::NoSteps);
    }
    let order = ranked_indices(m, score);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    for &k in sizes {
        let k = k.min(order.len());
        let mut top = order[..k].to_vec();
        top.sort_unstable();
        sets.push(run_set(m, steps, format!("top-{k}"), AblationSetKind::Top, top)?);
        let mut random: Vec<usize> = sample(&mut rng, m.selected.len(), k)
            .into_iter()
            .map(|c| m.selected[c])
            .collect();
        random.sort_unstable();
        sets.push(run_set(m, steps, format!("random-{k}"), AblationSetKind::Random, random)?);
    }
    Ok(AblationStudy { seed, sets })
}

/// `n` distinct positions out of `total`, uniformly with a fixed seed, ascending.
pub fn sample_steps(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, total, n.min(total)).into_vec();
    picked.sort_unstable();
    picked
}

pub fn format_ablation_table(study: &AblationStudy) -> String {
    let mut out = format!("{:<12} {:>9} {:>7} {:>12}\n", "set", "# latents", "flips", "mean |dp|");
    for s in &study.sets {
        out.push_str(&format!(
            "{:<12} {:>9} {:>7} {:>12.3}\n",
            s.name,
            s.indices.len(),
            format!("{}/{}", s.flips, s.n_steps),
            s.mean_abs_delta
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub step: StepKey,
    pub activation: f64,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePacket {
    pub feature: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_id: Option<usize>,
    pub never_active: bool,
    pub entries: Vec<EvidenceEntry>,
    /// Filled in by the external labeler.
    #[serde(default)]
    pub label: Option<String>,
}

pub fn snippet(context: &str) -> String {
    let n = context.chars().count();
    context.chars().skip(n.saturating_sub(SNIPPET_CHARS)).collect()
}

/// Top `top_n` rows by activation of `feature` (ties by step key).
pub fn export_feature_evidence(
    feature: usize,
    corpus: &[(StepKey, SparseVec)],
    contexts: &HashMap<StepKey, String>,
    segments: Option<&SegmentMap>,
    top_n: usize,
) -> Result<EvidencePacket, AnalysisError> {
    if let Some((_, z)) = corpus.iter().find(|(_, z)| feature >= z.len()) {
        return Err(AnalysisError::OutOfRange {
            index: feature,
            dim: z.len(),
        });
    }
    let mut active: Vec<(&StepKey, f64)> = corpus
        .iter()
        .map(|(k, z)| (k, z.get(feature)))
        .filter(|(_, v)| *v != 0.0)
        .collect();
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let entries: Vec<EvidenceEntry> = active
        .into_iter()
        .take(top_n)
        .map(|(k, v)| EvidenceEntry {
            step: k.clone(),
            activation: v,
            snippet: contexts.get(k).map(|c| snippet(c)).unwrap_or_default(),
        })
        .collect();
    let located = segments.and_then(|s| s.locate(feature));
    Ok(EvidencePacket {
        feature,
        layer_id: located.map(|(l, _)| l),
        feature_id: located.map(|(_, f)| f),
        never_active: entries.is_empty(),
        entries,
        label: None,
    })
}

/// Attach packet labels, verbatim, to the matching ranked features.
pub fn import_feature_labels(mut ranked: Vec<RankedFeature>, packets: &[EvidencePacket]) -> Vec<RankedFeature> {
    let labels: HashMap<usize, &String> = packets
        .iter()
        .filter_map(|p| p.label.as_ref().map(|l| (p.feature, l)))
        .collect();
    for f in &mut ranked {
        if let Some(l) = labels.get(&f.index) {
            f.label = Some((*l).clone());
        }
    }
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{sigmoid, Standardizer};

    fn model(weights: Vec<f64>, bias: f64, segments: Option<SegmentMap>) -> ProbeModel {
        let p = weights.len();
        let mut m = ProbeModel::from_parts(
            ProbeKind::ToolNeed,
            p,
            (0..p).collect(),
            Standardizer::identity(p),
            vec![weights],
            vec![bias],
        )
        .unwrap();
        m.segments = segments;
        m
    }

    fn key(i: u32) -> StepKey {
        StepKey {
            trajectory_id: "t".into(),
            step_index: i,
        }
    }

    #[test]
    fn ranks_by_absolute_weight() {
        let m = model(vec![0.1, -0.9, 0.5], 0.0, Some(SegmentMap::from_sizes([(3, 1), (7, 2)])));
        let ranked = rank_features(&m, RankScore::AbsWeight).unwrap();
        let order: Vec<usize> = ranked.iter().map(|f| f.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!((ranked[0].layer_id, ranked[0].feature_id), (7, 0));
        assert_eq!((ranked[2].layer_id, ranked[2].feature_id), (3, 0));
    }

    #[test]
    fn ranking_needs_segments() {
        let m = model(vec![1.0], 0.0, None);
        assert!(matches!(rank_features(&m, RankScore::AbsWeight), Err(AnalysisError::MissingSegments)));
    }

    #[test]
    fn equal_weights_rank_by_index() {
        let m = model(vec![0.5, -0.5, 0.5], 0.0, None);
        assert_eq!(ranked_indices(&m, RankScore::AbsWeight), vec![0, 1, 2]);
    }

    #[test]
    fn uniform_weights_spread_evenly() {
        let seg = SegmentMap::from_sizes([(3, 10), (7, 10), (11, 10), (15, 10)]);
        let m = model(vec![1.0; 40], 0.0, Some(seg.clone()));
        // interleave so ties by index do not favor the first layer
        let ranked = rank_features(&m, RankScore::AbsWeight).unwrap();
        let mut interleaved = Vec::new();
        for i in 0..10 {
            for l in 0..4 {
                interleaved.push(ranked[l * 10 + i].clone());
            }
        }
        let hist = layer_concentration(&interleaved, 20, &seg).unwrap();
        assert!(hist.values().all(|&c| c == 5));
        assert_eq!(hist.values().sum::<usize>(), 20);
    }

    #[test]
    fn concentration_rejects_large_top_k() {
        let seg = SegmentMap::from_sizes([(3, 2)]);
        let m = model(vec![1.0, 2.0], 0.0, Some(seg.clone()));
        let ranked = rank_features(&m, RankScore::AbsWeight).unwrap();
        assert!(layer_concentration(&ranked, 3, &seg).is_err());
    }

    #[test]
    fn empty_ablation_is_identity() {
        let m = model(vec![0.3, -1.2, 0.8], 0.1, None);
        let z = SparseVec::from_dense(&[1.0, 2.0, 0.5]);
        let r = ablate(&m, key(0), &z, &[]).unwrap();
        assert_eq!(r.delta_p, 0.0);
        assert!(!r.flip);
    }

    #[test]
    fn full_ablation_gives_bias_probability() {
        let m = model(vec![0.3, 0.0, 0.8], -0.4, None);
        let z = SparseVec::from_dense(&[1.0, 2.0, 0.5]);
        let r = ablate(&m, key(0), &z, &[0, 2]).unwrap();
        assert!((r.ablated_p - sigmoid(-0.4)).abs() <= 1e-12);
    }

    #[test]
    fn zero_weight_ablation_is_noop() {
        let m = model(vec![0.3, 0.0, 0.8, 0.0], -0.4, None);
        let z = SparseVec::from_dense(&[1.0, 2.0, 0.5, 3.0]);
        let r = ablate(&m, key(0), &z, &[1, 3]).unwrap();
        assert_eq!(r.delta_p, 0.0);
    }

    #[test]
    fn ablation_outside_selection_rejected() {
        let mut m = model(vec![1.0, 1.0], 0.0, None);
        m.selected = vec![0, 2];
        m.feature_dim = 3;
        let z = SparseVec::zeros(3);
        assert!(matches!(ablate(&m, key(0), &z, &[1]), Err(AnalysisError::NotSelected(1))));
    }

    #[test]
    fn study_is_seeded() {
        let m = model(vec![2.0, 1.5, 0.0, 0.0, 0.01, 0.0], 0.0, None);
        let steps: Vec<(StepKey, SparseVec)> = (0..4)
            .map(|i| (key(i), SparseVec::from_dense(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0])))
            .collect();
        let a = ablation_study(&m, &steps, &[2], RankScore::AbsWeight, 9).unwrap();
        let b = ablation_study(&m, &steps, &[2], RankScore::AbsWeight, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.set("top-2").unwrap().indices, vec![0, 1]);
        assert_eq!(a.set("random-2").unwrap().indices.len(), 2);
        assert!(format_ablation_table(&a).contains("top-2"));
    }

    #[test]
    fn sample_steps_is_deterministic() {
        let a = sample_steps(100, 10, 4);
        assert_eq!(a.len(), 10);
        assert_eq!(a, sample_steps(100, 10, 4));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_steps(3, 10, 4), vec![0, 1, 2]);
    }

    #[test]
    fn evidence_packet_and_label_round_trip() {
        let corpus: Vec<(StepKey, SparseVec)> = (0..6)
            .map(|i| {
                let v = if i % 2 == 0 { i as f64 + 1.0 } else { 0.0 };
                (key(i), SparseVec::from_dense(&[0.0, v]))
            })
            .collect();
        let contexts: HashMap<StepKey, String> =
            (0..6).map(|i| (key(i), format!("{}step {i}", "x".repeat(300)))).collect();
        let packet = export_feature_evidence(1, &corpus, &contexts, None, 5).unwrap();
        assert_eq!(packet.entries.len(), 3);
        assert_eq!(packet.entries[0].step, key(4));
        assert_eq!(packet.entries[0].snippet.chars().count(), SNIPPET_CHARS);
        assert!(packet.entries[0].snippet.ends_with("step 4"));

        let empty = export_feature_evidence(0, &corpus, &contexts, None, 5).unwrap();
        assert!(empty.never_active && empty.entries.is_empty());

        let mut labeled = packet.clone();
        labeled.label = Some("numbers and numerical data".into());
        let m = model(vec![0.2, 0.9], 0.0, Some(SegmentMap::from_sizes([(23, 2)])));
        let ranked = import_feature_labels(rank_features(&m, RankScore::AbsWeight).unwrap(), &[labeled]);
        assert_eq!(ranked[0].label.as_deref(), Some("numbers and numerical data"));
        assert_eq!(ranked[1].label, None);
    }
}
