//! Expected / internal / actual alignment per step, alerts and episode reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SparseVec;
use crate::ingest::{DecisionRow, StepKey};
use crate::probe::{ProbeError, ProbeKind, ProbeModel, ToolDecision};
use crate::risk::RiskTier;
use crate::sae::{SaeError, SaeStack};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("episode has no steps")]
    EmptyEpisode,
    #[error("corpus has no episodes")]
    EmptyCorpus,
    #[error("episode mixes trajectories {0} and {1}")]
    MixedEpisode(String, String),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Sae(#[from] SaeError),
}

/// Gold requirement; `tool_needed = None` when the task gives no gold label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub tool_needed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_tier: Option<RiskTier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_tool: Option<String>,
}

impl Expected {
    pub fn from_row(row: &DecisionRow) -> Self {
        Self {
            tool_needed: Some(row.tool_needed),
            risk_tier: row.risk_tier,
            expected_tool: row.expected_tool.clone(),
        }
    }

    pub fn unknown() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Internal {
    pub p_tool: f64,
    pub decision: ToolDecision,
    /// Threshold decision without the uncertainty band.
    pub predicted_tool: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<RiskTier>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actual {
    pub called: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
}

impl Actual {
    pub fn call(name: impl Into<String>) -> Self {
        Self {
            called: true,
            tool_name: Some(name.into()),
        }
    }

    pub fn no_call() -> Self {
        Self {
            called: false,
            tool_name: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CorrectNoTool,
    CorrectToolUse,
    MissedToolCall,
    UnnecessaryToolCall,
    HighRiskToolCall,
    UncertainDecision,
}

impl Outcome {
    pub const ALL: [Outcome; 6] = [
        Outcome::CorrectNoTool,
        Outcome::CorrectToolUse,
        Outcome::MissedToolCall,
        Outcome::UnnecessaryToolCall,
        Outcome::HighRiskToolCall,
        Outcome::UncertainDecision,
    ];

    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::CorrectNoTool | Outcome::CorrectToolUse)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::CorrectNoTool => "correct_no_tool",
            Outcome::CorrectToolUse => "correct_tool_use",
            Outcome::MissedToolCall => "missed_tool_call",
            Outcome::UnnecessaryToolCall => "unnecessary_tool_call",
            Outcome::HighRiskToolCall => "high_risk_tool_call",
            Outcome::UncertainDecision => "uncertain_decision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alert {
    MissedToolWarning,
    UnnecessaryCallWarning,
    RiskAlert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub step: StepKey,
    pub expected: Expected,
    pub internal: Internal,
    pub actual: Option<Actual>,
    pub outcome: Outcome,
    pub alerts: Vec<Alert>,
    /// Internal decision fell inside the uncertainty band.
    pub uncertain: bool,
    /// No actual action yet; the outcome compares expected with internal.
    pub provisional: bool,
}

fn basic_outcome(needed: bool, called: bool) -> Outcome {
    match (needed, called) {
        (false, false) => Outcome::CorrectNoTool,
        (true, true) => Outcome::CorrectToolUse,
        (true, false) => Outcome::MissedToolCall,
        (false, true) => Outcome::UnnecessaryToolCall,
    }
}

fn internal_call(decision: ToolDecision) -> Option<bool> {
    match decision {
        ToolDecision::Tool => Some(true),
        ToolDecision::NoTool => Some(false),
        ToolDecision::Uncertain => None,
    }
}

/// Outcome for one step.
///
/// With a gold label and an actual action the four basic outcomes apply.
/// Without an actual action the internal decision stands in for it. Without
/// a gold label the internal decision stands in for the expectation, and an
/// actual call the risk probe rates high is a high-risk tool call.
pub fn classify_outcome(expected: &Expected, internal: &Internal, actual: Option<&Actual>) -> Outcome {
    let uncertain = Outcome::UncertainDecision;
    match (expected.tool_needed, actual) {
        (Some(needed), Some(a)) => basic_outcome(needed, a.called),
        (Some(needed), None) => internal_call(internal.decision).map_or(uncertain, |c| basic_outcome(needed, c)),
        (None, Some(a)) => {
            if a.called && internal.tier == Some(RiskTier::High) {
                Outcome::HighRiskToolCall
            } else {
                internal_call(internal.decision).map_or(uncertain, |n| basic_outcome(n, a.called))
            }
        }
        (None, None) => internal_call(internal.decision).map_or(uncertain, |c| basic_outcome(c, c)),
    }
}

pub fn alerts_for(expected: &Expected, internal: &Internal, actual: Option<&Actual>) -> Vec<Alert> {
    let mut alerts = Vec::new();
    let Some(a) = actual else {
        return alerts;
    };
    if expected.tool_needed == Some(true) && !a.called {
        alerts.push(Alert::MissedToolWarning);
    }
    if expected.tool_needed == Some(false) && a.called {
        alerts.push(Alert::UnnecessaryCallWarning);
    }
    if a.called && internal.tier == Some(RiskTier::High) {
        alerts.push(Alert::RiskAlert);
    }
    alerts
}

pub fn step_verdict(step: StepKey, expected: Expected, internal: Internal, actual: Option<Actual>) -> MonitorEvent {
    let outcome = classify_outcome(&expected, &internal, actual.as_ref());
    let alerts = alerts_for(&expected, &internal, actual.as_ref());
    MonitorEvent {
        step,
        uncertain: internal.decision == ToolDecision::Uncertain,
        provisional: actual.is_none(),
        expected,
        internal,
        actual,
        outcome,
        alerts,
    }
}

impl MonitorEvent {
    pub fn tool_required(&self) -> bool {
        self.expected.tool_needed == Some(true)
    }

    pub fn missed_tool(&self) -> bool {
        self.tool_required() && self.actual.as_ref().is_some_and(|a| !a.called)
    }

    pub fn unnecessary_call(&self) -> bool {
        self.expected.tool_needed == Some(false) && self.actual.as_ref().is_some_and(|a| a.called)
    }

    /// Some(correct) when a call happened and a gold tool name exists.
    pub fn naming(&self) -> Option<bool> {
        let a = self.actual.as_ref().filter(|a| a.called)?;
        let want = self.expected.expected_tool.as_ref()?;
        Some(a.tool_name.as_ref() == Some(want))
    }

    pub fn probe_catch(&self) -> bool {
        self.missed_tool() && self.internal.decision == ToolDecision::Tool
    }
}

/// Counts behind the episode and corpus rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub steps: usize,
    pub correct_steps: usize,
    pub tool_required_observed: usize,
    pub missed: usize,
    pub no_tool_observed: usize,
    pub unnecessary: usize,
    pub named_calls: usize,
    pub correctly_named: usize,
    pub probe_catches: usize,
    pub expected_actual_pairs: usize,
    pub expected_actual_agree: usize,
    pub expected_internal_pairs: usize,
    pub expected_internal_agree: usize,
}

impl StepCounts {
    pub fn add(&mut self, e: &MonitorEvent) {
        self.steps += 1;
        self.correct_steps += usize::from(e.outcome.is_correct());
        if let (Some(needed), Some(a)) = (e.expected.tool_needed, e.actual.as_ref()) {
            if needed {
                self.tool_required_observed += 1;
            } else {
                self.no_tool_observed += 1;
            }
            self.expected_actual_pairs += 1;
            self.expected_actual_agree += usize::from(needed == a.called);
        }
        self.missed += usize::from(e.missed_tool());
        self.unnecessary += usize::from(e.unnecessary_call());
        if let Some(ok) = e.naming() {
            self.named_calls += 1;
            self.correctly_named += usize::from(ok);
        }
        self.probe_catches += usize::from(e.probe_catch());
        if let Some(needed) = e.expected.tool_needed {
            self.expected_internal_pairs += 1;
            self.expected_internal_agree += usize::from(needed == e.internal.predicted_tool);
        }
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a MonitorEvent>) -> Self {
        let mut c = Self::default();
        events.into_iter().for_each(|e| c.add(e));
        c
    }
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode_id: String,
    pub n_steps: usize,
    pub step_accuracy: f64,
    pub missed_tool_rate: f64,
    pub unnecessary_call_rate: f64,
    pub tool_naming_accuracy: f64,
    pub probe_catch_rate: f64,
    pub fully_correct: bool,
    pub first_failure_step: Option<usize>,
    pub progress_before_failure: f64,
    pub counts: StepCounts,
}

pub fn episode_report(events: &[MonitorEvent]) -> Result<EpisodeReport, MonitorError> {
    let first = events.first().ok_or(MonitorError::EmptyEpisode)?;
    if let Some(other) = events.iter().find(|e| e.step.trajectory_id != first.step.trajectory_id) {
        return Err(MonitorError::MixedEpisode(
            first.step.trajectory_id.clone(),
            other.step.trajectory_id.clone(),
        ));
    }
    let c = StepCounts::from_events(events);
    let first_failure_step = events.iter().position(|e| !e.outcome.is_correct());
    Ok(EpisodeReport {
        episode_id: first.step.trajectory_id.clone(),
        n_steps: events.len(),
        step_accuracy: rate(c.correct_steps, c.steps),
        missed_tool_rate: rate(c.missed, c.tool_required_observed),
        unnecessary_call_rate: rate(c.unnecessary, c.no_tool_observed),
        tool_naming_accuracy: rate(c.correctly_named, c.named_calls),
        probe_catch_rate: rate(c.probe_catches, c.missed),
        fully_correct: first_failure_step.is_none(),
        first_failure_step,
        progress_before_failure: first_failure_step.map_or(1.0, |f| f as f64 / events.len() as f64),
        counts: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub episodes: usize,
    pub steps: usize,
    pub step_accuracy: f64,
    pub expected_actual_agreement: f64,
    pub expected_internal_agreement: f64,
    pub missed_tool_rate: f64,
    pub unnecessary_call_rate: f64,
    pub tool_naming_accuracy: f64,
    pub probe_catch_rate: f64,
    pub fully_correct_episodes: usize,
    pub episode_success: f64,
    /// Over failing episodes only; `None` when every episode is correct.
    pub mean_first_failure_step: Option<f64>,
    pub mean_progress_before_failure: Option<f64>,
    pub counts: StepCounts,
}

/// Pooled step rates come from `events`; episode-level figures from `reports`.
pub fn corpus_summary(reports: &[EpisodeReport], events: &[MonitorEvent]) -> Result<CorpusSummary, MonitorError> {
    if reports.is_empty() {
        return Err(MonitorError::EmptyCorpus);
    }
    let c = StepCounts::from_events(events);
    let failing: Vec<&EpisodeReport> = reports.iter().filter(|r| !r.fully_correct).collect();
    let mean = |f: &dyn Fn(&EpisodeReport) -> f64| {
        (!failing.is_empty()).then(|| failing.iter().map(|r| f(r)).sum::<f64>() / failing.len() as f64)
    };
    let fully_correct_episodes = reports.len() - failing.len();
    Ok(CorpusSummary {
        episodes: reports.len(),
        steps: c.steps,
        step_accuracy: rate(c.correct_steps, c.steps),
        expected_actual_agreement: rate(c.expected_actual_agree, c.expected_actual_pairs),
        expected_internal_agreement: rate(c.expected_internal_agree, c.expected_internal_pairs),
        missed_tool_rate: rate(c.missed, c.tool_required_observed),
        unnecessary_call_rate: rate(c.unnecessary, c.no_tool_observed),
        tool_naming_accuracy: rate(c.correctly_named, c.named_calls),
        probe_catch_rate: rate(c.probe_catches, c.missed),
        fully_correct_episodes,
        episode_success: rate(fully_correct_episodes, reports.len()),
        mean_first_failure_step: mean(&|r| r.first_failure_step.expect("failing episode") as f64),
        mean_progress_before_failure: mean(&|r| r.progress_before_failure),
        counts: c,
    })
}

/// Group events by trajectory (first-seen order) and summarize.
pub fn summarize_events(events: &[MonitorEvent]) -> Result<(Vec<EpisodeReport>, CorpusSummary), MonitorError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<MonitorEvent>> = std::collections::HashMap::new();
    for e in events {
        let id = e.step.trajectory_id.as_str();
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(e.clone());
    }
    let reports = order
        .iter()
        .map(|id| {
            let mut evs = groups.remove(id).expect("grouped");
            evs.sort_by_key(|e| e.step.step_index);
            episode_report(&evs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = corpus_summary(&reports, events)?;
    Ok((reports, summary))
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

pub fn format_corpus_summary(s: &CorpusSummary) -> String {
    let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "n/a".to_string(), f);
    let rows = [
        ("Episodes", s.episodes.to_string()),
        ("Steps", s.steps.to_string()),
        ("Step accuracy", pct(s.step_accuracy)),
        ("Expected-Actual agreement", pct(s.expected_actual_agreement)),
        ("Expected-Internal agreement", pct(s.expected_internal_agreement)),
        ("Missed-tool-call rate", pct(s.missed_tool_rate)),
        ("Unnecessary-call rate", pct(s.unnecessary_call_rate)),
        ("Tool naming accuracy", pct(s.tool_naming_accuracy)),
        ("Probe catch (missed tool)", pct(s.probe_catch_rate)),
        (
            "Fully correct episodes",
            format!("{}/{} ({})", s.fully_correct_episodes, s.episodes, pct(s.episode_success)),
        ),
        ("Mean first-failure step", opt(s.mean_first_failure_step, &|v| format!("{v:.2}"))),
        ("Mean progress before failure", opt(s.mean_progress_before_failure, &pct)),
    ];
    rows.iter().map(|(k, v)| format!("{k:<30} {v:>16}\n")).collect()
}

/// SAE stack plus probes; immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Monitor {
    stack: SaeStack,
    tool_need: ProbeModel,
    tool_risk: Option<ProbeModel>,
}

impl Monitor {
    pub fn new(stack: SaeStack, tool_need: ProbeModel, tool_risk: Option<ProbeModel>) -> Result<Self, MonitorError> {
        if tool_need.kind != ProbeKind::ToolNeed {
            return Err(MonitorError::Setup("first probe must be a tool_need probe".into()));
        }
        let dim = stack.total_features();
        for m in std::iter::once(&tool_need).chain(tool_risk.as_ref()) {
            if m.feature_dim != dim {
                return Err(MonitorError::Setup(format!(
                    "{} probe expects {} features, SAE stack produces {dim}",
                    m.kind, m.feature_dim
                )));
            }
        }
        if tool_risk.as_ref().is_some_and(|m| m.kind != ProbeKind::ToolRisk) {
            return Err(MonitorError::Setup("second probe must be a tool_risk probe".into()));
        }
        Ok(Self {
            stack,
            tool_need,
            tool_risk,
        })
    }

    pub fn stack(&self) -> &SaeStack {
        &self.stack
    }

    pub fn internal(&self, z: &SparseVec) -> Result<Internal, MonitorError> {
        let need = self.tool_need.predict_tool_need(z)?;
        let risk = self.tool_risk.as_ref().map(|m| m.predict_risk(z)).transpose()?;
        Ok(Internal {
            p_tool: need.p_tool,
            decision: need.decision,
            predicted_tool: need.predicted_tool,
            risk: risk.map(|r| r.p),
            tier: risk.map(|r| r.tier),
        })
    }

    pub fn encode<'a>(&self, lookup: impl Fn(u32) -> Option<&'a [f32]>) -> Result<SparseVec, MonitorError> {
        Ok(self.stack.encode_vectors(lookup)?.z)
    }

    pub fn observe<'a>(
        &self,
        step: StepKey,
        lookup: impl Fn(u32) -> Option<&'a [f32]>,
        expected: Expected,
        actual: Option<Actual>,
    ) -> Result<MonitorEvent, MonitorError> {
        let internal = self.internal(&self.encode(lookup)?)?;
        Ok(step_verdict(step, expected, internal, actual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn internal(p_tool: f64, decision: ToolDecision, tier: Option<RiskTier>) -> Internal {
        Internal {
            p_tool,
            decision,
            predicted_tool: p_tool >= 0.5,
            risk: None,
            tier,
        }
    }

    fn expect(needed: bool, tool: Option<&str>) -> Expected {
        Expected {
            tool_needed: Some(needed),
            risk_tier: None,
            expected_tool: tool.map(String::from),
        }
    }

    fn key(t: &str, i: u32) -> StepKey {
        StepKey::new(t, i)
    }

    #[test]
    fn missed_call_caught_by_probe() {
        let e = step_verdict(
            key("a", 0),
            expect(true, Some("f")),
            internal(0.9, ToolDecision::Tool, None),
            Some(Actual::no_call()),
        );
        assert_eq!(e.outcome, Outcome::MissedToolCall);
        assert_eq!(e.alerts, vec![Alert::MissedToolWarning]);
        assert!(e.probe_catch());
    }

    #[test]
    fn unnecessary_high_risk_call() {
        let e = step_verdict(
            key("a", 0),
            expect(false, None),
            internal(0.8, ToolDecision::Tool, Some(RiskTier::High)),
            Some(Actual::call("rm")),
        );
        assert_eq!(e.outcome, Outcome::UnnecessaryToolCall);
        assert_eq!(e.alerts, vec![Alert::UnnecessaryCallWarning, Alert::RiskAlert]);
    }

    #[test]
    fn bfcl_first_step() {
        let mut i = internal(0.997, ToolDecision::Tool, Some(RiskTier::High));
        i.risk = Some([0.014, 0.002, 0.984]);
        let e = step_verdict(
            key("multi_turn_base_102", 0),
            Expected {
                tool_needed: Some(true),
                risk_tier: Some(RiskTier::High),
                expected_tool: Some("place_order".into()),
            },
            i,
            Some(Actual::call("place_order")),
        );
        assert_eq!(e.outcome, Outcome::CorrectToolUse);
        assert_eq!(e.alerts, vec![Alert::RiskAlert]);
        assert_eq!(e.naming(), Some(true));
    }

    #[test]
    fn pre_execution_is_provisional() {
        let e = step_verdict(
            key("a", 0),
            expect(true, None),
            internal(0.2, ToolDecision::NoTool, None),
            None,
        );
        assert!(e.provisional);
        assert_eq!(e.outcome, Outcome::MissedToolCall);
        assert!(e.alerts.is_empty());
        let e = step_verdict(key("a", 0), expect(true, None), internal(0.5, ToolDecision::Uncertain, None), None);
        assert_eq!(e.outcome, Outcome::UncertainDecision);
        assert!(e.uncertain);
    }

    #[test]
    fn unlabeled_high_risk_call() {
        let e = step_verdict(
            key("a", 0),
            Expected::unknown(),
            internal(0.9, ToolDecision::Tool, Some(RiskTier::High)),
            Some(Actual::call("sendemail")),
        );
        assert_eq!(e.outcome, Outcome::HighRiskToolCall);
        assert_eq!(e.alerts, vec![Alert::RiskAlert]);
    }

    fn crafted(outcomes: &[(bool, bool)]) -> Vec<MonitorEvent> {
        outcomes
            .iter()
            .enumerate()
            .map(|(i, &(needed, called))| {
                step_verdict(
                    key("ep", i as u32),
                    expect(needed, Some("f")),
                    internal(0.9, ToolDecision::Tool, None),
                    Some(if called { Actual::call("f") } else { Actual::no_call() }),
                )
            })
            .collect()
    }

    #[test]
    fn four_step_episode() {
        let events = crafted(&[(true, true), (true, false), (false, false), (true, true)]);
        let r = episode_report(&events).unwrap();
        assert_eq!(r.step_accuracy, 0.75);
        assert_eq!(r.first_failure_step, Some(1));
        assert_eq!(r.progress_before_failure, 0.25);
        assert!(!r.fully_correct);
        assert!((r.missed_tool_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.probe_catch_rate, 1.0);
    }

    #[test]
    fn all_correct_episode() {
        let events = crafted(&[(true, true), (false, false)]);
        let r = episode_report(&events).unwrap();
        assert!(r.fully_correct);
        assert_eq!(r.progress_before_failure, 1.0);
        assert_eq!(r.first_failure_step, None);
        let s = corpus_summary(&[r], &events).unwrap();
        assert_eq!(s.expected_actual_agreement, 1.0);
        assert_eq!(s.episode_success, 1.0);
        assert_eq!(s.mean_first_failure_step, None);
        assert!(format_corpus_summary(&s).contains("Step accuracy"));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(episode_report(&[]), Err(MonitorError::EmptyEpisode)));
        assert!(matches!(corpus_summary(&[], &[]), Err(MonitorError::EmptyCorpus)));
    }

    #[test]
    fn summarize_groups_by_trajectory() {
        let mut events = crafted(&[(true, true), (true, false)]);
        let mut other = crafted(&[(false, false)]);
        other[0].step = key("other", 0);
        events.extend(other);
        let (reports, s) = summarize_events(&events).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(s.fully_correct_episodes, 1);
        assert_eq!(s.mean_first_failure_step, Some(1.0));
        assert_eq!(s.mean_progress_before_failure, Some(0.5));
    }
}
