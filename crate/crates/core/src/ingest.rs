//! Trajectory parsing and per-step decision rows.
//!
//! Two source shapes are supported:
//!
//! * trajectory-style records, one JSON object per line, each describing a
//!   single decision point (`trajectory_id`, `depth`, `role`, `text`, optional
//!   `gold_action` and `tools`);
//! * benchmark-style multi-turn episodes (`id`, `question` as a list of turns,
//!   `ground_truth` as a list of call strings per turn).
//!
//! Both are reduced to [`TrajectoryStep`]s and then to [`DecisionRow`]s.
//!
//! # Context serialization
//!
//! The context of decision `k` is built from steps `0..=k`:
//!
//! ```text
//! TOOLS: <tool list>\n            (only if the step carries one)
//! USER: <text>\n | ASSISTANT: <text>\n | TOOL_RESULT: <text>\n
//! TOOL_CALL: <name>(<arguments>)\n   (gold action of every step before k)
//! ```
//!
//! The gold action of step `k` itself is never part of its context. The
//! format is frozen: probe features are computed from these exact bytes.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::risk::RiskTier;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("duplicate step {step_index} in trajectory {trajectory_id:?} (line {line})")]
    DuplicateStep {
        trajectory_id: String,
        step_index: u32,
        line: usize,
    },
    #[error("episode {0:?} has no ground-truth annotations")]
    NoGroundTruth(String),
    #[error("episode {id:?}: {turns} turns but {annotations} ground-truth entries")]
    GroundTruthMismatch {
        id: String,
        turns: usize,
        annotations: usize,
    },
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    User,
    Assistant,
    ToolResult,
}

impl Actor {
    pub fn tag(self) -> &'static str {
        match self {
            Actor::User => "USER",
            Actor::Assistant => "ASSISTANT",
            Actor::ToolResult => "TOOL_RESULT",
        }
    }

    fn parse(role: &str) -> Option<Self> {
        match role.trim().to_ascii_lowercase().as_str() {
            "user" | "human" => Some(Actor::User),
            "assistant" | "model" => Some(Actor::Assistant),
            "tool" | "tool_result" | "function" | "observation" => Some(Actor::ToolResult),
            _ => None,
        }
    }
}

/// A tool call: name plus arguments carried as opaque text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolAction {
    pub name: String,
    pub arguments: String,
}

impl ToolAction {
    pub fn new(name: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arguments: arguments.into(),
        }
    }

    /// Serialized form used inside contexts.
    pub fn serialized(&self) -> String {
        format!("TOOL_CALL: {}({})\n", self.name, self.arguments)
    }
}

impl fmt::Display for ToolAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.arguments)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub trajectory_id: String,
    pub step_index: u32,
    pub actor: Actor,
    pub text: String,
    /// Gold next action; present only when it is a tool call.
    pub gold_action: Option<ToolAction>,
    /// Tool list visible to the model at this step, verbatim from the source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<String>,
}

impl TrajectoryStep {
    pub fn new(trajectory_id: impl Into<String>, step_index: u32, actor: Actor, text: impl Into<String>) -> Self {
        Self {
            trajectory_id: trajectory_id.into(),
            step_index,
            actor,
            text: text.into(),
            gold_action: None,
            tools: None,
        }
    }

    pub fn with_action(mut self, action: ToolAction) -> Self {
        self.gold_action = Some(action);
        self
    }

    pub fn with_tools(mut self, tools: impl Into<String>) -> Self {
        self.tools = Some(tools.into());
        self
    }

    fn serialize_input(&self, out: &mut String) {
        if let Some(tools) = &self.tools {
            out.push_str("TOOLS: ");
            out.push_str(tools);
            out.push('\n');
        }
        out.push_str(self.actor.tag());
        out.push_str(": ");
        out.push_str(&self.text);
        out.push('\n');
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<TrajectoryStep>,
}

/// One pre-action decision point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub trajectory_id: String,
    pub step_index: u32,
    pub context: String,
    #[serde(with = "label_bit")]
    pub tool_needed: bool,
    #[serde(default)]
    pub risk_tier: Option<RiskTier>,
    #[serde(default)]
    pub expected_tool: Option<String>,
}

impl DecisionRow {
    pub fn new(
        trajectory_id: impl Into<String>,
        step_index: u32,
        context: impl Into<String>,
        tool_needed: bool,
        expected_tool: Option<String>,
    ) -> Self {
        Self {
            trajectory_id: trajectory_id.into(),
            step_index,
            context: context.into(),
            tool_needed,
            risk_tier: None,
            expected_tool,
        }
    }

    pub fn key(&self) -> StepKey {
        StepKey::new(self.trajectory_id.clone(), self.step_index)
    }
}

/// (trajectory, step) identity shared by rows, activation records and features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepKey {
    pub trajectory_id: String,
    pub step_index: u32,
}

impl StepKey {
    pub fn new(trajectory_id: impl Into<String>, step_index: u32) -> Self {
        Self {
            trajectory_id: trajectory_id.into(),
            step_index,
        }
    }
}

impl fmt::Display for StepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.trajectory_id, self.step_index)
    }
}

mod label_bit {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Bit {
            Int(u64),
            Bool(bool),
        }
        match Bit::deserialize(d)? {
            Bit::Bool(b) => Ok(b),
            Bit::Int(0) => Ok(false),
            Bit::Int(1) => Ok(true),
            Bit::Int(n) => Err(de::Error::custom(format!("tool_needed must be 0 or 1, got {n}"))),
        }
    }
}

/// A skipped or rejected input record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub trajectories: Vec<Trajectory>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Parse trajectory-style records, grouping by trajectory and sorting by depth.
///
/// Malformed lines are skipped with a diagnostic; a trajectory whose depths
/// are not contiguous from 0 is dropped with a diagnostic. A repeated
/// `(trajectory_id, depth)` pair is a hard error.
pub fn parse_trajectories<R: BufRead>(reader: R) -> Result<ParseOutcome, IngestError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, TrajectoryStep)>> = HashMap::new();
    let mut diagnostics = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step = match parse_step_record(&line) {
            Ok(step) => step,
            Err(message) => {
                diagnostics.push(Diagnostic { line: line_no, message });
                continue;
            }
        };
        let group = groups.entry(step.trajectory_id.clone()).or_insert_with(|| {
            order.push(step.trajectory_id.clone());
            Vec::new()
        });
        if group.iter().any(|(_, s)| s.step_index == step.step_index) {
            return Err(IngestError::DuplicateStep {
                trajectory_id: step.trajectory_id,
                step_index: step.step_index,
                line: line_no,
            });
        }
        group.push((line_no, step));
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut steps = groups.remove(&id).unwrap_or_default();
        steps.sort_by_key(|(_, s)| s.step_index);
        let gap = steps
            .iter()
            .enumerate()
            .find(|(expected, (_, s))| s.step_index as usize != *expected);
        if let Some((expected, (line, s))) = gap {
            diagnostics.push(Diagnostic {
                line: *line,
                message: format!(
                    "trajectory {id:?} dropped: expected depth {expected}, found {}",
                    s.step_index
                ),
            });
            continue;
        }
        trajectories.push(Trajectory {
            id,
            steps: steps.into_iter().map(|(_, s)| s).collect(),
        });
    }
    Ok(ParseOutcome {
        trajectories,
        diagnostics,
    })
}

fn parse_step_record(line: &str) -> Result<TrajectoryStep, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let trajectory_id = match obj.get("trajectory_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing trajectory_id".into()),
    };
    let depth = obj
        .get("depth")
        .or_else(|| obj.get("step_index"))
        .and_then(Value::as_u64)
        .ok_or("missing or negative depth")?;
    let step_index = u32::try_from(depth).map_err(|_| "depth out of range".to_string())?;
    let role = obj.get("role").and_then(Value::as_str).ok_or("missing role")?;
    let actor = Actor::parse(role).ok_or_else(|| format!("unknown role {role:?}"))?;
    let text = obj
        .get("text")
        .or_else(|| obj.get("content"))
        .and_then(Value::as_str)
        .ok_or("missing text")?
        .to_string();
    let gold_action = match obj.get("gold_action") {
        None | Some(Value::Null) => None,
        Some(Value::Object(action)) => {
            let name = action
                .get("name")
                .and_then(Value::as_str)
                .filter(|n| !n.trim().is_empty())
                .ok_or("gold_action without a name")?;
            let arguments = action.get("arguments").map(opaque_text).unwrap_or_default();
            Some(ToolAction::new(name, arguments))
        }
        Some(_) => return Err("gold_action is not an object".into()),
    };
    let tools = match obj.get("tools") {
        None | Some(Value::Null) => None,
        Some(v) => Some(opaque_text(v)),
    };
    Ok(TrajectoryStep {
        trajectory_id,
        step_index,
        actor,
        text,
        gold_action,
        tools,
    })
}

/// Strings are taken verbatim; anything else as compact JSON.
fn opaque_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per step. Steps must already be sorted by `step_index`.
pub fn build_decision_rows(steps: &[TrajectoryStep]) -> Vec<DecisionRow> {
    let mut rows = Vec::with_capacity(steps.len());
    let mut context = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            if let Some(prev) = &steps[i - 1].gold_action {
                context.push_str(&prev.serialized());
            }
        }
        step.serialize_input(&mut context);
        rows.push(DecisionRow {
            trajectory_id: step.trajectory_id.clone(),
            step_index: step.step_index,
            context: context.clone(),
            tool_needed: step.gold_action.is_some(),
            risk_tier: None,
            expected_tool: step.gold_action.as_ref().map(|a| a.name.clone()),
        });
    }
    rows
}

#[derive(Debug, Clone, Deserialize)]
pub struct BfclMessage {
    pub role: String,
    pub content: String,
}

/// Benchmark multi-turn episode. `question[t]` holds the messages of turn `t`;
/// `ground_truth[t]` the gold call strings for that turn (possibly empty).
#[derive(Debug, Clone, Deserialize)]
pub struct BfclEpisode {
    pub id: String,
    pub question: Vec<Vec<BfclMessage>>,
    #[serde(default)]
    pub ground_truth: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub function: Option<Value>,
}

/// Split `name(args)` into a [`ToolAction`]; names stay verbatim.
pub fn parse_call(call: &str) -> ToolAction {
    let call = call.trim();
    match call.find('(') {
        Some(open) => {
            let name = call[..open].trim();
            let rest = &call[open + 1..];
            let args = rest.strip_suffix(')').unwrap_or(rest);
            ToolAction::new(name, args)
        }
        None => ToolAction::new(call, ""),
    }
}

/// Map a benchmark episode onto the trajectory step schema.
///
/// A turn with no gold calls becomes one no-tool step. A turn with `n` calls
/// becomes `n` steps: the first carries the turn's messages, the following
/// ones are empty tool-result steps (the benchmark records no results), each
/// with the next gold call as its action.
pub fn map_bfcl_episode(episode: &BfclEpisode) -> Result<Vec<TrajectoryStep>, IngestError> {
    let truth = episode
        .ground_truth
        .as_ref()
        .ok_or_else(|| IngestError::NoGroundTruth(episode.id.clone()))?;
    if truth.len() != episode.question.len() {
        return Err(IngestError::GroundTruthMismatch {
            id: episode.id.clone(),
            turns: episode.question.len(),
            annotations: truth.len(),
        });
    }
    let mut steps = Vec::new();
    for (turn, calls) in episode.question.iter().zip(truth) {
        let actor = turn
            .first()
            .and_then(|m| Actor::parse(&m.role))
            .unwrap_or(Actor::User);
        let text = turn.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let index = steps.len() as u32;
        let mut first = TrajectoryStep::new(episode.id.clone(), index, actor, text);
        if index == 0 {
            first.tools = episode.function.as_ref().map(opaque_text);
        }
        let mut calls = calls.iter().map(|c| parse_call(c));
        first.gold_action = calls.next();
        steps.push(first);
        for call in calls {
            let index = steps.len() as u32;
            steps.push(TrajectoryStep::new(episode.id.clone(), index, Actor::ToolResult, "").with_action(call));
        }
    }
    Ok(steps)
}

/// Parse a file of benchmark episodes. Unusable episodes are reported, not fatal.
pub fn parse_bfcl<R: BufRead>(reader: R) -> Result<ParseOutcome, IngestError> {
    let mut outcome = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let episode: BfclEpisode = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                outcome.diagnostics.push(Diagnostic {
                    line: line_no,
                    message: format!("invalid episode: {e}"),
                });
                continue;
            }
        };
        match map_bfcl_episode(&episode) {
            Ok(steps) => outcome.trajectories.push(Trajectory { id: episode.id, steps }),
            Err(e) => outcome.diagnostics.push(Diagnostic {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}

pub fn write_rows<W: Write>(mut writer: W, rows: &[DecisionRow]) -> Result<(), IngestError> {
    for row in rows {
        serde_json::to_writer(&mut writer, row).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_rows<R: BufRead>(reader: R) -> Result<Vec<DecisionRow>, IngestError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DecisionRow = serde_json::from_str(&line).map_err(|e| IngestError::BadRow {
            line: i + 1,
            message: e.to_string(),
        })?;
        if row.risk_tier.is_some() && !row.tool_needed {
            return Err(IngestError::BadRow {
                line: i + 1,
                message: "risk_tier set on a no-tool row".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Split rows into (train, test) by whole trajectories, seeded.
///
/// Trajectory ids are shuffled and the first `round(test_fraction · n)` go to
/// test; row order is preserved within each side.
pub fn split_by_trajectory(rows: &[DecisionRow], test_fraction: f64, seed: u64) -> (Vec<DecisionRow>, Vec<DecisionRow>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut ids: Vec<&str> = rows.iter().map(|r| r.trajectory_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = ((ids.len() as f64 * test_fraction.clamp(0.0, 1.0)).round() as usize).min(ids.len());
    let test_ids: std::collections::HashSet<&str> = ids[..n_test].iter().copied().collect();
    rows.iter()
        .cloned()
        .partition(|r| !test_ids.contains(r.trajectory_id.as_str()))
}
