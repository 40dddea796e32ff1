//! Pre-action monitoring of tool-using agents.
//!
//! Trajectories are turned into decision rows, per-step residual activations
//! are encoded with sparse autoencoders, and linear probes over the resulting
//! features predict whether a tool is needed and how risky it is. A monitor
//! compares those internal predictions with expected and actual behavior.

mod container;

pub mod analysis;
pub mod features;
pub mod ingest;
pub mod monitor;
pub mod probe;
pub mod provenance;
pub mod risk;
pub mod sae;
pub mod service;
pub mod store;

pub use features::{FeatureSet, SegmentMap, SparseVec};
pub use ingest::{DecisionRow, StepKey, Trajectory, TrajectoryStep};
pub use monitor::{Monitor, MonitorEvent, Outcome};
pub use probe::{ProbeKind, ProbeModel};
pub use risk::{RiskScheme, RiskTier};
pub use sae::{SaeLayer, SaeStack};
pub use store::{ActivationRecord, ActivationStore};
