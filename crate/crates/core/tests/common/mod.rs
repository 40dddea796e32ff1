#![allow(dead_code)]

use std::path::PathBuf;

use toolwatch::features::FeatureSet;
use toolwatch::ingest::split_by_trajectory;
use toolwatch::monitor::Monitor;
use toolwatch::probe::{assemble, train_probe, ProbeKind, ProbeModel, TrainConfig};
use toolwatch::sae::encode_store;
use toolwatch::store::{generate_synthetic, SynthSpec, SyntheticData};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub struct Planted {
    pub data: SyntheticData,
    pub features: FeatureSet,
    pub tool_need: ProbeModel,
    pub tool_risk: ProbeModel,
}

impl Planted {
    pub fn monitor(&self) -> Monitor {
        Monitor::new(
            self.data.stack.clone(),
            self.tool_need.clone(),
            Some(self.tool_risk.clone()),
        )
        .unwrap()
    }
}

pub fn train(kind: ProbeKind, data: &SyntheticData, features: &FeatureSet, seed: u64) -> ProbeModel {
    let (train_rows, _) = split_by_trajectory(&data.rows, 0.25, seed);
    let mut cfg = TrainConfig::new(kind);
    cfg.n_select = 32;
    cfg.seed = seed;
    let (_, z, y) = assemble(kind, &train_rows, features).unwrap();
    train_probe(&z, &y, Some(&features.segments), &cfg).unwrap()
}

pub fn planted(n_rows: usize, seed: u64) -> Planted {
    let spec = SynthSpec {
        n_rows,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec, seed).unwrap();
    let features = encode_store(&data.store, &data.stack).unwrap();
    let tool_need = train(ProbeKind::ToolNeed, &data, &features, seed);
    let tool_risk = train(ProbeKind::ToolRisk, &data, &features, seed);
    Planted {
        data,
        features,
        tool_need,
        tool_risk,
    }
}
