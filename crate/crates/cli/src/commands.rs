use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context as _, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use toolwatch::analysis::{
    ablation_study, export_feature_evidence, format_ablation_table, format_concentration, import_feature_labels,
    layer_concentration, rank_features, sample_steps, EvidencePacket, RankScore,
};
use toolwatch::features::{FeatureSet, SparseVec};
use toolwatch::ingest::{self, split_by_trajectory, DecisionRow, StepKey};
use toolwatch::monitor::{format_corpus_summary, summarize_events, Actual, Expected, Monitor, MonitorEvent};
use toolwatch::probe::{self, ClassWeighting, Metrics, ProbeKind, ProbeModel, TrainConfig};
use toolwatch::risk::{self, RiskScheme};
use toolwatch::sae::{self, SaeStack};
use toolwatch::service::{self, MonitorService};
use toolwatch::store::{generate_synthetic, ActivationStore, SynthSpec};

use crate::config::{pick, write_sidecar, Context};
use crate::{
    AblateArgs, Cli, Command, EncodeArgs, EvalArgs, EvidenceArgs, IngestArgs, InputFormat, KindArg, LabelRiskArgs,
    MonitorArgs, ReportArgs, ServeArgs, SynthArgs, TrainArgs, EXIT_ALERTS,
};

const DEFAULT_TEST_FRACTION: f64 = 0.2;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Context::load(cli.config.as_deref(), cli.seed, cli.out)?;
    match cli.command {
        Command::Ingest(a) => ingest_cmd(&ctx, a),
        Command::LabelRisk(a) => label_risk(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Encode(a) => encode(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Evidence(a) => evidence(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Monitor(a) => monitor(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_rows(path: &Path) -> Result<Vec<DecisionRow>> {
    ingest::read_rows(open(path)?).with_context(|| format!("reading rows {}", path.display()))
}

fn write_rows(path: &Path, rows: &[DecisionRow]) -> Result<()> {
    let mut w = create(path)?;
    ingest::write_rows(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::read(open(path)?).with_context(|| format!("reading features {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ProbeModel> {
    ProbeModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn sae_paths(flag: &[PathBuf], ctx: &Context) -> Result<Vec<PathBuf>> {
    let paths = if flag.is_empty() { ctx.config.paths.sae.clone() } else { flag.to_vec() };
    ensure!(!paths.is_empty(), "missing SAE layer files: pass --sae or set paths.sae");
    Ok(paths)
}

fn load_stack(paths: &[PathBuf]) -> Result<SaeStack> {
    SaeStack::load(paths).context("loading SAE stack")
}

fn load_store(path: &Path) -> Result<ActivationStore> {
    ActivationStore::load(path).with_context(|| format!("loading store {}", path.display()))
}

fn test_fraction(flag: Option<f64>, ctx: &Context) -> Result<f64> {
    let f = flag
        .or(ctx.config.probe.test_fraction)
        .unwrap_or(DEFAULT_TEST_FRACTION);
    ensure!((0.0..1.0).contains(&f), "test fraction must lie in [0, 1)");
    Ok(f)
}

fn ingest_cmd(ctx: &Context, a: IngestArgs) -> Result<ExitCode> {
    let parsed = match a.format {
        InputFormat::Trajectory => ingest::parse_trajectories(open(&a.input)?)?,
        InputFormat::Bfcl => ingest::parse_bfcl(open(&a.input)?)?,
    };
    for d in &parsed.diagnostics {
        warn!("{}:{}: {}", a.input.display(), d.line, d.message);
    }
    let rows: Vec<DecisionRow> = parsed
        .trajectories
        .iter()
        .flat_map(|t| ingest::build_decision_rows(&t.steps))
        .collect();
    let out = ctx.out("rows.jsonl");
    write_rows(&out, &rows)?;
    write_sidecar(&out, &ctx.provenance(&[&a.input])?)?;
    let tool = rows.iter().filter(|r| r.tool_needed).count();
    println!(
        "{} trajectories, {} rows ({} tool, {} no-tool), {} diagnostics -> {}",
        parsed.trajectories.len(),
        rows.len(),
        tool,
        rows.len() - tool,
        parsed.diagnostics.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn label_risk(ctx: &Context, a: LabelRiskArgs) -> Result<ExitCode> {
    let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
    let scheme_path = a.scheme.or_else(|| ctx.config.risk.scheme.clone());
    let scheme = match &scheme_path {
        Some(p) => RiskScheme::load(p).with_context(|| format!("loading scheme {}", p.display()))?,
        None => RiskScheme::seeded(),
    };
    let (rows, dist) = risk::label_rows(read_rows(&rows_path)?, &scheme);
    let out = ctx.out("rows.labeled.jsonl");
    write_rows(&out, &rows)?;
    let mut inputs: Vec<&Path> = vec![&rows_path];
    if let Some(p) = &scheme_path {
        inputs.push(p);
    }
    write_sidecar(&out, &ctx.provenance(&inputs)?)?;
    println!(
        "low {} | medium {} | high {} | no-tool {} -> {}",
        dist.low,
        dist.medium,
        dist.high,
        dist.no_tool,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    spec: &'a SynthSpec,
    seed: u64,
    planted_tool_features: &'a [usize],
    planted_risk_features: &'a [usize],
}

fn synth(ctx: &Context, a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        n_rows: a.rows,
        d: a.d,
        layer_ids: a.layers,
        planted_margin: (!a.null).then_some(a.margin),
        features_per_layer: a.features_per_layer,
        tool_fraction: a.tool_fraction,
        steps_per_trajectory: a.steps_per_trajectory,
    };
    let data = generate_synthetic(&spec, ctx.seed)?;
    let dir = ctx.out("synth");
    std::fs::create_dir_all(dir.join("sae"))?;
    let store_path = dir.join("store.twa");
    data.store.save(&store_path)?;
    let mut sae_files = Vec::new();
    for layer in data.stack.layers() {
        let p = dir.join("sae").join(format!("layer_{:03}.twsae", layer.layer_id()));
        layer.save(&p)?;
        sae_files.push(p);
    }
    let rows_path = dir.join("rows.jsonl");
    write_rows(&rows_path, &data.rows)?;
    write_json(
        &dir.join("synth.json"),
        &SynthSummary {
            spec: &spec,
            seed: ctx.seed,
            planted_tool_features: &data.planted_tool_features,
            planted_risk_features: &data.planted_risk_features,
        },
    )?;
    let prov = ctx.provenance(&[])?;
    write_sidecar(&store_path, &prov)?;
    write_sidecar(&rows_path, &prov)?;
    println!(
        "{} rows, {} layers x {} features -> {}",
        data.rows.len(),
        sae_files.len(),
        spec.features_per_layer,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn encode(ctx: &Context, a: EncodeArgs) -> Result<ExitCode> {
    let store_path = pick(a.store, ctx.config.paths.store.as_ref(), "--store")?;
    let paths = sae_paths(&a.sae, ctx)?;
    let store = load_store(&store_path)?;
    let stack = load_stack(&paths)?;
    let mut features = sae::encode_store(&store, &stack)?;
    let mut inputs: Vec<&Path> = vec![&store_path];
    inputs.extend(paths.iter().map(PathBuf::as_path));
    features.provenance = Some(ctx.provenance(&inputs)?);
    let out = ctx.out("features.jsonl");
    let mut w = create(&out)?;
    features.write(&mut w)?;
    w.flush()?;
    let nnz: usize = features.rows.iter().map(|(_, z)| z.nnz()).sum();
    println!(
        "{} rows x {} features ({:.1} active per row) -> {}",
        features.rows.len(),
        features.dim(),
        nnz as f64 / features.rows.len().max(1) as f64,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn kind_of(k: KindArg) -> ProbeKind {
    match k {
        KindArg::ToolNeed => ProbeKind::ToolNeed,
        KindArg::ToolRisk => ProbeKind::ToolRisk,
    }
}

fn train(ctx: &Context, a: TrainArgs) -> Result<ExitCode> {
    let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
    let features_path = pick(a.features, ctx.config.paths.features.as_ref(), "--features")?;
    let kind = kind_of(a.kind);
    let mut cfg = match a.preset.or_else(|| ctx.config.probe.preset.clone()) {
        Some(name) => {
            let p = probe::preset(&name).with_context(|| format!("unknown preset {name}"))?;
            ensure!(p.kind == kind, "preset {name} is for {} probes", p.kind);
            TrainConfig::from_preset(&p)
        }
        None => TrainConfig::new(kind),
    };
    if let Some(n) = a.n_select.or(ctx.config.probe.n_select) {
        cfg.n_select = n;
    }
    if let Some(t) = a.decision_threshold.or(ctx.config.probe.decision_threshold) {
        cfg.decision_threshold = t;
    }
    if let Some(b) = a.uncertainty_band.or(ctx.config.probe.uncertainty_band) {
        cfg.uncertainty_band = b;
    }
    if a.inverse_frequency_weights {
        cfg.class_weighting = ClassWeighting::InverseFrequency;
    }
    cfg.seed = ctx.seed;
    let fraction = test_fraction(a.test_fraction, ctx)?;

    let rows = read_rows(&rows_path)?;
    let features = read_features(&features_path)?;
    let (train_rows, test_rows) = split_by_trajectory(&rows, fraction, ctx.seed);
    let (_, z, y) = probe::assemble(kind, &train_rows, &features)?;
    info!("training {kind} probe on {} rows, {} features", z.len(), features.dim());
    let mut model = probe::train_probe(&z, &y, Some(&features.segments), &cfg)?;
    let mut prov = ctx.provenance(&[&rows_path, &features_path])?;
    if let Some(p) = model.provenance.take() {
        prov.inputs.extend(p.inputs);
    }
    model.provenance = Some(prov);
    let out = ctx.out("model.json");
    model.save(&out)?;
    println!(
        "selected {} features, l1={} l2={}, converged={} after {} iterations -> {}",
        model.n_selected(),
        model.reg.l1,
        model.reg.l2,
        model.diagnostics.converged,
        model.diagnostics.iterations,
        out.display()
    );
    match probe::evaluate(&model, &test_rows, &features) {
        Ok(m) => print!("held-out:\n{}", format_metrics(&m)),
        Err(e) => warn!("no held-out evaluation: {e}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn format_metrics(m: &Metrics) -> String {
    let mut s = format!(
        "accuracy {:.1}% ({}/{})\nmacro-F1 {:.3}\n",
        m.accuracy * 100.0,
        m.correct,
        m.total,
        m.macro_f1
    );
    s.push_str(&format!(
        "{:>6} {:>9} {:>7} {:>7} {:>8}\n",
        "class", "precision", "recall", "f1", "support"
    ));
    for (c, cm) in m.per_class.iter().enumerate() {
        s.push_str(&format!(
            "{c:>6} {:>9.3} {:>7.3} {:>7.3} {:>8}\n",
            cm.precision, cm.recall, cm.f1, cm.support
        ));
    }
    s.push_str(&format!("confusion (rows = truth): {:?}\n", m.confusion));
    s
}

#[derive(Deserialize)]
struct PredictionPair {
    truth: usize,
    predicted: usize,
}

fn eval(ctx: &Context, a: EvalArgs) -> Result<ExitCode> {
    let metrics = if let Some(path) = &a.predictions {
        let pairs: Vec<PredictionPair> = read_jsonl(path)?;
        let truth: Vec<usize> = pairs.iter().map(|p| p.truth).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.predicted).collect();
        Metrics::from_predictions(&truth, &pred, a.classes)?
    } else if let Some(text) = &a.confusion {
        let confusion: Vec<Vec<u64>> = serde_json::from_str(text).context("parsing --confusion")?;
        Metrics::from_confusion(confusion)?
    } else {
        let model_path = pick(a.model, ctx.config.paths.tool_need_model.as_ref(), "--model")?;
        let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
        let features_path = pick(a.features, ctx.config.paths.features.as_ref(), "--features")?;
        let model = load_model(&model_path)?;
        let rows = read_rows(&rows_path)?;
        let rows = if a.all_rows {
            rows
        } else {
            split_by_trajectory(&rows, test_fraction(a.test_fraction, ctx)?, ctx.seed).1
        };
        probe::evaluate(&model, &rows, &read_features(&features_path)?)?
    };
    print!("{}", format_metrics(&metrics));
    if let Some(out) = &ctx.out {
        write_json(out, &metrics)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Held-out (key, features) pairs for the model's kind.
fn held_out(
    ctx: &Context,
    model: &ProbeModel,
    rows_path: &Path,
    features: &FeatureSet,
    fraction: Option<f64>,
) -> Result<Vec<(StepKey, SparseVec)>> {
    let rows = read_rows(rows_path)?;
    let (_, test) = split_by_trajectory(&rows, test_fraction(fraction, ctx)?, ctx.seed);
    let (keys, zs, _) = probe::assemble(model.kind, &test, features)?;
    Ok(keys.into_iter().zip(zs).collect())
}

fn ablate(ctx: &Context, a: AblateArgs) -> Result<ExitCode> {
    let model_path = pick(a.model, ctx.config.paths.tool_need_model.as_ref(), "--model")?;
    let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
    let features_path = pick(a.features, ctx.config.paths.features.as_ref(), "--features")?;
    let model = load_model(&model_path)?;
    let features = read_features(&features_path)?;
    let pool = held_out(ctx, &model, &rows_path, &features, a.test_fraction)?;
    ensure!(!pool.is_empty(), "no held-out steps to ablate");
    let steps: Vec<_> = sample_steps(pool.len(), a.steps, ctx.seed)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    let score = if a.mean_activation_score {
        RankScore::MeanActivationWeight
    } else {
        RankScore::AbsWeight
    };
    let study = ablation_study(&model, &steps, &a.sizes, score, ctx.seed)?;
    print!("{}", format_ablation_table(&study));
    let out = ctx.out("ablation.json");
    write_json(&out, &study)?;
    write_sidecar(&out, &ctx.provenance(&[&model_path, &rows_path, &features_path])?)?;
    Ok(ExitCode::SUCCESS)
}

fn evidence(ctx: &Context, a: EvidenceArgs) -> Result<ExitCode> {
    let model_path = pick(a.model, ctx.config.paths.tool_need_model.as_ref(), "--model")?;
    let model = load_model(&model_path)?;
    let ranked = rank_features(&model, RankScore::AbsWeight)?;
    if let Some(import) = &a.import {
        let packets: Vec<EvidencePacket> = read_jsonl(import)?;
        let labeled = import_feature_labels(ranked, &packets);
        for f in labeled.iter().take(a.top_features) {
            println!(
                "L{:<4} {:>8} {:>9.4}  {}",
                f.layer_id,
                f.feature_id,
                f.score,
                f.label.as_deref().unwrap_or("-")
            );
        }
        let out = ctx.out("ranking.labeled.json");
        write_json(&out, &labeled)?;
        write_sidecar(&out, &ctx.provenance(&[&model_path, import])?)?;
        return Ok(ExitCode::SUCCESS);
    }
    let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
    let features_path = pick(a.features, ctx.config.paths.features.as_ref(), "--features")?;
    let features = read_features(&features_path)?;
    let contexts: HashMap<StepKey, String> = read_rows(&rows_path)?
        .into_iter()
        .map(|r| (r.key(), r.context))
        .collect();
    let top = a.top_features.min(ranked.len());
    if let Some(segments) = &model.segments {
        println!("layer concentration (top {top}): {}", format_concentration(&layer_concentration(&ranked, top, segments)?));
    }
    let packets = ranked[..top]
        .iter()
        .map(|f| export_feature_evidence(f.index, &features.rows, &contexts, model.segments.as_ref(), a.top_n))
        .collect::<Result<Vec<_>, _>>()?;
    let silent = packets.iter().filter(|p| p.never_active).count();
    let out = ctx.out("evidence.jsonl");
    write_jsonl(&out, &packets)?;
    write_sidecar(&out, &ctx.provenance(&[&model_path, &rows_path, &features_path])?)?;
    println!("{} packets ({} never active) -> {}", packets.len(), silent, out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    summary: &'a toolwatch::monitor::CorpusSummary,
    episodes: &'a [toolwatch::monitor::EpisodeReport],
}

fn report(ctx: &Context, a: ReportArgs) -> Result<ExitCode> {
    let events: Vec<MonitorEvent> = read_jsonl(&a.events)?;
    if events.is_empty() {
        bail!("{} contains no events", a.events.display());
    }
    let (episodes, summary) = summarize_events(&events)?;
    print!("{}", format_corpus_summary(&summary));
    if let Some(out) = &ctx.out {
        write_json(out, &ReportFile {
            summary: &summary,
            episodes: &episodes,
        })?;
        write_sidecar(out, &ctx.provenance(&[&a.events])?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct ActionRecord {
    trajectory_id: String,
    step_index: u32,
    called: bool,
    #[serde(default)]
    tool_name: Option<String>,
}

fn build_monitor(
    ctx: &Context,
    sae: &[PathBuf],
    model: Option<PathBuf>,
    risk_model: Option<PathBuf>,
) -> Result<(Monitor, Vec<PathBuf>)> {
    let sae = sae_paths(sae, ctx)?;
    let model_path = pick(model, ctx.config.paths.tool_need_model.as_ref(), "--model")?;
    let risk_path = risk_model.or_else(|| ctx.config.paths.tool_risk_model.clone());
    let risk = risk_path.as_deref().map(load_model).transpose()?;
    let monitor = Monitor::new(load_stack(&sae)?, load_model(&model_path)?, risk)?;
    let mut inputs = sae;
    inputs.push(model_path);
    inputs.extend(risk_path);
    Ok((monitor, inputs))
}

fn monitor(ctx: &Context, a: MonitorArgs) -> Result<ExitCode> {
    let rows_path = pick(a.rows, ctx.config.paths.rows.as_ref(), "--rows")?;
    let store_path = pick(a.store, ctx.config.paths.store.as_ref(), "--store")?;
    let (monitor, mut inputs) = build_monitor(ctx, &a.sae, a.model, a.risk_model)?;
    let store = load_store(&store_path)?;
    let rows = read_rows(&rows_path)?;
    let actions: HashMap<StepKey, Actual> = match &a.actions {
        Some(p) => read_jsonl::<ActionRecord>(p)?
            .into_iter()
            .map(|r| {
                (
                    StepKey::new(r.trajectory_id, r.step_index),
                    Actual {
                        called: r.called,
                        tool_name: r.tool_name,
                    },
                )
            })
            .collect(),
        None => HashMap::new(),
    };
    let mut events = Vec::with_capacity(rows.len());
    for row in &rows {
        let key = row.key();
        let record = store
            .get(&key)
            .with_context(|| format!("store has no activations for {key}"))?;
        events.push(monitor.observe(
            key.clone(),
            |id| record.layer(id),
            Expected::from_row(row),
            actions.get(&key).cloned(),
        )?);
    }
    let out = ctx.out("events.jsonl");
    write_jsonl(&out, &events)?;
    inputs.push(rows_path);
    inputs.push(store_path);
    inputs.extend(a.actions);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_sidecar(&out, &ctx.provenance(&refs)?)?;
    let alerts: usize = events.iter().map(|e| e.alerts.len()).sum();
    if !events.is_empty() {
        print!("{}", format_corpus_summary(&summarize_events(&events)?.1));
    }
    println!("{} events, {} alerts -> {}", events.len(), alerts, out.display());
    Ok(if alerts > 0 {
        ExitCode::from(EXIT_ALERTS)
    } else {
        ExitCode::SUCCESS
    })
}

fn serve(ctx: &Context, a: ServeArgs) -> Result<ExitCode> {
    let (monitor, _) = build_monitor(ctx, &a.sae, a.model, a.risk_model)?;
    let store = a
        .store
        .or_else(|| ctx.config.paths.store.clone())
        .map(|p| load_store(&p))
        .transpose()?;
    let svc = Arc::new(MonitorService::new(monitor, store));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(a.addr, svc))?;
    Ok(ExitCode::SUCCESS)
}
