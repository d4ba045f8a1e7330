mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ids_core::agent::{generate_stream, replay_stream, write_decisions_csv, Agent, AgentConfig};
use ids_core::bilstm::{predict, train, write_curves_csv, ModelFile, TrainConfig};
use ids_core::data::{parse_csv, synth_generate, Dataset, FeatureMask, FeatureSchema, Normalizer, Record};
use ids_core::ledger::{verify_blocks, ChainStatus, DeviceRegistry, Ledger, LogicalClock};
use ids_core::metrics::MetricsReport;
use ids_core::patterns::{PatternSource, PatternStore, SecurityLevel};
use ids_core::stats::{compare_methods, crossval_report, CrossValReport, Metric};
use ids_core::woa::{select_features, BinaryWoaConfig, BINARY_POSITION_LIMIT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use run::Run;

/// Intrusion-detection pipeline: feature selection, BiLSTM training,
/// evaluation, and a simulated three-phase security agent.
#[derive(Parser)]
#[command(name = "ids-agent", version)]
struct Cli {
    /// Also save the run manifest to this file.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus and its schema.
    Synth(SynthArgs),
    /// Parse a CSV against a schema; write the min-max normalized copy.
    Ingest(IngestArgs),
    /// Binary whale-optimization feature selection.
    SelectFeatures(SelectArgs),
    /// Train the BiLSTM classifier on the selected features.
    Train(TrainArgs),
    /// Score a trained model on a labelled CSV.
    Evaluate(EvaluateArgs),
    /// Stratified k-fold evaluation of the training pipeline.
    Crossval(CrossvalArgs),
    /// Paired t-test and Wilcoxon test between two cross-validation reports.
    Stats(StatsArgs),
    #[command(subcommand)]
    Ledger(LedgerCommand),
    #[command(subcommand)]
    Patterns(PatternsCommand),
    #[command(subcommand)]
    Agent(AgentCommand),
}

#[derive(Args)]
struct DataArgs {
    /// Record CSV, label in the last column.
    #[arg(long)]
    data: PathBuf,
    /// Schema JSON describing the columns and labels.
    #[arg(long)]
    schema: PathBuf,
    /// The CSV has no header line.
    #[arg(long)]
    no_header: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    rows: usize,
    #[arg(long, default_value_t = 5)]
    informative: usize,
    #[arg(long, default_value_t = 15)]
    noise: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    schema_out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Normalized CSV (with header).
    #[arg(long)]
    out: PathBuf,
    /// Row/class counts and column bounds.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// BinaryWoaConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Weight on the error term; the size term gets `1 - lambda`.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Timesteps each record is folded into.
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    validation: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Mask JSON from select-features.
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and accuracy CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-class metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Cross-validation report of the first method.
    #[arg(long)]
    a: PathBuf,
    /// Cross-validation report of the second method, same folds.
    #[arg(long)]
    b: PathBuf,
    /// One of accuracy, precision, recall, f1, detection_rate,
    /// false_alarm_rate; all of them when omitted.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Check every hash and link of a JSON-lines ledger.
    Verify { file: PathBuf },
}

#[derive(Subcommand)]
enum PatternsCommand {
    /// Seed a pattern store from labelled records.
    Import(PatternsImportArgs),
    /// Dump a pattern store as CSV.
    Export(PatternsExportArgs),
}

#[derive(Args)]
struct PatternsImportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Scale with this model's normalizer instead of the data's own bounds.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Append to this store instead of starting empty.
    #[arg(long)]
    into: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatternsExportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AgentCommand {
    /// Replay a signed request stream through the agent.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Initial pattern store; empty when omitted.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Pool of labelled records the requests are drawn from.
    #[command(flatten)]
    data: DataArgs,
    /// Share of attack requests, in (0, 1).
    #[arg(long, default_value_t = 0.3)]
    ap: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Devices enrolled when no registry is given.
    #[arg(long, default_value_t = 3)]
    devices: usize,
    /// DeviceRegistry JSON.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// AgentConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_fast_path: bool,
    /// Receives report.json, decisions.csv, ledger.jsonl and patterns.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let manifest = cli.manifest.clone();
    let run = match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Ingest(a) => ingest(a)?,
        Command::SelectFeatures(a) => select(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Crossval(a) => crossval(a)?,
        Command::Stats(a) => stats(a)?,
        Command::Ledger(LedgerCommand::Verify { file }) => ledger_verify(&file)?,
        Command::Patterns(PatternsCommand::Import(a)) => patterns_import(a)?,
        Command::Patterns(PatternsCommand::Export(a)) => patterns_export(a)?,
        Command::Agent(AgentCommand::Simulate(a)) => simulate(a)?,
    };
    run.finish(manifest.as_deref())
}

fn load_data(run: &mut Run, a: &DataArgs) -> Result<Dataset> {
    let schema: FeatureSchema = run.read_json(&a.schema)?;
    schema.validate().with_context(|| a.schema.display().to_string())?;
    let bytes = run.read(&a.data)?;
    parse_csv(&bytes[..], &schema, !a.no_header).with_context(|| a.data.display().to_string())
}

/// Accepts the select-features report or a bare 0/1 array.
fn load_mask(run: &mut Run, path: &Path) -> Result<FeatureMask> {
    let v: serde_json::Value = run.read_json(path)?;
    let bits = match v.get("mask") {
        Some(m) => m.clone(),
        None => v,
    };
    serde_json::from_value(bits).with_context(|| format!("{}: not a feature mask", path.display()))
}

fn load_model(run: &mut Run, path: &Path) -> Result<ModelFile> {
    run.read_json(path)
}

fn scaled(d: &Dataset, n: &Normalizer) -> Result<Dataset> {
    if n.feature_min.len() != d.num_features() {
        bail!("normalizer covers {} features, data has {}", n.feature_min.len(), d.num_features());
    }
    let rows = d
        .rows
        .iter()
        .map(|r| Record {
            features: n.scale_clamped(&r.features),
            label: r.label,
        })
        .collect();
    Ok(Dataset::new(d.schema.clone(), rows)?)
}

fn csv_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    d.write_csv(&mut buf, true)?;
    Ok(buf)
}

fn synth(a: SynthArgs) -> Result<Run> {
    let mut run = Run::new("synth");
    run.seed(a.seed);
    run.config(&json!({
        "rows": a.rows, "informative": a.informative, "noise": a.noise, "classes": a.classes,
    }))?;
    let s = synth_generate(a.rows, a.informative, a.noise, a.classes, a.seed)?;
    run.write(&a.out, &csv_bytes(&s.dataset)?)?;
    run.write_json(&a.schema_out, &s.dataset.schema)?;
    Ok(run)
}

#[derive(Serialize)]
struct IngestSummary {
    rows: usize,
    features: usize,
    class_counts: Vec<(String, usize)>,
    feature_min: Vec<f64>,
    feature_max: Vec<f64>,
}

fn ingest(a: IngestArgs) -> Result<Run> {
    let mut run = Run::new("ingest");
    let d = load_data(&mut run, &a.data)?;
    run.write(&a.out, &csv_bytes(&d.normalize())?)?;
    if let Some(p) = &a.summary {
        let summary = IngestSummary {
            rows: d.len(),
            features: d.num_features(),
            class_counts: d.schema.class_names().into_iter().zip(d.class_counts()).collect(),
            feature_min: d.feature_min.clone(),
            feature_max: d.feature_max.clone(),
        };
        run.write_json(p, &summary)?;
    }
    Ok(run)
}

#[derive(Serialize, Deserialize)]
struct MaskReport {
    mask: FeatureMask,
    fitness: f64,
    history: Vec<f64>,
    seed: u64,
    config: BinaryWoaConfig,
}

fn select(a: SelectArgs) -> Result<Run> {
    let mut run = Run::new("select-features");
    let d = load_data(&mut run, &a.data)?.normalize();
    let mut cfg = match &a.config {
        Some(p) => run.read_json(p)?,
        None => BinaryWoaConfig::new(d.num_features(), a.seed),
    };
    cfg.woa.seed = a.seed;
    if let Some(p) = a.population {
        cfg.woa.population = p;
    }
    if let Some(t) = a.iters {
        cfg.woa.max_iters = t;
    }
    if let Some(l) = a.lambda {
        cfg.lambda_weight = l;
        cfg.beta_weight = 1.0 - l;
    }
    if cfg.woa.dimension != d.num_features() {
        cfg.woa.dimension = d.num_features();
        cfg.woa.bounds = vec![(-BINARY_POSITION_LIMIT, BINARY_POSITION_LIMIT); d.num_features()];
    }
    let sel = select_features(&d, &cfg)?;
    run.seed(a.seed);
    run.config(&cfg)?;
    let report = MaskReport {
        mask: sel.mask,
        fitness: sel.fitness,
        history: sel.history,
        seed: a.seed,
        config: cfg,
    };
    run.write_json(&a.out, &report)?;
    Ok(run)
}

fn train_config(run: &mut Run, f: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &f.config {
        Some(p) => run.read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = f.seed;
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.units {
        cfg.units_per_layer = v;
    }
    if let Some(v) = f.layers {
        cfg.num_layers = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = f.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = f.chunks {
        cfg.sequence_chunks = v;
    }
    if let Some(v) = f.validation {
        cfg.validation_fraction = v;
    }
    run.seed(f.seed);
    run.config(&cfg)?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<Run> {
    let mut run = Run::new("train");
    let d = load_data(&mut run, &a.data)?;
    let mask = load_mask(&mut run, &a.mask)?;
    let cfg = train_config(&mut run, &a.train)?;
    let out = train(&d.normalize(), &mask, &cfg)?;
    let file = ModelFile::from_model(&out.model, Some(d.normalizer()));
    let mut text = file.to_json()?.into_bytes();
    text.push(b'\n');
    run.write(&a.out, &text)?;
    if let Some(p) = &a.curves {
        let mut buf = Vec::new();
        write_curves_csv(&out.curves, &mut buf)?;
        run.write(p, &buf)?;
    }
    Ok(run)
}

fn evaluate(a: EvaluateArgs) -> Result<Run> {
    let mut run = Run::new("evaluate");
    let d = load_data(&mut run, &a.data)?;
    let file = load_model(&mut run, &a.model)?;
    let mask = load_mask(&mut run, &a.mask)?;
    let model = file.to_model()?;
    let normalizer = file.normalizer.clone().unwrap_or_else(|| d.normalizer());
    let test = scaled(&d, &normalizer)?;
    let pred: Vec<usize> = predict(&model, &test, &mask)?.into_iter().map(|(c, _)| c).collect();
    let report = MetricsReport::from_predictions(&test.labels(), &pred, &d.schema.class_names(), d.schema.positive_class)?;
    run.write_json(&a.out, &report)?;
    if let Some(p) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        run.write(p, &buf)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(run)
}

fn crossval(a: CrossvalArgs) -> Result<Run> {
    let mut run = Run::new("crossval");
    let d = load_data(&mut run, &a.data)?;
    let mask = load_mask(&mut run, &a.mask)?;
    let cfg = train_config(&mut run, &a.train)?;
    run.config(&json!({ "k": a.k, "train": cfg }))?;
    let pipeline = |fold: usize, tr: &Dataset, te: &Dataset| -> ids_core::Result<Vec<usize>> {
        let normalizer = tr.normalizer();
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(fold as u64);
        let model = train(&tr.normalize(), &mask, &fold_cfg)?.model;
        let rows = te
            .rows
            .iter()
            .map(|r| Record {
                features: normalizer.scale_clamped(&r.features),
                label: r.label,
            })
            .collect();
        let test = Dataset::new(te.schema.clone(), rows)?;
        Ok(predict(&model, &test, &mask)?.into_iter().map(|(c, _)| c).collect())
    };
    let report = crossval_report(&d, &pipeline, a.k, a.train.seed)?;
    run.write_json(&a.out, &report)?;
    Ok(run)
}

fn stats(a: StatsArgs) -> Result<Run> {
    let mut run = Run::new("stats");
    let ra: CrossValReport = run.read_json(&a.a)?;
    let rb: CrossValReport = run.read_json(&a.b)?;
    let metrics: Vec<Metric> = match a.metric {
        Some(m) => vec![m],
        None => Metric::ALL.to_vec(),
    };
    run.config(&json!({ "metrics": metrics }))?;
    let comparisons = metrics
        .into_iter()
        .map(|m| compare_methods(&ra, &rb, m))
        .collect::<ids_core::Result<Vec<_>>>()?;
    run.write_json(&a.out, &comparisons)?;
    println!("{}", serde_json::to_string(&comparisons)?);
    Ok(run)
}

fn ledger_verify(file: &Path) -> Result<Run> {
    let mut run = Run::new("ledger verify");
    let bytes = run.read(file)?;
    let blocks = Ledger::read_jsonl(&bytes[..]).with_context(|| file.display().to_string())?;
    let status = verify_blocks(&blocks);
    println!("{}", json!({ "blocks": blocks.len(), "chain": status }));
    if let ChainStatus::Broken { broken_at, cause } = status {
        bail!("{}: chain broken at block {broken_at} ({cause:?})", file.display());
    }
    Ok(run)
}

fn patterns_import(a: PatternsImportArgs) -> Result<Run> {
    let mut run = Run::new("patterns import");
    let d = load_data(&mut run, &a.data)?;
    let normalizer = match &a.model {
        Some(p) => load_model(&mut run, p)?
            .normalizer
            .with_context(|| format!("{}: model carries no normalizer", p.display()))?,
        None => d.normalizer(),
    };
    let mut store = match &a.into {
        Some(p) => PatternStore::read_jsonl(&run.read(p)?[..]).with_context(|| p.display().to_string())?,
        None => PatternStore::new(d.num_features(), d.schema.benign_class())?,
    };
    if a.model.is_some() {
        store.model_path = a.model.clone();
    }
    let benign = store.benign_class();
    for r in &scaled(&d, &normalizer)?.rows {
        let level = if r.label == benign { SecurityLevel::Safe } else { SecurityLevel::High };
        store.insert(r.features.clone(), r.label, level, PatternSource::Seeded)?;
    }
    let mut buf = Vec::new();
    store.write_jsonl(&mut buf)?;
    run.write(&a.out, &buf)?;
    Ok(run)
}

fn patterns_export(a: PatternsExportArgs) -> Result<Run> {
    let mut run = Run::new("patterns export");
    let store = PatternStore::read_jsonl(&run.read(&a.store)?[..]).with_context(|| a.store.display().to_string())?;
    let mut lines = vec![
        ["id", "label", "security_level", "source"]
            .into_iter()
            .map(String::from)
            .chain((0..store.dimension()).map(|j| format!("f{j}")))
            .collect::<Vec<_>>()
            .join(","),
    ];
    for p in store.patterns() {
        let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let mut fields = vec![
            p.id.to_string(),
            p.label.to_string(),
            name(serde_json::to_value(p.security_level)?),
            name(serde_json::to_value(p.source)?),
        ];
        fields.extend(p.features.iter().map(f64::to_string));
        lines.push(fields.join(","));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    run.write(&a.out, text.as_bytes())?;
    Ok(run)
}

fn simulate(a: SimulateArgs) -> Result<Run> {
    let mut run = Run::new("agent simulate");
    let pool = load_data(&mut run, &a.data)?;
    let file = load_model(&mut run, &a.model)?;
    let mask = load_mask(&mut run, &a.mask)?;
    let model = file.to_model()?;
    let normalizer = file.normalizer.clone().unwrap_or_else(|| pool.normalizer());

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let registry: DeviceRegistry = match &a.registry {
        Some(p) => run.read_json(p)?,
        None => {
            let mut r = DeviceRegistry::new();
            for i in 0..a.devices {
                r.enroll(&format!("device-{i:02}"), &mut rng)?;
            }
            r
        }
    };
    let store = match &a.patterns {
        Some(p) => PatternStore::read_jsonl(&run.read(p)?[..]).with_context(|| p.display().to_string())?,
        None => PatternStore::new(mask.len(), pool.schema.benign_class())?,
    };
    let mut cfg: AgentConfig = match &a.config {
        Some(p) => run.read_json(p)?,
        None => AgentConfig::default(),
    };
    if let Some(t) = a.theta {
        cfg.theta = t;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if a.no_fast_path {
        cfg.fast_path_enabled = false;
    }
    cfg.model_path = Some(a.model.clone());
    cfg.mask_path = Some(a.mask.clone());
    cfg.registry_path = a.registry.clone();
    run.seed(a.seed);
    run.config(&json!({ "agent": cfg, "ap": a.ap, "n": a.n, "devices": registry.len() }))?;

    let ledger_key: [u8; 32] = rng.gen();
    let stream_seed: u64 = rng.gen();
    let benign = store.benign_class();
    let stream = generate_stream(&pool, &normalizer, benign, &registry, a.n, a.ap, stream_seed)?;
    let mut agent = Agent::new(cfg, registry, model, mask, store, Ledger::new(ledger_key), Box::new(LogicalClock::default()))?;
    let (mut report, records) = replay_stream(&mut agent, &stream, a.ap)?;

    let ledger_path = a.out_dir.join("ledger.jsonl");
    let mut buf = Vec::new();
    agent.ledger().write_jsonl(&mut buf)?;
    run.write(&ledger_path, &buf)?;

    let mut buf = Vec::new();
    write_decisions_csv(&records, &mut buf)?;
    run.write(&a.out_dir.join("decisions.csv"), &buf)?;

    let mut buf = Vec::new();
    agent.store().write_jsonl(&mut buf)?;
    run.write(&a.out_dir.join("patterns.jsonl"), &buf)?;

    report.ledger_path = Some(ledger_path);
    run.write_json(&a.out_dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(run)
}
