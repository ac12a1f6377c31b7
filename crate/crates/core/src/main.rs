use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hft_imbalance::config::read_toml;
use hft_imbalance::dataset::{self, Sample};
use hft_imbalance::factors::{self, FactorInput};
use hft_imbalance::features::FeatureTable;
use hft_imbalance::ingest::{self, GridStream, SessionSchedule, TickSchema};
use hft_imbalance::losses::{LossKind, LossSpec};
use hft_imbalance::manifest::{RunManifest, StageRecord};
use hft_imbalance::nn::{Checkpoint, ModelKind};
use hft_imbalance::synth::{self, SynthConfig, SynthMeta};
use hft_imbalance::training::{self, Evaluation, TrainConfig};
use hft_imbalance::{Error, Parallelism, Result, WINDOW_LEN};

const TICKS_SUFFIX: &str = ".ticks.csv";
const GRID_SUFFIX: &str = ".grid.csv";
const FEATURES_SUFFIX: &str = ".features.csv";
const META_FILE: &str = "synth_meta.toml";

#[derive(Parser)]
#[command(version, about = "Tick data to 3-class return prediction under label imbalance")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Run every stage single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tick stream and its calibrated fee.
    Synth(SynthArgs),
    /// Resample tick files onto the 0.5 s session grid.
    Ingest(IngestArgs),
    /// Compute features and fee-thresholded labels.
    Featurize(FeaturizeArgs),
    /// Assemble 60-step windows and split 8:1:1 in time order.
    Split(SplitArgs),
    /// Train a model; `--grid` runs every loss and model.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Diagnostic factors and their accumulated return curves.
    Factors(FactorsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        matches!(t, Toggle::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn file(self) -> &'static str {
        match self {
            SplitName::Train => "train.bin",
            SplitName::Val => "val.bin",
            SplitName::Test => "test.bin",
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Signal strength in [0, 1].
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Tick files, or directories searched for `*.ticks.csv`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = hft_imbalance::DEFAULT_HORIZON)]
    warmup: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Grid files, or directories searched for `*.grid.csv`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Run config supplying `fee` and `horizon`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the calibrated fee of a synth run in the input directory.
    #[arg(long)]
    fee: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Feature files, or directories searched for `*.features.csv`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.bin and val.bin.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fee: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    loss: Option<String>,
    /// Focal loss exponent.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    normalize: Option<Toggle>,
    #[arg(long)]
    undersample: Option<Toggle>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Train every loss with every model, one subdirectory per run.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Expected model kind; a checkpoint of another kind is rejected.
    #[arg(long)]
    model: Option<String>,
    /// Also write the evaluation as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FactorsArgs {
    /// Grid files, or directories searched for `*.grid.csv`. The matching
    /// `*.features.csv` must sit next to each grid file.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    let mode = if cli.sequential { Parallelism::Sequential } else { Parallelism::Parallel };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a, mode),
        Command::Ingest(a) => run_ingest(a, mode),
        Command::Featurize(a) => run_featurize(a, mode),
        Command::Split(a) => run_split(a, mode),
        Command::Train(a) => run_train(a, mode),
        Command::Evaluate(a) => run_evaluate(a, mode),
        Command::Factors(a) => run_factors(a, mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

/// Files given directly, plus files ending in `suffix` inside given
/// directories, sorted by name.
fn collect_inputs(inputs: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(suffix))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no `*{suffix}` inputs found in {inputs:?}")));
    }
    Ok(out)
}

fn to_json<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn record_stage(dir: &Path, record: StageRecord) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(dir)?;
    manifest.record(record);
    manifest.save(dir)
}

fn run_synth(a: SynthArgs, mode: Parallelism) -> Result<()> {
    let started = Instant::now();
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.signal {
        cfg.signal_strength = s;
    }
    if let Some(d) = a.days {
        cfg.n_days = d;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    create_dir(&a.out)?;
    let out = synth::generate(&cfg, mode)?;
    let ticks = a.out.join(format!("{}{TICKS_SUFFIX}", cfg.instrument));
    ingest::write_tick_file(&ticks, &out.records)?;
    let meta_path = a.out.join(META_FILE);
    SynthMeta::new(&cfg, &out).write_file(&meta_path)?;
    println!(
        "{} records, fee {:.6e}, label shares {:.4?}",
        out.records.len(),
        out.calibration.fee,
        out.calibration.shares
    );
    record_stage(
        &a.out,
        StageRecord {
            stage: "synth".into(),
            seed: Some(cfg.seed),
            inputs: a.config.into_iter().collect(),
            outputs: vec![ticks, meta_path],
            config: to_json(&cfg),
            loss: None,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_ingest(a: IngestArgs, _mode: Parallelism) -> Result<()> {
    let started = Instant::now();
    let files = collect_inputs(&a.input, TICKS_SUFFIX)?;
    create_dir(&a.out)?;
    let schedule = SessionSchedule::default();
    let mut outputs = Vec::new();
    for f in &files {
        let raw = ingest::parse_tick_file(f, &TickSchema::canonical())?;
        let crossed = raw.iter().filter(|r| r.flags.crossed).count();
        let grid = GridStream::build(&raw, &schedule, a.warmup);
        let filled = grid.records.iter().filter(|r| r.flags.filled).count();
        let path = a.out.join(format!("{}{GRID_SUFFIX}", ingest::instrument_of(f)));
        grid.write_file(&path)?;
        println!("{}: {} records, {} grid points, {filled} filled, {crossed} crossed", f.display(), raw.len(), grid.len());
        outputs.push(path);
    }
    record_stage(
        &a.out,
        StageRecord {
            stage: "ingest".into(),
            seed: None,
            inputs: files,
            outputs,
            config: serde_json::json!({ "warmup": a.warmup, "schedule": to_json(&schedule) }),
            loss: None,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

/// Fee from the flag, the run config, or a synth run next to the inputs.
fn resolve_fee(flag: Option<f64>, config: Option<&TrainConfig>, inputs: &[PathBuf]) -> Result<f64> {
    if let Some(f) = flag.or(config.map(|c| c.fee)) {
        return Ok(f);
    }
    for p in inputs {
        let dir = if p.is_dir() { p.as_path() } else { p.parent().unwrap_or(Path::new(".")) };
        let meta = dir.join(META_FILE);
        if meta.exists() {
            return Ok(SynthMeta::read_file(meta)?.fee);
        }
    }
    Err(Error::Config("no fee given: pass --fee, a config with `fee`, or run synth into the input directory".into()))
}

fn run_featurize(a: FeaturizeArgs, mode: Parallelism) -> Result<()> {
    let started = Instant::now();
    let config: Option<TrainConfig> = a.config.as_ref().map(read_toml).transpose()?;
    let fee = resolve_fee(a.fee, config.as_ref(), &a.input)?;
    let horizon = a.horizon.or(config.as_ref().map(|c| c.horizon)).unwrap_or(hft_imbalance::DEFAULT_HORIZON);
    let files = collect_inputs(&a.input, GRID_SUFFIX)?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for f in &files {
        let grid = GridStream::read_file(f)?;
        let table = FeatureTable::build(&grid, fee, horizon, mode)?;
        let path = a.out.join(format!("{}{FEATURES_SUFFIX}", ingest::instrument_of(f)));
        table.write_file(&path)?;
        println!("{}: class counts (-1, 0, +1) = {:?}", f.display(), table.class_counts());
        outputs.push(path);
    }
    record_stage(
        &a.out,
        StageRecord {
            stage: "featurize".into(),
            seed: None,
            inputs: files,
            outputs,
            config: serde_json::json!({ "fee": fee, "horizon": horizon }),
            loss: None,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn run_split(a: SplitArgs, mode: Parallelism) -> Result<()> {
    let started = Instant::now();
    let files = collect_inputs(&a.input, FEATURES_SUFFIX)?;
    let tables = files.iter().map(FeatureTable::read_file).collect::<Result<Vec<_>>>()?;
    let assembly = dataset::assemble_many(&tables, WINDOW_LEN, mode);
    let split = dataset::chronological_split(&assembly.samples)?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for (name, range) in [("train.bin", &split.train), ("val.bin", &split.val), ("test.bin", &split.test)] {
        let path = a.out.join(name);
        dataset::write_samples_file(&path, &assembly.samples[range.clone()])?;
        println!("{name}: {} samples", range.len());
        outputs.push(path);
    }
    record_stage(
        &a.out,
        StageRecord {
            stage: "split".into(),
            seed: None,
            inputs: files,
            outputs,
            config: serde_json::json!({ "window": WINDOW_LEN, "skipped": assembly.skipped }),
            loss: None,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn train_config(a: &TrainArgs, mode: Parallelism) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.fee {
        cfg.fee = f;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(l) = &a.loss {
        cfg.loss = l.parse()?;
    }
    if let Some(l) = a.lambda {
        cfg.focal_lambda = l;
    }
    if let Some(m) = &a.model {
        cfg.model = m.parse()?;
    }
    if let Some(n) = a.normalize {
        cfg.normalize = n.into();
    }
    if let Some(u) = a.undersample {
        cfg.undersample = u.into();
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if mode == Parallelism::Sequential {
        cfg.parallelism = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct RunSummary {
    model: ModelKind,
    loss: LossKind,
    best_epoch: u32,
    epochs: usize,
    val: Evaluation,
}

fn train_one(cfg: &TrainConfig, train: &[Sample], val: &[Sample], data: &Path, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    create_dir(out)?;
    let outcome = training::train(cfg, train, val)?;
    let checkpoint = out.join("checkpoint.bin");
    let metrics = out.join("metrics.jsonl");
    outcome.best.write_file(&checkpoint)?;
    training::write_metrics_file(&metrics, &outcome.reports)?;
    let loss: LossSpec = outcome.loss_spec.clone();
    record_stage(
        out,
        StageRecord {
            stage: "train".into(),
            seed: Some(cfg.seed),
            inputs: vec![data.join("train.bin"), data.join("val.bin")],
            outputs: vec![checkpoint, metrics],
            config: to_json(cfg),
            loss: Some(loss),
            seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    let val = training::validate(&outcome.best.model, val, cfg.normalize, cfg.parallelism)?;
    Ok(RunSummary {
        model: cfg.model,
        loss: cfg.loss,
        best_epoch: outcome.best.epoch,
        epochs: outcome.reports.len(),
        val,
    })
}

fn print_summary(s: &RunSummary) {
    let r = s.val.class_accuracy.map(|a| a.map_or("-".to_string(), |v| format!("{v:.4}")));
    println!(
        "{:<5} {:<10} epochs {:>3} best {:>3}  val acc {:.4}  balanced {:.4}  recall (-1, 0, +1) = ({}, {}, {})",
        s.model.name(),
        s.loss.name(),
        s.epochs,
        s.best_epoch,
        s.val.accuracy,
        s.val.balanced_accuracy,
        r[0],
        r[1],
        r[2]
    );
}

fn run_train(a: TrainArgs, mode: Parallelism) -> Result<()> {
    let base = train_config(&a, mode)?;
    let train = dataset::read_samples_file(a.data.join("train.bin"))?;
    let val = dataset::read_samples_file(a.data.join("val.bin"))?;
    if !a.grid {
        let summary = train_one(&base, &train, &val, &a.data, &a.out)?;
        print_summary(&summary);
        return Ok(());
    }
    let jobs: Vec<TrainConfig> = ModelKind::ALL
        .iter()
        .flat_map(|&model| LossKind::ALL.into_iter().map(move |loss| (model, loss)))
        .map(|(model, loss)| TrainConfig { model, loss, ..base.clone() })
        .collect();
    let results = hft_imbalance::par::map_slice(mode, &jobs, |cfg| {
        let dir = a.out.join(format!("{}-{}", cfg.model.name(), cfg.loss.name()));
        train_one(cfg, &train, &val, &a.data, &dir)
    });
    let mut table = csv::Writer::from_path(a.out.join("grid.csv")).map_err(|e| Error::Format(e.to_string()))?;
    table
        .write_record(["model", "loss", "epochs", "best_epoch", "val_accuracy", "val_balanced_accuracy", "recall_down", "recall_flat", "recall_up"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in results {
        let s = r?;
        print_summary(&s);
        let rec = s.val.class_accuracy.map(|a| a.map(|v| v.to_string()).unwrap_or_default());
        table
            .write_record([
                s.model.name().to_string(),
                s.loss.name().to_string(),
                s.epochs.to_string(),
                s.best_epoch.to_string(),
                s.val.accuracy.to_string(),
                s.val.balanced_accuracy.to_string(),
                rec[0].clone(),
                rec[1].clone(),
                rec[2].clone(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    table.flush().map_err(|e| Error::Io { path: a.out.join("grid.csv"), source: e })
}

fn run_evaluate(a: EvaluateArgs, mode: Parallelism) -> Result<()> {
    let checkpoint = Checkpoint::read_file(&a.checkpoint)?;
    if let Some(m) = &a.model {
        let expected: ModelKind = m.parse()?;
        if expected != checkpoint.model.kind() {
            return Err(Error::ArchitectureMismatch {
                expected: expected.name().into(),
                found: checkpoint.model.kind().name().into(),
            });
        }
    }
    let samples = dataset::read_samples_file(a.data.join(a.split.file()))?;
    let eval = training::validate(&checkpoint.model, &samples, checkpoint.normalize, mode)?;
    println!("checkpoint {} ({}, epoch {})", a.checkpoint.display(), checkpoint.model.kind(), checkpoint.epoch);
    println!("samples            {}", eval.samples);
    println!("accuracy           {:.4}", eval.accuracy);
    println!("balanced accuracy  {:.4}", eval.balanced_accuracy);
    for (name, acc) in ["-1", "+0", "+1"].iter().zip(eval.class_accuracy) {
        match acc {
            Some(v) => println!("accuracy class {name:>2}  {v:.4}"),
            None => println!("accuracy class {name:>2}  n/a"),
        }
    }
    print!("{}", eval.confusion);
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&eval).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(out, text + "\n").map_err(|e| Error::Io { path: out.clone(), source: e })?;
    }
    Ok(())
}

fn run_factors(a: FactorsArgs, mode: Parallelism) -> Result<()> {
    let started = Instant::now();
    let files = collect_inputs(&a.input, GRID_SUFFIX)?;
    create_dir(&a.out)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for f in &files {
        let instrument = ingest::instrument_of(f);
        let features = f.with_file_name(format!("{instrument}{FEATURES_SUFFIX}"));
        let grid = GridStream::read_file(f)?;
        let table = FeatureTable::read_file(&features)?;
        let input = FactorInput::from_grid(&grid);
        let rows = factors::factor_series(&input, mode);
        let curves = factors::accumulation_curves(&rows, &table)?;
        let factor_path = a.out.join(format!("{instrument}.factors.csv"));
        let acc_path = a.out.join(format!("{instrument}.factor_accumulation.csv"));
        factors::write_factors_file(&factor_path, &instrument, &rows)?;
        factors::write_accumulation_file(&acc_path, &instrument, &input.timestamp, &curves)?;
        let finals: Vec<String> = factors::FACTOR_NAMES
            .iter()
            .zip(&curves)
            .map(|(n, c)| format!("{n}={:.4e}", c.last().copied().unwrap_or(0.0)))
            .collect();
        println!("{instrument}: {} valid factor rows; final accumulation {}", rows.iter().filter(|r| r.valid).count(), finals.join(" "));
        inputs.extend([f.clone(), features]);
        outputs.extend([factor_path, acc_path]);
    }
    record_stage(
        &a.out,
        StageRecord {
            stage: "factors".into(),
            seed: None,
            inputs,
            outputs,
            config: serde_json::json!({ "short_window": factors::SHORT_WINDOW, "long_window": factors::LONG_WINDOW }),
            loss: None,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}
