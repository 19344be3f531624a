//! Command-line front end. Machine-readable JSON goes to stdout, logs and
//! error records to stderr.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{latency_bench, BenchConfig};
use crate::error::{Error, Result};
use crate::ingest::{feature_stats, load_dataset, stats_sidecar, synth_stream, write_dataset, EventStream, SynthConfig};
use crate::trainer::{
    evaluate, load_model, random_search, save_model, train_with, warm_store, Method, Protocol,
    Scorer, SearchSpace, SplitName, Splits, Task, TrainConfig,
};

pub const DATA_DIR_ENV: &str = "DGS_DATA_DIR";

/// Contents of a run configuration file (TOML). Training keys sit at the top
/// level next to the data keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// CSV path; tried as given, then next to the config file, then under
    /// `$DGS_DATA_DIR`.
    pub data: Option<PathBuf>,
    pub feature_dim: usize,
    pub split: [f64; 3],
    pub out_dir: PathBuf,
    /// Generate the stream instead of reading `data`.
    pub synthetic: Option<SynthConfig>,
    pub synthetic_seed: u64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            feature_dim: 0,
            split: [0.7, 0.15, 0.15],
            out_dir: PathBuf::from("dgs-out"),
            synthetic: None,
            synthetic_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    v.as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::Config(format!("config not found: {}", path.display())));
        }
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    fn fractions(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }

    fn resolve_data(&self, config_dir: Option<&Path>) -> Result<PathBuf> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("no `data` path and no `synthetic` section".into()))?;
        let mut tried = vec![data.clone()];
        if data.is_relative() {
            if let Some(dir) = config_dir {
                tried.push(dir.join(data));
            }
            if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
                tried.push(Path::new(&root).join(data));
            }
        }
        tried
            .iter()
            .find(|p| p.is_file())
            .cloned()
            .ok_or_else(|| Error::Config(format!("data not found: {}", data.display())))
    }

    pub fn load_stream(&self, config_dir: Option<&Path>) -> Result<EventStream> {
        match &self.synthetic {
            Some(s) => synth_stream(s, self.synthetic_seed),
            None => load_dataset(self.resolve_data(config_dir)?, self.feature_dim),
        }
    }

    pub fn splits(&self, config_dir: Option<&Path>) -> Result<Splits> {
        Splits::new(&self.load_stream(config_dir)?, self.fractions())
    }
}

/// One per run, written as `manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub exit_code: i32,
    pub error: Option<String>,
}

#[derive(Debug, Parser)]
#[command(name = "dgs", version, about = "Streaming node representations for temporal graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a CSV edge stream and compute train-split feature statistics.
    Ingest(IngestArgs),
    /// Write a planted-signal synthetic stream as CSV.
    Synth(SynthArgs),
    /// Train a model with early stopping.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Eval(EvalArgs),
    /// Time frozen batched inference.
    Bench(BenchArgs),
    /// Random hyperparameter search.
    Tune(TuneArgs),
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub variant: Option<Method>,
    #[arg(long)]
    pub state_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub delta_t: bool,
    #[arg(long)]
    pub pos_weight: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, rc: &mut RunConfig) {
        let t = &mut rc.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.task {
            t.task = v;
        }
        if let Some(v) = self.variant {
            t.method = v;
        }
        if let Some(v) = self.state_size {
            t.state_size = Some(v);
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.threads {
            t.threads = v;
        }
        if self.delta_t {
            t.delta_t = true;
        }
        if let Some(v) = self.pos_weight {
            t.pos_weight = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = &self.data {
            rc.data = Some(v.clone());
            rc.synthetic = None;
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub buckets: usize,
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.7, 0.15, 0.15])]
    pub split: Vec<f64>,
    #[arg(long, default_value = "dgs-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Optional TOML file with a `[synthetic]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long, default_value = "dgs-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the learned parameters as JSON.
    #[arg(long)]
    pub dump_params: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[arg(long, default_value = "transductive")]
    pub protocol: Protocol,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub dump_params: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub batches: usize,
    #[arg(long, default_value_t = 200)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write per-batch times as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Run {
    out_dir: PathBuf,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(out_dir: PathBuf, config_path: Option<PathBuf>) -> Run {
        Run { out_dir, config_path, seed: None, outputs: Vec::new() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let p = self.path(name);
        fs::write(&p, contents)?;
        self.outputs.push(p.clone());
        Ok(p)
    }
}

fn emit(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn config_dir(path: &Path) -> Option<&Path> {
    path.parent()
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut rc = RunConfig::load(path)?;
    overrides.apply(&mut rc);
    Ok(rc)
}

fn cmd_ingest(args: &IngestArgs, run: &mut Run) -> Result<()> {
    let stream = load_dataset(&args.data, args.feature_dim)?;
    let &[a, b, c] = args.split.as_slice() else {
        return Err(Error::Config("--split needs three fractions".into()));
    };
    let splits = Splits::new(&stream, (a, b, c))?;
    let stats = feature_stats(&splits.train, args.buckets)?;
    let mut csv = Vec::new();
    write_dataset(&stream, &mut csv)?;
    let events = run.write("events.csv", csv)?;
    let sidecar = run.write("stats.jsonl", stats_sidecar(&stats))?;
    emit(&serde_json::json!({
        "record": "ingest",
        "events": stream.len(),
        "nodes": stream.node_count,
        "destinations": stream.destination_ids.len(),
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "normalized": events,
        "stats": sidecar,
    }))
}

fn cmd_synth(args: &SynthArgs, run: &mut Run) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.synthetic.unwrap_or_default(),
        None => SynthConfig::default(),
    };
    if let Some(n) = args.events {
        cfg.events = n;
    }
    run.seed = Some(args.seed);
    let stream = synth_stream(&cfg, args.seed)?;
    let mut csv = Vec::new();
    write_dataset(&stream, &mut csv)?;
    let path = run.write("events.csv", csv)?;
    emit(&serde_json::json!({
        "record": "synth",
        "events": stream.len(),
        "feature_dim": stream.feature_dim,
        "path": path,
    }))
}

fn cmd_train(args: &TrainArgs, rc: &RunConfig, run: &mut Run) -> Result<()> {
    let splits = rc.splits(config_dir(&args.config))?;
    fs::create_dir_all(&run.out_dir)?;
    let history_path = run.path("history.jsonl");
    let mut history = fs::File::create(&history_path)?;
    run.outputs.push(history_path);
    let mut write_err = None;
    let model = train_with(&rc.train, &splits, |r| {
        let line = serde_json::to_string(r).map_err(Error::from);
        if let Err(e) = line.and_then(|l| writeln!(history, "{l}").map_err(Error::from)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let store = warm_store(&model, &splits)?;
    let ckpt = run.path("model.dgsm");
    save_model(&ckpt, &model, store.as_ref())?;
    run.outputs.push(ckpt.clone());
    run.write("config.json", serde_json::to_vec_pretty(rc)?)?;
    if args.dump_params {
        let params = serde_json::json!({ "encoder": model.encoder, "head": model.head });
        run.write("params.json", serde_json::to_vec(&params)?)?;
    }
    emit(&serde_json::json!({
        "record": "train",
        "checkpoint": ckpt,
        "method": model.config.method,
        "task": model.config.task,
        "epochs": model.history.len(),
        "best_epoch": model.best_epoch,
        "best_val_metric": model.best_val_metric,
        "parameters": model.parameters,
    }))
}

fn cmd_eval(args: &EvalArgs, rc: &RunConfig, run: &mut Run) -> Result<()> {
    let (mut model, _) = load_model(&args.checkpoint)?;
    if let Some(t) = args.threads {
        model.config.threads = t;
    }
    let splits = rc.splits(config_dir(&args.config))?;
    let metrics = evaluate(&model, &splits, args.split, args.protocol)?;
    run.write("metrics.json", serde_json::to_vec(&metrics)?)?;
    if args.dump_params {
        let params = serde_json::json!({ "encoder": model.encoder, "head": model.head });
        run.write("params.json", serde_json::to_vec(&params)?)?;
    }
    emit(&serde_json::json!({ "record": "eval", "metrics": metrics }))
}

fn cmd_bench(args: &BenchArgs, rc: &RunConfig, run: &mut Run) -> Result<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let stream = rc.load_stream(config_dir(&args.config))?;
    let threads = args.threads.unwrap_or(1);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut scorer = Scorer::new(model.view(), pool.as_ref());
    let dataset = match (&rc.synthetic, &rc.data) {
        (Some(_), _) => "synthetic".to_string(),
        (None, Some(p)) => p.display().to_string(),
        (None, None) => "unknown".to_string(),
    };
    let cfg = BenchConfig { batches: args.batches, batch_size: args.batch_size, iterations: args.iterations };
    let report = latency_bench(&mut scorer, &stream.events, cfg, &dataset, model.config.method.name())?;
    run.write("latency.json", serde_json::to_vec(&report)?)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report.batch_csv())?;
        run.outputs.push(csv.clone());
    }
    emit(&serde_json::json!({ "record": "bench", "report": report }))
}

fn cmd_tune(args: &TuneArgs, rc: &RunConfig, run: &mut Run) -> Result<()> {
    let splits = rc.splits(config_dir(&args.config))?;
    let seed = rc.train.seed;
    let mut trials = Vec::new();
    let result = random_search(&rc.train, &splits, &SearchSpace::default(), args.budget, seed, |t| {
        log::info!("trial {}: {:?}", t.trial, t.val_metric);
        trials.push(t.clone());
    })?;
    run.write("trials.jsonl", jsonl(&trials)?)?;
    let best = RunConfig { train: result.best.clone(), ..rc.clone() };
    let toml_text = toml::to_string(&best).map_err(|e| Error::Config(e.to_string()))?;
    run.write("best_config.toml", toml_text)?;
    emit(&serde_json::json!({
        "record": "tune",
        "sampler": "random",
        "budget": args.budget,
        "best_val_metric": result.best_val_metric,
        "best": result.best,
    }))
}

fn execute(cmd: &Command, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a, run),
        Command::Synth(a) => cmd_synth(a, run),
        Command::Train(a) => {
            let rc = load_config(&a.config, &a.overrides)?;
            run.seed = Some(rc.train.seed);
            if a.out.is_none() {
                run.out_dir = rc.out_dir.clone();
            }
            cmd_train(a, &rc, run)
        }
        Command::Eval(a) => {
            let overrides = Overrides { data: a.data.clone(), ..Overrides::default() };
            let rc = load_config(&a.config, &overrides)?;
            cmd_eval(a, &rc, run)
        }
        Command::Bench(a) => {
            let overrides = Overrides { data: a.data.clone(), ..Overrides::default() };
            let rc = load_config(&a.config, &overrides)?;
            cmd_bench(a, &rc, run)
        }
        Command::Tune(a) => {
            let rc = load_config(&a.config, &a.overrides)?;
            run.seed = Some(rc.train.seed);
            if a.out.is_none() {
                run.out_dir = rc.out_dir.clone();
            }
            cmd_tune(a, &rc, run)
        }
    }
}

fn initial_run(cmd: &Command) -> (&'static str, Run) {
    let default_out = || PathBuf::from("dgs-out");
    match cmd {
        Command::Ingest(a) => ("ingest", Run::new(a.out.clone(), None)),
        Command::Synth(a) => ("synth", Run::new(a.out.clone(), a.config.clone())),
        Command::Train(a) => ("train", Run::new(a.out.clone().unwrap_or_else(default_out), Some(a.config.clone()))),
        Command::Eval(a) => ("eval", Run::new(a.out.clone().unwrap_or_else(default_out), Some(a.config.clone()))),
        Command::Bench(a) => ("bench", Run::new(a.out.clone().unwrap_or_else(default_out), Some(a.config.clone()))),
        Command::Tune(a) => ("tune", Run::new(a.out.clone().unwrap_or_else(default_out), Some(a.config.clone()))),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn report_error(e: &Error, code: i32) {
    let record = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
    eprintln!("{record}");
}

/// Parses `args`, runs the subcommand, writes the manifest and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = Error::Config(e.to_string().trim_end().to_string());
            report_error(&err, 1);
            return 1;
        }
    };
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let (name, mut run) = initial_run(&cli.command);
    let result = execute(&cli.command, &mut run);
    let (code, message) = match &result {
        Ok(()) => (0, None),
        Err(e) => {
            let code = exit_code(e);
            report_error(e, code);
            (code, Some(e.to_string()))
        }
    };
    let manifest = RunManifest {
        subcommand: name.to_string(),
        config_path: run.config_path.clone(),
        seed: run.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: run.outputs.clone(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        exit_code: code,
        error: message,
    };
    let written = fs::create_dir_all(&run.out_dir)
        .map_err(Error::from)
        .and_then(|_| Ok(serde_json::to_vec_pretty(&manifest)?))
        .and_then(|bytes| Ok(fs::write(run.out_dir.join("manifest.json"), bytes)?));
    if let Err(e) = written {
        report_error(&e, 1);
        return if code == 0 { 1 } else { code };
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let rc = RunConfig::from_toml(
            "feature_dim = 4\nmethod = \"dgs_v\"\ntask = \"link_pred\"\nstate_size = 50\n\n[synthetic]\nevents = 100\nsources = 3\ndestinations = 3\nfeature_dim = 4\ndiscounts = [0.5]\nweights = [1.0]\nnoise = 0.1\npositive_rate = 0.5\nmean_gap = 1.0\n",
        )
        .unwrap();
        assert_eq!(rc.train.method, Method::DgsV);
        assert_eq!(rc.train.task, Task::LinkPred);
        assert_eq!(rc.train.state_size, Some(50));
        assert_eq!(rc.train.batch_size, 200);
        assert_eq!(rc.synthetic.unwrap().events, 100);
        let err = RunConfig::from_toml("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("unknown key \"bogus\""));
        assert!(RunConfig::from_toml("method = \"tgn\"").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut rc = RunConfig::from_toml("seed = 3\nbatch_size = 10").unwrap();
        let o = Overrides { seed: Some(9), delta_t: true, ..Overrides::default() };
        o.apply(&mut rc);
        assert_eq!((rc.train.seed, rc.train.batch_size, rc.train.delta_t), (9, 10, true));
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().contains("config not found"));
    }

    #[test]
    fn data_dir_fallback() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("edges.csv"), "0,0,1.0,1,0.5\n1,0,2.0,0,0.1\n").unwrap();
        let rc = RunConfig { data: Some("edges.csv".into()), feature_dim: 1, ..RunConfig::default() };
        assert!(rc.resolve_data(None).is_err());
        assert_eq!(rc.resolve_data(Some(dir.path())).unwrap(), dir.path().join("edges.csv"));
    }
}
