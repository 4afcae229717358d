//! Experiment orchestration: config files, benchmark streams, metrics
//! persistence, summaries and plots.
//!
//! One TOML file fully determines an experiment: the benchmark, the seeds,
//! the network width and the method list. `run_experiment` executes every
//! method x seed combination, appends one CSV line per (trained-through,
//! evaluated-task) cell and stores posterior snapshots; `summarize` folds a
//! metrics file into average-accuracy curves; `emit_plot` renders those
//! curves as a deterministic SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Deserialize;
use thiserror::Error;

use crate::bayes::NetworkSpec;
use crate::continual::{run_task_sequence, ContinualError, Method, MethodConfig};
use crate::data::{
    build_permuted_stream, build_split_stream, consecutive_pairs, load_cifar10_dir,
    load_image_folder, load_mnist_dir, synth_blobs, DataError, TaskStream,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset not resolvable: {0}")]
    Dataset(String),
    #[error(transparent)]
    Continual(#[from] ContinualError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 2 for dataset resolution failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Dataset(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ─── benchmarks ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    PermutedMnist,
    SplitMnist,
    SplitNotMnist,
    SplitFashion,
    SplitCifar10,
    Synth,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::PermutedMnist,
        Benchmark::SplitMnist,
        Benchmark::SplitNotMnist,
        Benchmark::SplitFashion,
        Benchmark::SplitCifar10,
        Benchmark::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::PermutedMnist => "permuted-mnist",
            Benchmark::SplitMnist => "split-mnist",
            Benchmark::SplitNotMnist => "split-notmnist",
            Benchmark::SplitFashion => "split-fashion",
            Benchmark::SplitCifar10 => "split-cifar10",
            Benchmark::Synth => "synth",
        }
    }

    /// Hidden layer widths used when the config does not set any.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Benchmark::PermutedMnist => vec![100, 100],
            Benchmark::SplitMnist | Benchmark::SplitCifar10 => vec![256, 256],
            Benchmark::SplitNotMnist | Benchmark::SplitFashion => vec![150, 150, 150, 150],
            Benchmark::Synth => vec![32],
        }
    }

    /// Subdirectory under the data root holding this benchmark's files.
    fn default_subdir(self) -> &'static str {
        match self {
            Benchmark::PermutedMnist | Benchmark::SplitMnist => "mnist",
            Benchmark::SplitNotMnist => "notmnist",
            Benchmark::SplitFashion => "fashion",
            Benchmark::SplitCifar10 => "cifar10",
            Benchmark::Synth => "",
        }
    }

    fn file_hint(self) -> &'static str {
        match self {
            Benchmark::PermutedMnist | Benchmark::SplitMnist => {
                "train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, \
                 t10k-labels-idx1-ubyte (optionally .gz)"
            }
            Benchmark::SplitNotMnist => "one directory per class (A/ through J/) of PNG images",
            Benchmark::SplitFashion => "the four idx files in the standard layout",
            Benchmark::SplitCifar10 => "data_batch_1.bin .. data_batch_5.bin and test_batch.bin",
            Benchmark::Synth => "",
        }
    }
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown benchmark {s:?}; expected one of {}",
                    Benchmark::ALL.map(|b| b.name()).join(", ")
                ))
            })
    }
}

// ─── config ───

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: String,
    output_dir: Option<PathBuf>,
    seeds: Vec<u64>,
    #[serde(default)]
    stream_seed: u64,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    tasks: RawTasks,
    methods: Vec<RawMethod>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    dir: Option<PathBuf>,
    #[serde(default)]
    train_limit: usize,
    #[serde(default)]
    test_limit: usize,
    #[serde(default)]
    urls: BTreeMap<String, String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    hidden: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTasks {
    count: Option<usize>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    dim: Option<usize>,
    separation: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    name: String,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    mc_train: Option<usize>,
    mc_eval: Option<usize>,
    lambda: Option<f64>,
    coreset_size: Option<usize>,
    fisher_samples: Option<usize>,
}

/// Synthetic-stream shape; ignored by the dataset benchmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub separation: f64,
}

/// A fully validated experiment. Method seeds are placeholders here; each
/// run stamps its own.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub stream_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub urls: BTreeMap<String, String>,
    pub hidden: Vec<usize>,
    pub task_count: usize,
    pub synth: SynthParams,
    pub methods: Vec<MethodConfig>,
}

/// Individual key overrides from the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub epochs: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawConfig =
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{path:?}: {e}")))?;
    let benchmark: Benchmark = raw.benchmark.parse()?;
    if raw.seeds.is_empty() {
        return Err(HarnessError::Config("seeds must not be empty".into()));
    }
    if raw.methods.is_empty() {
        return Err(HarnessError::Config("methods must not be empty".into()));
    }

    let split_fixed = matches!(
        benchmark,
        Benchmark::SplitMnist
            | Benchmark::SplitNotMnist
            | Benchmark::SplitFashion
            | Benchmark::SplitCifar10
    );
    let task_count = match (split_fixed, raw.tasks.count) {
        (true, Some(c)) if c != 5 => {
            return Err(HarnessError::Config(format!(
                "{benchmark} has exactly 5 tasks, config asks for {c}"
            )))
        }
        (true, _) => 5,
        (false, Some(c)) if c == 0 => {
            return Err(HarnessError::Config("tasks.count must be at least 1".into()))
        }
        (false, Some(c)) => c,
        (false, None) => {
            if benchmark == Benchmark::Synth {
                3
            } else {
                5
            }
        }
    };

    let mut methods = Vec::with_capacity(raw.methods.len());
    for rm in &raw.methods {
        let method: Method = rm
            .name
            .parse()
            .map_err(|e: ContinualError| HarnessError::Config(e.to_string()))?;
        let mut m = MethodConfig::new(method);
        if let Some(v) = rm.epochs {
            m.epochs = v;
        }
        if let Some(v) = rm.batch_size {
            m.batch_size = v;
        }
        if let Some(v) = rm.learning_rate {
            m.learning_rate = v;
        }
        if let Some(v) = rm.mc_train {
            m.mc_train = v;
        }
        if let Some(v) = rm.mc_eval {
            m.mc_eval = v;
        }
        if let Some(v) = rm.lambda {
            m.lambda = v;
        }
        if let Some(v) = rm.coreset_size {
            m.coreset_size = v;
        }
        if let Some(v) = rm.fisher_samples {
            m.fisher_samples = v;
        }
        m.validate()
            .map_err(|e| HarnessError::Config(format!("method {}: {e}", rm.name)))?;
        methods.push(m);
    }

    Ok(ExperimentConfig {
        benchmark,
        output_dir: raw
            .output_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(benchmark.name())),
        seeds: raw.seeds,
        stream_seed: raw.stream_seed,
        data_dir: raw.data.dir,
        train_limit: raw.data.train_limit,
        test_limit: raw.data.test_limit,
        urls: raw.data.urls,
        hidden: raw
            .network
            .hidden
            .unwrap_or_else(|| benchmark.default_hidden()),
        task_count,
        synth: SynthParams {
            n_train: raw.tasks.n_train.unwrap_or(200),
            n_test: raw.tasks.n_test.unwrap_or(100),
            dim: raw.tasks.dim.unwrap_or(2),
            separation: raw.tasks.separation.unwrap_or(8.0),
        },
        methods,
    })
}

pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    ov: &Overrides,
) -> Result<(), HarnessError> {
    if let Some(s) = ov.seed {
        cfg.seeds = vec![s];
    }
    if let Some(name) = &ov.method {
        let m: Method = name
            .parse()
            .map_err(|e: ContinualError| HarnessError::Config(e.to_string()))?;
        cfg.methods.retain(|mc| mc.method == m);
        if cfg.methods.is_empty() {
            return Err(HarnessError::Config(format!(
                "method {name} is not in this config"
            )));
        }
    }
    if let Some(e) = ov.epochs {
        for m in &mut cfg.methods {
            m.epochs = e;
        }
        for m in &cfg.methods {
            m.validate()
                .map_err(|err| HarnessError::Config(err.to_string()))?;
        }
    }
    if let Some(dir) = &ov.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(())
}

// ─── data resolution and stream building ───

pub const DATA_DIR_ENV: &str = "EVCL_DATA_DIR";

fn resolve_data_dir(
    cfg: &ExperimentConfig,
    env_root: Option<PathBuf>,
) -> Result<PathBuf, HarnessError> {
    let dir = match (&cfg.data_dir, env_root) {
        (Some(d), _) => d.clone(),
        (None, Some(root)) => root.join(cfg.benchmark.default_subdir()),
        (None, None) => {
            return Err(HarnessError::Dataset(format!(
                "no data directory for {}: set data.dir in the config or the {} environment \
                 variable. The directory must contain {}. Add [data.urls] entries and run the \
                 fetch subcommand to download them.",
                cfg.benchmark,
                DATA_DIR_ENV,
                cfg.benchmark.file_hint()
            )))
        }
    };
    if !dir.is_dir() {
        return Err(HarnessError::Dataset(format!(
            "data directory {} does not exist; it must contain {}. Add [data.urls] entries and \
             run the fetch subcommand to download them.",
            dir.display(),
            cfg.benchmark.file_hint()
        )));
    }
    Ok(dir)
}

fn data_error(benchmark: Benchmark, e: DataError) -> HarnessError {
    HarnessError::Dataset(format!("loading {benchmark} data failed: {e}"))
}

/// Builds the task stream for the configured benchmark, applying the
/// configured per-task limits.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream, HarnessError> {
    let wrap = |e: DataError| data_error(cfg.benchmark, e);
    match cfg.benchmark {
        Benchmark::Synth => synth_blobs(
            cfg.task_count,
            cfg.synth.n_train,
            cfg.synth.n_test,
            cfg.synth.dim,
            cfg.synth.separation,
            cfg.stream_seed,
        )
        .map_err(wrap),
        Benchmark::PermutedMnist => {
            let dir = resolve_data_dir(cfg, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))?;
            let (train, test) = load_mnist_dir(&dir).map_err(wrap)?;
            // Limiting before permutation keeps only one base copy per task
            // in memory; permutations preserve row order so the result
            // matches limiting afterwards.
            let train = train.take(cfg.train_limit);
            let test = test.take(cfg.test_limit);
            build_permuted_stream(&train, &test, cfg.task_count, cfg.stream_seed).map_err(wrap)
        }
        Benchmark::SplitMnist | Benchmark::SplitFashion => {
            let dir = resolve_data_dir(cfg, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))?;
            let (train, test) = load_mnist_dir(&dir).map_err(wrap)?;
            let stream =
                build_split_stream(&train, &test, &consecutive_pairs(10)).map_err(wrap)?;
            Ok(stream.limit(cfg.train_limit, cfg.test_limit))
        }
        Benchmark::SplitCifar10 => {
            let dir = resolve_data_dir(cfg, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))?;
            let (train, test) = load_cifar10_dir(&dir).map_err(wrap)?;
            let stream =
                build_split_stream(&train, &test, &consecutive_pairs(10)).map_err(wrap)?;
            Ok(stream.limit(cfg.train_limit, cfg.test_limit))
        }
        Benchmark::SplitNotMnist => {
            let dir = resolve_data_dir(cfg, std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))?;
            let (train, test, skipped) =
                load_image_folder(&dir, cfg.stream_seed, 0.1).map_err(wrap)?;
            if skipped > 0 {
                eprintln!("note: skipped {skipped} undecodable image files");
            }
            // A/F, B/G, C/H, D/I, E/J with classes in sorted directory order.
            let pairs: Vec<(usize, usize)> = (0..5).map(|k| (k, k + 5)).collect();
            let stream = build_split_stream(&train, &test, &pairs).map_err(wrap)?;
            Ok(stream.limit(cfg.train_limit, cfg.test_limit))
        }
    }
}

fn network_for(stream: &TaskStream, hidden: &[usize]) -> NetworkSpec {
    if stream.n_heads == 1 {
        NetworkSpec::single_head(stream.input_dim, hidden.to_vec(), stream.classes_per_task)
    } else {
        NetworkSpec::multi_head(
            stream.input_dim,
            hidden.to_vec(),
            stream.classes_per_task,
            stream.n_heads,
        )
    }
}

// ─── metrics ───

pub const METRICS_HEADER: &str =
    "run_id,seed,method,trained_through,eval_task,accuracy,wall_time_s";

/// One accuracy-matrix cell from one run. Task indices are 1-based in the
/// file; `wall_time_s` is the total wall time of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: u64,
    pub seed: u64,
    pub method: String,
    pub trained_through: usize,
    pub eval_task: usize,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.3}",
            self.run_id,
            self.seed,
            self.method,
            self.trained_through,
            self.eval_task,
            self.accuracy,
            self.wall_time_s
        )
    }

    fn parse(line: &str) -> Option<MetricsRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return None;
        }
        Some(MetricsRecord {
            run_id: parts[0].parse().ok()?,
            seed: parts[1].parse().ok()?,
            method: parts[2].to_string(),
            trained_through: parts[3].parse().ok()?,
            eval_task: parts[4].parse().ok()?,
            accuracy: parts[5].parse().ok()?,
            wall_time_s: parts[6].parse().ok()?,
        })
    }
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("metrics.csv")
}

/// Reads every well-formed record; malformed or truncated lines are skipped
/// so an interrupted run's file still parses.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(HarnessError::Config(format!(
                "{} is not a metrics file (missing header)",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if let Some(r) = MetricsRecord::parse(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

fn next_run_id(path: &Path) -> Result<u64, HarnessError> {
    if !path.exists() {
        return Ok(1);
    }
    let max = read_metrics(path)?
        .iter()
        .map(|r| r.run_id)
        .max()
        .unwrap_or(0);
    Ok(max + 1)
}

// ─── running ───

/// What `run_experiment` did, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub runs: usize,
    pub records: usize,
    pub metrics: PathBuf,
}

/// Executes every configured method for every seed, appending metrics and
/// writing per-task posterior snapshots under the output directory. Each
/// record line is flushed on its own, so interrupting the process never
/// leaves a half-written line.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let stream = build_stream(cfg)?;
    let net = network_for(&stream, &cfg.hidden);
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let mpath = metrics_path(cfg);
    let mut run_id = next_run_id(&mpath)?;
    let new_file = !mpath.exists();
    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&mpath)
        .map_err(io_err(&mpath))?;
    if new_file {
        writeln!(out, "{METRICS_HEADER}").map_err(io_err(&mpath))?;
        out.flush().map_err(io_err(&mpath))?;
    }

    let mut runs = 0;
    let mut records = 0;
    for mc in &cfg.methods {
        for &seed in &cfg.seeds {
            let mut m = mc.clone();
            m.seed = seed;
            let started = Instant::now();
            let outcome = run_task_sequence(&stream, &net, &m)?;
            let wall = started.elapsed().as_secs_f64();

            let snap_dir = cfg.output_dir.join(format!(
                "snapshots/run{:04}-{}-seed{}",
                run_id, m.method, seed
            ));
            fs::create_dir_all(&snap_dir).map_err(io_err(&snap_dir))?;
            for (t, snap) in outcome.snapshots.iter().enumerate() {
                let p = snap_dir.join(format!("task{}.posterior", t + 1));
                snap.save(&p)
                    .map_err(|e| HarnessError::Continual(ContinualError::Bayes(e)))?;
            }

            for (t, row) in outcome.matrix.rows().iter().enumerate() {
                for (tau, &acc) in row.iter().enumerate() {
                    let rec = MetricsRecord {
                        run_id,
                        seed,
                        method: m.method.name().to_string(),
                        trained_through: t + 1,
                        eval_task: tau + 1,
                        accuracy: acc,
                        wall_time_s: wall,
                    };
                    writeln!(out, "{}", rec.to_line()).map_err(io_err(&mpath))?;
                    out.flush().map_err(io_err(&mpath))?;
                    records += 1;
                }
            }
            let last = outcome.matrix.tasks_seen() - 1;
            println!(
                "run {run_id}: {} seed {seed}: avg accuracy after task {} = {:.4} ({wall:.1}s)",
                m.method,
                last + 1,
                outcome.matrix.avg_through(last).unwrap_or(f64::NAN)
            );
            run_id += 1;
            runs += 1;
        }
    }
    Ok(RunReport {
        runs,
        records,
        metrics: mpath,
    })
}

// ─── summaries ───

/// Average accuracy over all tasks seen, per method and per point in the
/// sequence, averaged over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub tasks_seen: usize,
    pub avg_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn methods(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.rows.iter().map(|r| r.method.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn max_tasks(&self) -> usize {
        self.rows.iter().map(|r| r.tasks_seen).max().unwrap_or(0)
    }

    pub fn get(&self, method: &str, tasks_seen: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.tasks_seen == tasks_seen)
            .map(|r| r.avg_accuracy)
    }
}

/// Folds a metrics file into the per-method average-accuracy curve:
/// mean over runs of (mean over evaluated tasks) at each sequence position.
/// Rows left incomplete by an interrupted run are dropped.
pub fn summarize(path: &Path) -> Result<Summary, HarnessError> {
    let recs = read_metrics(path)?;
    if recs.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} holds no records",
            path.display()
        )));
    }
    // (run, method, trained_through) -> accuracies seen so far.
    let mut cells: BTreeMap<(u64, String, usize), Vec<f64>> = BTreeMap::new();
    for r in &recs {
        cells
            .entry((r.run_id, r.method.clone(), r.trained_through))
            .or_default()
            .push(r.accuracy);
    }
    // (method, trained_through) -> per-run row averages.
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ((_, method, t), accs) in cells {
        if accs.len() != t {
            continue; // truncated row from an interrupted run
        }
        let row_avg = accs.iter().sum::<f64>() / accs.len() as f64;
        groups.entry((method, t)).or_default().push(row_avg);
    }
    let rows = groups
        .into_iter()
        .map(|((method, tasks_seen), v)| SummaryRow {
            method,
            tasks_seen,
            avg_accuracy: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    Ok(Summary { rows })
}

pub const SUMMARY_HEADER: &str = "method,tasks_seen,avg_accuracy";

pub fn write_summary(summary: &Summary, path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for r in &summary.rows {
        let _ = writeln!(text, "{},{},{:.6}", r.method, r.tasks_seen, r.avg_accuracy);
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_summary(path: &Path) -> Result<Summary, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(HarnessError::Config(format!(
            "{} is not a summary file (missing header)",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(HarnessError::Config(format!("malformed summary line {line:?}")));
        }
        rows.push(SummaryRow {
            method: parts[0].to_string(),
            tasks_seen: parts[1]
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad task count in {line:?}")))?,
            avg_accuracy: parts[2]
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad accuracy in {line:?}")))?,
        });
    }
    if rows.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} holds no rows",
            path.display()
        )));
    }
    Ok(Summary { rows })
}

/// Plain-text table of a summary for the terminal.
pub fn render_table(summary: &Summary) -> String {
    let methods = summary.methods();
    let max_t = summary.max_tasks();
    let name_w = methods
        .iter()
        .map(|m| m.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let mut out = format!("{:name_w$}", "method");
    for t in 1..=max_t {
        let _ = write!(out, "  {:>8}", format!("t={t}"));
    }
    out.push('\n');
    for m in methods {
        let _ = write!(out, "{m:name_w$}");
        for t in 1..=max_t {
            match summary.get(m, t) {
                Some(a) => {
                    let _ = write!(out, "  {a:>8.4}");
                }
                None => {
                    let _ = write!(out, "  {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

// ─── plots ───

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 480.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 7] = [
    "#1b6ca8", "#d1495b", "#2e933c", "#7d5ba6", "#e28413", "#50514f", "#118ab2",
];

/// Renders the average-accuracy curves as SVG text: one polyline per method,
/// x = tasks seen, y = average accuracy clamped to [0, 1]. Byte-identical
/// output for identical summaries.
pub fn render_svg(summary: &Summary) -> String {
    let methods = summary.methods();
    let max_t = summary.max_tasks().max(1);
    let x0 = MARGIN_L;
    let x1 = PLOT_W - MARGIN_R;
    let y0 = PLOT_H - MARGIN_B;
    let y1 = MARGIN_T;
    let x_of = |t: usize| {
        if max_t == 1 {
            (x0 + x1) / 2.0
        } else {
            x0 + (t - 1) as f64 / (max_t - 1) as f64 * (x1 - x0)
        }
    };
    let y_of = |a: f64| y0 - a.clamp(0.0, 1.0) * (y0 - y1);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "  <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>"
    );
    // Axes.
    let _ = writeln!(
        s,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    // Y ticks every 0.25.
    for i in 0..=4 {
        let a = i as f64 * 0.25;
        let y = y_of(a);
        let _ = writeln!(
            s,
            "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>",
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{a:.2}</text>",
            x0 - 8.0,
            y + 4.0
        );
    }
    // X ticks on integers, thinned when the sequence is long.
    let step = max_t.div_ceil(10).max(1);
    for t in (1..=max_t).step_by(step) {
        let x = x_of(t);
        let _ = writeln!(
            s,
            "  <line x1=\"{x:.1}\" y1=\"{y0}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>",
            y0 + 18.0
        );
    }
    let _ = writeln!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Tasks seen</text>",
        (x0 + x1) / 2.0,
        PLOT_H - 12.0
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">\
         Average accuracy</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    // Curves and legend.
    for (i, m) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for t in 1..=max_t {
            if let Some(a) = summary.get(m, t) {
                if !pts.is_empty() {
                    pts.push(' ');
                }
                let _ = write!(pts, "{:.1},{:.1}", x_of(t), y_of(a));
            }
        }
        let _ = writeln!(
            s,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{pts}\"/>"
        );
        let ly = MARGIN_T + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>",
            x1 + 12.0,
            ly - 10.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\">{m}</text>",
            x1 + 30.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_plot(summary: &Summary, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, render_svg(summary)).map_err(io_err(path))
}

// ─── fetching ───

/// Downloads every `[data.urls]` entry into the data directory. Existing
/// files are kept.
pub fn fetch(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    if cfg.urls.is_empty() {
        return Err(HarnessError::Config(
            "the config has no [data.urls] entries to fetch".into(),
        ));
    }
    let dir = match (&cfg.data_dir, std::env::var_os(DATA_DIR_ENV)) {
        (Some(d), _) => d.clone(),
        (None, Some(root)) => PathBuf::from(root).join(cfg.benchmark.default_subdir()),
        (None, None) => {
            return Err(HarnessError::Config(format!(
                "set data.dir or {DATA_DIR_ENV} to choose where downloads go"
            )))
        }
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (name, url) in &cfg.urls {
        let dest = dir.join(name);
        if dest.exists() {
            println!("{} already present, skipping", dest.display());
            continue;
        }
        println!("fetching {url} -> {}", dest.display());
        let mut resp = ureq::get(url)
            .call()
            .map_err(|e| HarnessError::Dataset(format!("download of {url} failed: {e}")))?;
        let mut bytes = Vec::new();
        resp.body_mut()
            .as_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| HarnessError::Dataset(format!("download of {url} failed: {e}")))?;
        fs::write(&dest, &bytes).map_err(io_err(&dest))?;
        println!("  {} bytes", bytes.len());
    }
    Ok(())
}
