//! Command-line driver: loads a config, runs an experiment mode and writes
//! CSV data files plus a JSON manifest into the output directory.
//!
//! Output files (all CSV is `.`-decimal, LF-terminated, numbers in `{:.16e}`):
//!
//! * `run`: `metrics.csv` (`round,client_id,accuracy,gen_loss,train_loss`, one
//!   row per client and a `mean` row per round), `gen_loss.csv`
//!   (`round,step,loss`), `communication.csv` (`round,client_id,upload,download`).
//! * `grid`: `grid.csv`, one row per `tau1` and one column per `tau2` (a
//!   diverged cell is written as `nan`), and `grid_cells.csv` in long form.
//! * `ablation`: `ablation.csv` (`series,round,accuracy,gen_loss`) with the
//!   `attention` and `mlp` series.
//!
//! Every command also writes `manifest.json`. Wall-clock times only appear in
//! the manifest, so the data files are byte-identical across reruns and worker
//! counts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::orchestrator::{EmbeddingSource, ExperimentConfig, ExperimentReport, Runner};

#[derive(Debug, Parser)]
#[command(name = "fedd2p", version, about = "Federated distillation with a frozen prompt-tuned encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured protocol.
    Run(CommonArgs),
    /// Sweep the client and server temperatures.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        /// Client temperatures (rows).
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
        taus1: Vec<f64>,
        /// Server temperatures (columns).
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
        taus2: Vec<f64>,
    },
    /// Compare the attention and MLP prompt generators.
    Ablation(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for client-side work; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// The config file is missing, malformed or invalid (exit code 2).
    Config(Error),
    /// Anything that went wrong after the config was accepted (exit code 1).
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Runtime(e) => write!(f, "runtime error: {e}"),
        }
    }
}

/// Provenance record written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub workers: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
    /// Row and column temperatures of a grid; empty for other commands.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taus1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taus2: Vec<f64>,
}

/// Parses `args` (including the program name) and executes the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(manifest) => {
            for path in &manifest.outputs {
                println!("{}", path.display());
            }
            0
        }
        Err(failure) => {
            eprintln!("{failure}");
            failure.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<RunManifest, Failure> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Grid { common, taus1, taus2 } => cmd_grid(common, taus1, taus2),
        Command::Ablation(args) => cmd_ablation(args),
    }
}

/// Reads and validates a config file. A relative embedding file path is
/// resolved against the config file's directory.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::Config(Error::Config {
            field: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })
    })?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(Failure::Config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let EmbeddingSource::File(file) = &cfg.embedding_source {
        if file.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.embedding_source = EmbeddingSource::File(base.join(file));
        }
    }
    Ok(cfg)
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn runtime(e: impl Into<Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Config problems that only surface once a run starts, such as an embedding
/// file of the wrong shape, still count as config errors.
fn classify(e: Error) -> Failure {
    match e.root() {
        Error::Config { .. } => Failure::Config(e),
        _ => Failure::Runtime(e),
    }
}

struct Session {
    cfg: ExperimentConfig,
    runner: Runner,
    workers: usize,
    out: PathBuf,
    started: f64,
    outputs: Vec<PathBuf>,
}

impl Session {
    fn open(args: &CommonArgs) -> Result<Self, Failure> {
        let started = now();
        let cfg = load_config(&args.config, args.seed)?;
        if args.workers == 0 {
            return Err(Failure::Config(Error::Config {
                field: "workers".into(),
                message: "must be >= 1".into(),
            }));
        }
        let runner = Runner::new(args.workers).map_err(runtime)?;
        fs::create_dir_all(&args.out).map_err(runtime)?;
        Ok(Session {
            cfg,
            runner,
            workers: args.workers,
            out: args.out.clone(),
            started,
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(runtime)?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(mut self, command: &str, taus1: &[f64], taus2: &[f64]) -> Result<RunManifest, Failure> {
        let path = self.out.join("manifest.json");
        self.outputs.push(path.clone());
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg,
            workers: self.workers,
            started_unix: self.started,
            finished_unix: now(),
            outputs: self.outputs,
            taus1: taus1.to_vec(),
            taus2: taus2.to_vec(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(runtime)?;
        Ok(manifest)
    }
}

/// Formats a number for the CSV outputs.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// `metrics.csv` contents for a report.
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("round,client_id,accuracy,gen_loss,train_loss\n");
    for m in &report.metrics {
        let gen = opt(m.gen_loss);
        for (n, (acc, loss)) in m.accuracies.iter().zip(&m.train_losses).enumerate() {
            let _ = writeln!(s, "{},{n},{},{gen},{}", m.round, num(*acc), num(*loss));
        }
        let mean_loss = m.train_losses.iter().sum::<f64>() / m.train_losses.len() as f64;
        let _ = writeln!(s, "{},mean,{},{gen},{}", m.round, num(m.mean_accuracy), num(mean_loss));
    }
    s
}

/// `gen_loss.csv` contents: the generator loss after every training step.
pub fn gen_loss_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("round,step,loss\n");
    for m in &report.metrics {
        for (step, loss) in m.gen_loss_curve.iter().enumerate() {
            let _ = writeln!(s, "{},{step},{}", m.round, num(*loss));
        }
    }
    s
}

/// `communication.csv` contents: numbers moved per client and round.
pub fn communication_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("round,client_id,upload,download\n");
    for m in report.metrics.iter().filter(|m| m.round > 0) {
        for (n, up) in m.upload.iter().enumerate() {
            let _ = writeln!(s, "{},{n},{up},{}", m.round, m.download);
        }
    }
    s
}

pub fn cmd_run(args: &CommonArgs) -> Result<RunManifest, Failure> {
    let mut session = Session::open(args)?;
    let report = session.runner.run(&session.cfg).map_err(classify)?;
    session.write("metrics.csv", &metrics_csv(&report))?;
    session.write("gen_loss.csv", &gen_loss_csv(&report))?;
    session.write("communication.csv", &communication_csv(&report))?;
    session.finish("run", &[], &[])
}

pub fn cmd_grid(args: &CommonArgs, taus1: &[f64], taus2: &[f64]) -> Result<RunManifest, Failure> {
    let mut session = Session::open(args)?;
    let grid = session
        .runner
        .temperature_grid(&session.cfg, taus1, taus2)
        .map_err(classify)?;
    let cell = |v: &Option<f64>| v.map_or_else(|| "nan".to_string(), num);
    let mut wide = grid.taus2.iter().map(|t| format!("tau2={t}")).collect::<Vec<_>>().join(",");
    wide.push('\n');
    let mut long = String::from("tau1,tau2,accuracy\n");
    for (t1, row) in grid.taus1.iter().zip(&grid.accuracy) {
        wide += &row.iter().map(cell).collect::<Vec<_>>().join(",");
        wide.push('\n');
        for (t2, v) in grid.taus2.iter().zip(row) {
            let _ = writeln!(long, "{},{},{}", num(*t1), num(*t2), cell(v));
        }
    }
    session.write("grid.csv", &wide)?;
    session.write("grid_cells.csv", &long)?;
    session.finish("grid", taus1, taus2)
}

pub fn cmd_ablation(args: &CommonArgs) -> Result<RunManifest, Failure> {
    let mut session = Session::open(args)?;
    let ablation = session.runner.ablation_generator(&session.cfg).map_err(classify)?;
    let mut s = String::from("series,round,accuracy,gen_loss\n");
    for (label, report) in [("attention", &ablation.attention), ("mlp", &ablation.mlp)] {
        for m in &report.metrics {
            let _ = writeln!(s, "{label},{},{},{}", m.round, num(m.mean_accuracy), opt(m.gen_loss));
        }
    }
    session.write("ablation.csv", &s)?;
    session.finish("ablation", &[], &[])
}
