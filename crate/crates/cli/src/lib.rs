//! The `laddernat` command line: data generation, teacher training,
//! distillation, latent-model training, translation, evaluation, analysis
//! and benchmarking over a single run directory.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use laddernat::models::{Direction, ModelKind};

use config::{Config, Dtype};
use pipeline::{format_sequences, read_sequences, Metric, Run};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] laddernat::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "laddernat", version, about = "Latent-variable non-autoregressive translation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// INI config file.
    #[arg(long, alias = "spec")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Forward,
    Reverse,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and its splits.
    GenData(Common),
    /// Train the autoregressive teacher (both directions).
    TrainAt(Common),
    /// Distill both directions of the training split with the teacher.
    Kd(Common),
    /// Train a latent model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Translate one id sequence per line.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "forward")]
        direction: DirectionArg,
        #[arg(long, default_value_t = 0)]
        refinements: usize,
    },
    /// Test BLEU of every trained model.
    Eval(Common),
    /// Latent-space diagnostics.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        metric: Metric,
        #[arg(long, value_delimiter = ',', default_value = "lanmt,laddernmt")]
        models: Vec<ModelKind>,
    },
    /// Decoding speed against the autoregressive model.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "lanmt,laddernmt")]
        models: Vec<ModelKind>,
    },
    /// The whole pipeline from data generation to analysis.
    Repro(Common),
}

/// Worker threads from `LADDERNAT_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("LADDERNAT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("LADDERNAT_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn resolve(common: &Common, extra: &[(&str, String)]) -> Result<Run, CliError> {
    let mut b = Config::builder();
    if let Some(path) = &common.config {
        b = b.file(path)?;
    }
    for o in &common.overrides {
        b = b.assign(o)?;
    }
    if let Some(seed) = common.seed {
        b = b.set("run.seed", &seed.to_string())?;
    }
    for (k, v) in extra {
        b = b.set(k, v)?;
    }
    Run::new(b.build()?, &common.out, threads_from_env()?)
}

macro_rules! typed {
    ($run:expr, $method:ident $(, $arg:expr)*) => {
        match $run.cfg.dtype {
            Dtype::F32 => $run.$method::<f32>($($arg),*),
            Dtype::F64 => $run.$method::<f64>($($arg),*),
        }
    };
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(c) => resolve(&c, &[])?.gen_data(),
        Command::TrainAt(c) => typed!(resolve(&c, &[])?, train_at).map(drop),
        Command::Kd(c) => typed!(resolve(&c, &[])?, kd),
        Command::Train { common, model, rho, beta } => {
            let mut extra = Vec::new();
            if let Some(r) = rho {
                extra.push(("model.rho", r.to_string()));
            }
            if let Some(b) = beta {
                extra.push(("train.beta", b.to_string()));
            }
            typed!(resolve(&common, &extra)?, train_latent, model).map(drop)
        }
        Command::Translate {
            common,
            model,
            input,
            output,
            direction,
            refinements,
        } => {
            let run = resolve(&common, &[])?;
            let d = match direction {
                DirectionArg::Forward => Direction::Forward,
                DirectionArg::Reverse => Direction::Reverse,
            };
            let sources = read_sequences(&input)?;
            let out = typed!(run, translate, model, d, &sources, refinements)?;
            let text = format_sequences(&out);
            match output {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(&p, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Eval(c) => typed!(resolve(&c, &[])?, eval).map(drop),
        Command::Analyze { common, metric, models } => {
            typed!(resolve(&common, &[])?, analyze, metric, &models).map(drop)
        }
        Command::Bench { common, models } => typed!(resolve(&common, &[])?, bench, &models).map(drop),
        Command::Repro(c) => typed!(resolve(&c, &[])?, repro),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("laddernat: {e}");
            e.exit_code()
        }
    }
}
