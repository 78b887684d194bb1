//! `fairsite` command-line front end.
//!
//! Every command writes its artifacts plus a `<out>.run.json` record of how
//! they were produced. Exit codes: 0 success, 2 configuration error, 3 data
//! error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fairsite::fusion::FusionKind;
use fairsite::training::{DatasetVariant, Objective};
use fairsite::Error;

pub mod commands;
pub mod plot;
pub mod record;

pub const CACHE_ENV: &str = "FAIRSITE_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "fairsite", version, about = "Fair clinical trial site selection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Fixed execution mode: single worker, fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

impl GlobalArgs {
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Mcat,
    Fc,
}

impl From<FusionArg> for FusionKind {
    fn from(v: FusionArg) -> Self {
        match v {
            FusionArg::Mcat => FusionKind::Mcat,
            FusionArg::Fc => FusionKind::Fc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Missing,
    Full,
}

impl From<VariantArg> for DatasetVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Missing => DatasetVariant::Missing,
            VariantArg::Full => DatasetVariant::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Reinforce,
    Regression,
}

impl From<ObjectiveArg> for Objective {
    fn from(v: ObjectiveArg) -> Self {
        match v {
            ObjectiveArg::Reinforce => Objective::Reinforce,
            ObjectiveArg::Regression => Objective::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    /// The trained checkpoint.
    Model,
    /// Scores equal to the enrollment labels.
    Oracle,
    /// A random order per instance.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Overrides shared by train and sweep.
#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate deterministic top-K selection and write a metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Required for the model scorer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScorerArg::Model)]
        scorer: ScorerArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report λ for oracle and random scorers.
        #[arg(long)]
        lambda: Option<f64>,
        /// Load a checkpoint whose manifest hash differs from the dataset's.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one model per λ and write the trade-off table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,4,8")]
        lambdas: Vec<f64>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Draw trade-off curves and the race distribution table.
    Plot {
        /// Sweep tables or eval reports; one series per file.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Series names, in input order; defaults to file stems.
        #[arg(long = "label")]
        labels: Vec<String>,
    },
    /// Summarize a dataset.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
