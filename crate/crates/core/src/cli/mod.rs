//! The `coss` command line.
//!
//! Exit codes: 0 on success, 2 for user or input errors, 3 for internal
//! failures.

mod commands;
mod files;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::simgen::DEFAULT_SEED;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::User(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "coss", version, about = "Covariate ordered systematic sampling for A/B tests")]
pub struct Cli {
    /// Master seed (defaults to a fixed constant, or the config's seed for simulations).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (allocate, estimate) or directory (simulate, aa-test, bias-diagnostics).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Format of what is printed to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign the units of a CSV file to treatment and control.
    Allocate(AllocateArgs),
    /// Estimate the treatment effect from an allocation and its outcomes.
    Estimate(EstimateArgs),
    /// Replay a simulation study and compare it with the published table.
    Simulate(SimulateArgs),
    /// Run the study with no treatment effect and report type-1 error rates.
    AaTest(StudyArgs),
    /// Bias bound, empirical bias and variance terms over a grid of pair counts.
    BiasDiagnostics(BiasArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Coss,
    Rct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParityArg {
    TreatmentFirst,
    ControlFirst,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Unit CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "covariate")]
    pub covariate_column: String,
    #[arg(long, default_value = "id")]
    pub id_column: String,
    #[arg(long, value_enum, default_value_t = StrategyArg::Coss)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ParityArg::TreatmentFirst)]
    pub parity: ParityArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    DiffMeans,
    Cuped,
    Regression,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Allocation CSV written by `allocate`.
    #[arg(long)]
    pub allocation: PathBuf,
    /// Outcome CSV keyed by unit id.
    #[arg(long)]
    pub outcomes: PathBuf,
    #[arg(long, default_value = "id")]
    pub id_column: String,
    #[arg(long, default_value = "outcome")]
    pub outcome_column: String,
    /// Covariate column in the outcome file (needed by cuped and regression).
    #[arg(long)]
    pub covariate_column: Option<String>,
    #[arg(long, value_enum, default_value_t = MethodArg::DiffMeans, conflicts_with = "cuped")]
    pub method: MethodArg,
    /// Shorthand for `--method cuped`.
    #[arg(long)]
    pub cuped: bool,
    /// Test within COSS pairs instead of between independent arms.
    #[arg(long)]
    pub paired: bool,
    /// Also compute a bootstrap p-value with this many resamples.
    #[arg(long, value_name = "N")]
    pub bootstrap: Option<usize>,
    /// Also compute the bootstrap variance of the estimate with this many resamples.
    #[arg(long, value_name = "N")]
    pub bootstrap_variance: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "linear.paper")]
    LinearPaper,
    #[value(name = "quadratic.paper")]
    QuadraticPaper,
    #[value(name = "quadratic.b0")]
    QuadraticB0,
}

impl PresetArg {
    pub fn name(self) -> &'static str {
        match self {
            PresetArg::LinearPaper => "linear.paper",
            PresetArg::QuadraticPaper => "quadratic.paper",
            PresetArg::QuadraticB0 => "quadratic.b0",
        }
    }
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Bundled configuration (default: linear.paper).
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<PresetArg>,
    /// TOML file with SimulationConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Histogram bins per strategy.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    /// Published table to compare against (default: by relationship).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub table: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Identity,
    Exponential,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Pair counts to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50usize, 100, 200, 400])]
    pub pairs: Vec<usize>,
    /// Monte Carlo replications per grid point.
    #[arg(long, default_value_t = 4_000)]
    pub reps: usize,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    pub link: LinkArg,
    /// Slope (identity) or rate (exponential) of the link.
    #[arg(long, default_value_t = 1.0)]
    pub coefficient: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
}

/// Global options shared by every command.
pub struct Context<'a> {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub stdout: &'a mut (dyn Write + Send),
    pub stderr: &'a mut (dyn Write + Send),
}

impl Context<'_> {
    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn print(&mut self, text: &str) -> Result<(), CliError> {
        self.stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("cannot write to stdout: {e}")))
    }

    pub fn warn(&mut self, text: &str) {
        let _ = writeln!(self.stderr, "warning: {text}");
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let out: &mut (dyn Write + Send) = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(out, "{}", e.render());
            return code;
        }
    };
    let threads = cli.threads;
    let mut ctx = Context {
        seed: cli.seed,
        output: cli.output,
        format: cli.format,
        stdout,
        stderr,
    };
    let result = match threads {
        Some(0) => Err(CliError::User("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::dispatch(cli.command, &mut ctx)),
            Err(e) => Err(CliError::Internal(format!("cannot start thread pool: {e}"))),
        },
        None => commands::dispatch(cli.command, &mut ctx),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(ctx.stderr, "error: {e}");
            e.exit_code()
        }
    }
}
