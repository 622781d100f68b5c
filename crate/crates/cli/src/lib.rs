//! Operator surface for the toolkit. Each subcommand is a plain function so
//! tests can drive it without spawning the binary; `main.rs` only parses
//! arguments and maps errors to exit codes.

pub mod commands;
pub mod defaults;
pub mod manifest;
pub mod package;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_bench, cmd_eval, cmd_profile, cmd_score, cmd_train, resolve_model, resolve_plan,
    EvalOutcome, GateStatus, ProfileOutcome, ScoreOutcome, TrainOutcome,
};
pub use manifest::RunManifest;
pub use package::{cmd_package, PackageOutcome};

pub const DATA_ROOT_ENV: &str = "EFFDEBLUR_DATA_ROOT";
pub const DEVICE_ENV: &str = "EFFDEBLUR_DEVICE";

/// Failures with a fixed exit code. Anything else exits with 1.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit 2.
    Usage(String),
    /// Gate or validation failure: exit 1.
    Rejected(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Rejected(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<CliError>() {
        Some(CliError::Usage(_)) => 2,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "effdeblur",
    version,
    about = "Efficient image deblurring toolkit"
)]
pub struct Cli {
    /// Seed for weight init, sampling and benchmark inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Print every embedded default config as TOML, or write them under DIR.
    #[arg(long, value_name = "DIR", num_args = 0..=1)]
    pub dump_defaults: Option<Option<PathBuf>>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and MAC count, optionally timed, with the efficiency gate.
    Profile(ProfileArgs),
    /// Run a staged training plan.
    Train(TrainArgs),
    /// Restore every blurred image of a split.
    Eval(EvalArgs),
    /// Score predictions against ground truth.
    Score(ScoreArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Build a submission archive.
    Package(PackageArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    #[default]
    Challenge,
    Full,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    /// Family name, grid point such as `nafnet-c16-l28`, or a model TOML file.
    pub model: String,
    #[arg(long, default_value = "1920x1200")]
    pub res: String,
    /// Timed forward passes; 0 skips timing.
    #[arg(long, default_value_t = 0)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Exit 1 unless the model passes the efficiency gate.
    #[arg(long)]
    pub gate: bool,
    #[arg(long, value_enum, default_value_t = PolicyArg::Challenge)]
    pub policy: PolicyArg,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Plan TOML file or shipped plan name.
    pub plan: String,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Root holding the `val` split; defaults to the data root.
    #[arg(long)]
    pub val_root: Option<PathBuf>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Override the step count of every stage.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Perceptual backend JSON for perceptual loss terms.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Stop after this many global steps (for interrupt testing).
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    #[default]
    Mean,
    Median,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `identity`, `flips`, `flips_scale`, or a list such as `identity,hflip`.
    #[arg(long, default_value = "identity")]
    pub tta: String,
    #[arg(long, value_enum, default_value_t = MergeArg::Mean)]
    pub tta_merge: MergeArg,
    /// Tile size for tiled restoration.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    /// Use the raw weights even when the checkpoint carries EMA weights.
    #[arg(long)]
    pub raw: bool,
    /// Largest image restored in one pass before tiling is required.
    #[arg(long, default_value_t = 8_000_000)]
    pub max_pixels: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    pub pred_dir: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub gt_root: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Composite weights `l1,l2,l3` for PSNR, SSIM and LPIPS.
    #[arg(long, default_value = "1,0,0")]
    pub weights: String,
    /// Perceptual backend JSON, or `stub` for the pixel-space backend.
    #[arg(long)]
    pub backend: Option<String>,
    /// Directory for `scores.csv`, `report.json` and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Row label in the summary table.
    #[arg(long, default_value = "submission")]
    pub name: String,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    pub model: String,
    #[arg(long, default_value = "1920x1200")]
    pub res: String,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PackageArgs {
    pub checkpoint: PathBuf,
    pub pred_dir: PathBuf,
    /// Factsheet entry `key=value`; repeatable.
    #[arg(long = "field", value_name = "KEY=VALUE")]
    pub fields: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Package even when the model fails the efficiency gate.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub raw: bool,
}

/// Only the CPU backend exists; anything else in the device variable is a
/// usage error rather than a silent fallback.
pub fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_ENV) {
        Ok(v) if !v.eq_ignore_ascii_case("cpu") && !v.is_empty() => Err(CliError::Usage(format!(
            "{DEVICE_ENV}={v:?} is not available; only \"cpu\" is supported"
        ))),
        _ => Ok(()),
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    check_device()?;
    if let Some(dir) = &cli.dump_defaults {
        match dir {
            Some(d) => {
                for p in defaults::write_defaults(d)? {
                    println!("{}", p.display());
                }
            }
            None => print!("{}", defaults::render_defaults()?),
        }
        return Ok(0);
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()).into());
    };
    match command {
        Command::Profile(a) => {
            let out = cmd_profile(&a, cli.seed)?;
            Ok(if a.gate && !matches!(out.gate, GateStatus::Pass) {
                1
            } else {
                0
            })
        }
        Command::Train(a) => cmd_train(&a, cli.seed).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a, cli.seed).map(|_| 0),
        Command::Score(a) => cmd_score(&a, cli.seed).map(|_| 0),
        Command::Bench(a) => cmd_bench(&a, cli.seed).map(|_| 0),
        Command::Package(a) => cmd_package(&a, cli.seed).map(|_| 0),
    }
}

/// Parses `args` (program name first) and runs them. Parse failures print
/// clap's message and return its exit code (2 for usage errors).
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
