//! Command-line experiment harness.
//!
//! Four subcommands cover the study workflow: `train` fits one model and
//! logs periodic evaluations, `eval` scores a saved checkpoint, `overfit`
//! sweeps models over shrinking training subsets, and `mc-sweep` traces
//! test error against the Monte Carlo sample count.  Every run writes CSV
//! rows in the frozen [`csvout::CSV_HEADER`] schema; rerunning a command
//! with the same flags and seed rewrites identical bytes except for the
//! `wall_ms` column.
//!
//! Settings resolve in three layers: built-in defaults, then a
//! `key = value` config file (`--config`), then environment variables and
//! explicit flags.  Config keys mirror the long flag names with `_` for
//! `-`; keys a subcommand does not use are ignored.

pub mod config;
pub mod csvout;
pub mod zoo;

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::data::Fraction;
use crate::optim::EvalMode;
use config::ConfigMap;
use zoo::ModelKind;

/// Top-level argument surface.
#[derive(Debug, Parser)]
#[command(
    name = "bcnn",
    version,
    about = "Train and evaluate Bernoulli-dropout Bayesian CNNs on MNIST",
    subcommand_required = true,
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, logging train loss and test error at a fixed cadence
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test set
    Eval(EvalArgs),
    /// Train across models and training-set fractions (over-fitting study)
    Overfit(OverfitArgs),
    /// Trace a checkpoint's test error against the Monte Carlo sample count
    McSweep(SweepArgs),
}

/// How test predictions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    /// One deterministic pass with activations scaled by the keep
    /// probabilities.
    Standard,
    /// Average the class probabilities of repeated stochastic passes.
    Mc,
}

impl EvalModeArg {
    pub fn to_mode(self) -> EvalMode {
        match self {
            EvalModeArg::Standard => EvalMode::Standard,
            EvalModeArg::Mc => EvalMode::Mc,
        }
    }
}

impl fmt::Display for EvalModeArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalModeArg::Standard => "standard",
            EvalModeArg::Mc => "mc",
        })
    }
}

impl FromStr for EvalModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <EvalModeArg as ValueEnum>::from_str(s, true)
    }
}

/// Data and output locations shared by every subcommand.
#[derive(Debug, Args)]
pub struct IoArgs {
    /// Directory holding the four MNIST idx files
    #[arg(long, env = "BCNN_DATA_DIR", default_value = "data/mnist")]
    pub data_dir: PathBuf,

    /// Directory for CSV logs and checkpoints
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,

    /// `key = value` config file; flags and environment override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Optimiser constants: inverse-decay learning rate
/// `base_lr * (1 + gamma * iter)^(-power)` with classical momentum and L2
/// weight decay.
#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Base learning rate
    #[arg(long, default_value_t = 0.01)]
    pub base_lr: f64,

    /// Learning-rate decay coefficient
    #[arg(long, default_value_t = 1e-4)]
    pub gamma: f64,

    /// Learning-rate decay exponent
    #[arg(long, default_value_t = 0.75)]
    pub power: f64,

    /// Classical momentum coefficient
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,

    /// L2 coefficient applied to all weights and biases
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model to train
    #[arg(long, value_enum, default_value_t = ModelKind::LenetAll)]
    pub model: ModelKind,

    /// Fraction of the training set to use, e.g. 1, 1/4 or 1/32
    #[arg(long, default_value_t = Fraction::ONE)]
    pub subset: Fraction,

    /// Seed for initialisation, shuffling, subset choice and dropout
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Training iterations [default: 20000 for the full set, 10000 for
    /// subsets]
    #[arg(long)]
    pub max_iters: Option<u64>,

    /// Mini-batch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    /// Evaluate and log every this many iterations
    #[arg(long, default_value_t = 1000)]
    pub eval_every: u64,

    /// Stochastic passes per image for mc evaluation rows
    #[arg(long, default_value_t = 10)]
    pub mc_samples: usize,

    /// Prediction rules evaluated at each logged point
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [EvalModeArg::Standard, EvalModeArg::Mc])]
    pub eval_modes: Vec<EvalModeArg>,

    /// Run identifier used in CSV rows and file names
    /// [default: train_<model>_<subset>_s<seed>]
    #[arg(long)]
    pub run_id: Option<String>,

    #[command(flatten)]
    pub hyper: HyperArgs,

    #[command(flatten)]
    pub io: IoArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Prediction rule
    #[arg(long, value_enum, default_value_t = EvalModeArg::Mc)]
    pub mode: EvalModeArg,

    /// Stochastic passes per image in mc mode
    #[arg(long, default_value_t = 50)]
    pub t: usize,

    /// Independent mc repetitions; their mean and standard deviation are
    /// appended as summary rows
    #[arg(long, default_value_t = 5)]
    pub repeats: u64,

    /// Seed for the evaluation masks
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Run identifier [default: eval_<model>_<mode>...]
    #[arg(long)]
    pub run_id: Option<String>,

    #[command(flatten)]
    pub io: IoArgs,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    /// Models to train, comma separated
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ModelKind::LenetIp, ModelKind::LenetAll])]
    pub models: Vec<ModelKind>,

    /// Training-set fractions to sweep, comma separated
    #[arg(long, value_delimiter = ',',
          default_values_t = [Fraction::ONE, Fraction::QUARTER, Fraction::THIRTY_SECOND])]
    pub fractions: Vec<Fraction>,

    /// Seed shared by every cell of the sweep
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Training iterations per cell [default: 20000 for the full set,
    /// 10000 for subsets]
    #[arg(long)]
    pub max_iters: Option<u64>,

    /// Mini-batch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    /// Evaluate and log every this many iterations
    #[arg(long, default_value_t = 1000)]
    pub eval_every: u64,

    /// Stochastic passes per image when a model is evaluated with mc
    #[arg(long, default_value_t = 10)]
    pub mc_samples: usize,

    #[command(flatten)]
    pub hyper: HyperArgs,

    #[command(flatten)]
    pub io: IoArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint file to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Sample counts: an inclusive range `lo..hi` or a comma list
    #[arg(long, default_value = "1..100")]
    pub t_grid: String,

    /// Independent repetitions per sample count
    #[arg(long, default_value_t = 5)]
    pub repeats: u64,

    /// Seed for the evaluation masks
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Run identifier [default: mcsweep_<model>_s<seed>]
    #[arg(long)]
    pub run_id: Option<String>,

    #[command(flatten)]
    pub io: IoArgs,
}

/// A command failure, split by exit code: usage errors exit 2, everything
/// else exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Parses arguments from the process environment, runs the selected
/// command and returns the process exit code: 0 on success, 1 on runtime
/// errors, 2 on usage errors.
pub fn run() -> i32 {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // Help and version requests print to stdout and exit clean;
            // actual argument errors go to stderr with the usage code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match dispatch(cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, sub: &ArgMatches) -> Result<(), CliError> {
    match command {
        Command::Train(mut a) => {
            if let Some(file) = load_config_for(&a.io)? {
                merge_train(&mut a, sub, &file)?;
            }
            commands::cmd_train(a)
        }
        Command::Eval(mut a) => {
            if let Some(file) = load_config_for(&a.io)? {
                merge_eval(&mut a, sub, &file)?;
            }
            commands::cmd_eval(a)
        }
        Command::Overfit(mut a) => {
            if let Some(file) = load_config_for(&a.io)? {
                merge_overfit(&mut a, sub, &file)?;
            }
            commands::cmd_overfit(a)
        }
        Command::McSweep(mut a) => {
            if let Some(file) = load_config_for(&a.io)? {
                merge_sweep(&mut a, sub, &file)?;
            }
            commands::cmd_mc_sweep(a)
        }
    }
}

fn load_config_for(io: &IoArgs) -> Result<Option<ConfigMap>, CliError> {
    match &io.config {
        None => Ok(None),
        Some(path) => config::load_config(path).map(Some).map_err(CliError::Usage),
    }
}

/// True when the config file is allowed to override this argument: the
/// command line and environment were silent about it.
fn file_wins(sub: &ArgMatches, id: &str) -> bool {
    matches!(sub.value_source(id), None | Some(ValueSource::DefaultValue))
}

fn parse_key<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
}

/// Applies a scalar config-file entry unless a flag or environment
/// variable already set the argument.
fn set<T: FromStr>(
    sub: &ArgMatches,
    file: &ConfigMap,
    key: &str,
    slot: &mut T,
) -> Result<(), CliError>
where
    T::Err: fmt::Display,
{
    if let Some(raw) = file.get(key) {
        if file_wins(sub, key) {
            *slot = parse_key(key, raw)?;
        }
    }
    Ok(())
}

/// As [`set`], for arguments that have no built-in default.
fn set_opt<T: FromStr>(
    sub: &ArgMatches,
    file: &ConfigMap,
    key: &str,
    slot: &mut Option<T>,
) -> Result<(), CliError>
where
    T::Err: fmt::Display,
{
    if let Some(raw) = file.get(key) {
        if file_wins(sub, key) {
            *slot = Some(parse_key(key, raw)?);
        }
    }
    Ok(())
}

/// As [`set`], for comma-separated list arguments.
fn set_list<T: FromStr>(
    sub: &ArgMatches,
    file: &ConfigMap,
    key: &str,
    slot: &mut Vec<T>,
) -> Result<(), CliError>
where
    T::Err: fmt::Display,
{
    if let Some(raw) = file.get(key) {
        if file_wins(sub, key) {
            *slot = raw
                .split(',')
                .map(|part| parse_key(key, part.trim()))
                .collect::<Result<_, _>>()?;
        }
    }
    Ok(())
}

fn merge_hyper(h: &mut HyperArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set(sub, file, "base_lr", &mut h.base_lr)?;
    set(sub, file, "gamma", &mut h.gamma)?;
    set(sub, file, "power", &mut h.power)?;
    set(sub, file, "momentum", &mut h.momentum)?;
    set(sub, file, "weight_decay", &mut h.weight_decay)?;
    Ok(())
}

fn merge_io(io: &mut IoArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set(sub, file, "data_dir", &mut io.data_dir)?;
    set(sub, file, "out", &mut io.out)?;
    Ok(())
}

fn merge_train(a: &mut TrainArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set(sub, file, "model", &mut a.model)?;
    set(sub, file, "subset", &mut a.subset)?;
    set(sub, file, "seed", &mut a.seed)?;
    set_opt(sub, file, "max_iters", &mut a.max_iters)?;
    set(sub, file, "batch_size", &mut a.batch_size)?;
    set(sub, file, "eval_every", &mut a.eval_every)?;
    set(sub, file, "mc_samples", &mut a.mc_samples)?;
    set_list(sub, file, "eval_modes", &mut a.eval_modes)?;
    set_opt(sub, file, "run_id", &mut a.run_id)?;
    merge_hyper(&mut a.hyper, sub, file)?;
    merge_io(&mut a.io, sub, file)
}

fn merge_eval(a: &mut EvalArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set(sub, file, "mode", &mut a.mode)?;
    set(sub, file, "t", &mut a.t)?;
    set(sub, file, "repeats", &mut a.repeats)?;
    set(sub, file, "seed", &mut a.seed)?;
    set_opt(sub, file, "run_id", &mut a.run_id)?;
    merge_io(&mut a.io, sub, file)
}

fn merge_overfit(a: &mut OverfitArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set_list(sub, file, "models", &mut a.models)?;
    set_list(sub, file, "fractions", &mut a.fractions)?;
    set(sub, file, "seed", &mut a.seed)?;
    set_opt(sub, file, "max_iters", &mut a.max_iters)?;
    set(sub, file, "batch_size", &mut a.batch_size)?;
    set(sub, file, "eval_every", &mut a.eval_every)?;
    set(sub, file, "mc_samples", &mut a.mc_samples)?;
    merge_hyper(&mut a.hyper, sub, file)?;
    merge_io(&mut a.io, sub, file)
}

fn merge_sweep(a: &mut SweepArgs, sub: &ArgMatches, file: &ConfigMap) -> Result<(), CliError> {
    set(sub, file, "t_grid", &mut a.t_grid)?;
    set(sub, file, "repeats", &mut a.repeats)?;
    set(sub, file, "seed", &mut a.seed)?;
    set_opt(sub, file, "run_id", &mut a.run_id)?;
    merge_io(&mut a.io, sub, file)
}

/// Parses a sample-count grid: either an inclusive integer range `lo..hi`
/// or a comma-separated list.  The result is sorted, deduplicated and
/// validated to contain only counts >= 1.
pub fn parse_t_grid(text: &str) -> Result<Vec<usize>, String> {
    let bad = |what: &str| format!("invalid sample-count grid `{text}`: {what}");
    let mut grid: Vec<usize> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad("range start is not an integer"))?;
        let hi: usize = hi.trim().parse().map_err(|_| bad("range end is not an integer"))?;
        if lo > hi {
            return Err(bad("range start exceeds range end"));
        }
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|part| part.trim().parse().map_err(|_| bad("entries must be integers")))
            .collect::<Result<_, _>>()?
    };
    grid.sort_unstable();
    grid.dedup();
    match grid.first() {
        None => Err(bad("grid is empty")),
        Some(0) => Err(bad("sample counts must be >= 1")),
        Some(_) => Ok(grid),
    }
}
