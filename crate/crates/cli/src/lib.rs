//! Command-line experiments over the `moeforge` engine.
//!
//! Every subcommand writes a JSON report embedding its configuration and
//! seed; reports of identical invocations differ only in
//! `wall_clock_seconds`. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime or numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod error;
pub mod files;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "moeforge", version, about = "Grouped, compressed mixture-of-experts experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a synthetic clustered regression task.
    Train(TrainArgs),
    /// Write a random, planted or low-rank expert bank.
    MakeBank(MakeBankArgs),
    /// Group the experts of a bank by fused similarity.
    Cluster(ClusterArgs),
    /// Factor a grouped bank into shared bases and low-rank residuals.
    Compress(CompressArgs),
    /// Reconstruction error and compression ratio over a set of ranks.
    SweepRank(SweepRankArgs),
    /// Route a Zipf token stream with flat and hierarchical routers.
    RouteSim(RouteSimArgs),
    /// All-to-all byte accounting for flat and hierarchical decision dumps.
    CommSim(CommSimArgs),
    /// Offload and prefetch simulation over a compressed archive.
    MemSim(MemSimArgs),
    /// INT4 and FP16 round-trip errors over a bank.
    Quantize(QuantizeArgs),
    /// Summarize a training report as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration; its fields override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also train the uncompressed flat baseline and report both.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct MakeBankArgs {
    #[arg(long, default_value_t = 32)]
    pub experts: usize,
    #[arg(long, default_value_t = 64)]
    pub d_in: usize,
    #[arg(long, default_value_t = 64)]
    pub d_out: usize,
    /// Plant this many groups of near-copies.
    #[arg(long)]
    pub planted_groups: Option<usize>,
    /// Per-copy noise relative to the anchor norm (planted banks).
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Make within-group deviations exactly this rank (planted banks).
    #[arg(long)]
    pub residual_rank: Option<usize>,
    /// Deviation norm relative to the anchor norm (low-rank banks).
    #[arg(long, default_value_t = 0.3)]
    pub residual_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; printed when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, short = 'g')]
    pub groups: usize,
    #[arg(long, default_value_t = moeforge::clustering::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = moeforge::clustering::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long)]
    pub neighbor_cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Planted labels (JSON array) to score the grouping against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp64,
    Int4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Svd,
    Random,
}

#[derive(Debug, Args)]
pub struct GroupingArgs {
    /// Cluster report or assignment JSON.
    #[arg(long, conflicts_with = "groups")]
    pub assignment: Option<PathBuf>,
    /// Contiguous groups of equal size when no assignment is given.
    #[arg(long, short = 'g')]
    pub groups: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub grouping: GroupingArgs,
    #[arg(long, short = 'r', default_value_t = moeforge::compression::DEFAULT_RANK)]
    pub rank: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Svd)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Int4)]
    pub precision: PrecisionArg,
    /// Prune residuals whose cosine with the base is below this.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepRankArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub grouping: GroupingArgs,
    #[arg(long, value_delimiter = ',', default_values_t = moeforge::compression::DEFAULT_SWEEP_RANKS)]
    pub ranks: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RouteSimArgs {
    #[arg(long, default_value_t = 64)]
    pub experts: usize,
    #[arg(long, short = 'g', default_value_t = 8)]
    pub groups: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = moeforge::routing::DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = moeforge::routing::DEFAULT_G1)]
    pub g1: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 100_000)]
    pub tokens: usize,
    #[arg(long, default_value_t = 1000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 1.0)]
    pub router_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives flat.jsonl, hier.jsonl and route_report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    GroupLocal,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccountingArg {
    PerExpert,
    PerDevice,
}

#[derive(Debug, Args)]
pub struct CommSimArgs {
    /// Flat-routing decisions (JSON lines).
    #[arg(long)]
    pub flat: PathBuf,
    /// Hierarchical-routing decisions for the same tokens (JSON lines).
    #[arg(long)]
    pub hier: PathBuf,
    #[arg(long)]
    pub experts: usize,
    #[command(flatten)]
    pub grouping: GroupingArgs,
    #[arg(long, default_value_t = 2)]
    pub devices: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::GroupLocal)]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = AccountingArg::PerExpert)]
    pub accounting: AccountingArg,
    /// Token width in elements.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_element: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MemSimArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Activated groups per step (JSON lines of arrays); a Zipf trace is
    /// generated when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub active_per_step: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 10)]
    pub s_idle: u64,
    #[arg(long, default_value_t = 2)]
    pub lookahead: usize,
    #[arg(long, default_value_t = 0.1)]
    pub ema_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub min_score: f64,
    /// Backing store for offloaded sections; defaults next to the report.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Elements per INT4 block.
    #[arg(long, default_value_t = 64)]
    pub block: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `run_report.json` written by `train`.
    #[arg(long)]
    pub input: PathBuf,
    /// Objective series as CSV; printed when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    use commands::*;
    match command {
        Command::Train(a) => train::cmd_train(&a),
        Command::MakeBank(a) => bank::cmd_make_bank(&a),
        Command::Cluster(a) => bank::cmd_cluster(&a),
        Command::Compress(a) => bank::cmd_compress(&a),
        Command::SweepRank(a) => bank::cmd_sweep_rank(&a),
        Command::Quantize(a) => bank::cmd_quantize(&a),
        Command::RouteSim(a) => route::cmd_route_sim(&a),
        Command::CommSim(a) => route::cmd_commsim(&a),
        Command::MemSim(a) => memory::cmd_mem_sim(&a),
        Command::Report(a) => train::cmd_report(&a),
    }
}
