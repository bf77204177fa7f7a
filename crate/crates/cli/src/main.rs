//! `ditpar`: communication cost tables, pipeline schedules, timeline
//! simulation and toy-network emulation for parallel DiT inference.
//!
//! Exit status is 0 on success, 1 on internal or numeric failure and 2 on a
//! usage or validation error.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ditpar", version, about = "Parallel DiT inference planner and emulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write the main output here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for the toy network and initial latent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKindArg {
    Pipefusion,
    Distrifusion,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    PatchNumber,
    Warmup,
    Devices,
}

/// Schedule shape; each value defaults to the config.
#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    #[arg(long, value_enum, default_value_t = ScheduleKindArg::Pipefusion)]
    pub kind: ScheduleKindArg,
    /// Devices.
    #[arg(long)]
    pub n: Option<usize>,
    /// Patches.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

/// Plan and workload overrides shared by `simulate` and `sweep`.
#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    /// tp, sp-ulysses, sp-ring, usp, distrifusion or pipefusion.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub devices: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub ulysses: Option<usize>,
    #[arg(long)]
    pub ring: Option<usize>,
    #[arg(long)]
    pub cfg: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Link bandwidth in bytes/s.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-step communication and memory of the baseline strategies, best first.
    Cost {
        /// paper-approx or exact.
        #[arg(long, default_value = "paper-approx")]
        mode: String,
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        patches: Option<usize>,
    },
    /// Build a pipeline schedule; JSON/CSV of every micro-step, or an ASCII Gantt.
    Schedule {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        gantt: bool,
    },
    /// Age of the KV data each micro-step attends to.
    Freshness {
        #[command(flatten)]
        grid: GridArgs,
        /// Fresh fraction per active (slot, device) instead of the full map.
        #[arg(long)]
        series: bool,
        /// Text heat strips instead of data.
        #[arg(long)]
        strip: bool,
    },
    /// Simulate one run and print its summary.
    Simulate {
        #[command(flatten)]
        plan: PlanArgs,
        /// Also write the event trace (JSON) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print an ASCII timeline this many columns wide instead of the summary.
        #[arg(long)]
        gantt: Option<usize>,
    },
    /// Sweep patch number, warmup steps or device count.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        plan: PlanArgs,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Device sweep strategies; `usp` picks the best mesh and `pipefusion` uses M = N.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Run the toy network serially or with stale activations and report divergence.
    Execute {
        /// serial, pipefusion or distrifusion.
        #[arg(long)]
        strategy: Option<String>,
        /// Run serial, pipefusion and distrifusion and report all three.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden_size: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        /// Choose the warmup count by latent-change detection with this threshold.
        #[arg(long)]
        auto_warmup: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
