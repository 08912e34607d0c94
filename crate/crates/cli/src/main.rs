//! `cahqp` — configuration-driven runner for the cloud-edge adaptation
//! experiments: full runs, the component ablation grid, chart emission, and
//! benchmark dataset dumps.

mod font;
mod plot;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use cahqp_core::pipeline::ExperimentConfig;
use clap::{Args, Parser, Subcommand};

/// Default output root when `--out` is not given; results land under
/// `<root>/<config name>/<subcommand>`.
pub const OUT_ROOT_ENV: &str = "CAHQP_OUT_ROOT";

#[derive(Parser)]
#[command(name = "cahqp", version, about = "Cloud-edge detector adaptation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, then run the full collaboration cycle per seed.
    Run(RunArgs),
    /// The five-row component ablation over every seed.
    Ablation(RunArgs),
    /// Render bar charts from previously written report files.
    Plot(PlotArgs),
    /// Write the synthetic benchmark splits to disk.
    GenData(GenDataArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $CAHQP_OUT_ROOT/<name>/<subcommand>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Echo the effective config and the step budget without training.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    overrides: Overrides,
}

/// Command-line overrides; precedence is flags > config file > defaults.
#[derive(Args, Default)]
pub struct Overrides {
    /// Run a single seed instead of the config's list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Adaptation epochs per cycle.
    #[arg(long)]
    epochs: Option<usize>,
    /// Force global (domain-query) alignment on.
    #[arg(long, overrides_with = "no_dqfa")]
    dqfa: bool,
    /// Force global alignment off.
    #[arg(long)]
    no_dqfa: bool,
    /// Force instance-aware alignment on.
    #[arg(long, overrides_with = "no_tiafa")]
    tiafa: bool,
    /// Force instance-aware alignment off.
    #[arg(long)]
    no_tiafa: bool,
    /// Force visual prompts on.
    #[arg(long, overrides_with = "no_vpg")]
    vpg: bool,
    /// Force visual prompts off.
    #[arg(long)]
    no_vpg: bool,
}

impl Overrides {
    fn flag(on: bool, off: bool) -> Option<bool> {
        match (on, off) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(tau) = self.tau {
            cfg.adversarial.tau = tau;
        }
        if let Some(epochs) = self.epochs {
            cfg.schedule.adapt_epochs = epochs;
        }
        if let Some(v) = Self::flag(self.dqfa, self.no_dqfa) {
            cfg.components.dqfa = v;
        }
        if let Some(v) = Self::flag(self.tiafa, self.no_tiafa) {
            cfg.components.tiafa = v;
        }
        if let Some(v) = Self::flag(self.vpg, self.no_vpg) {
            cfg.components.vpg = v;
        }
    }
}

#[derive(Args)]
pub struct PlotArgs {
    /// Directory holding reports.jsonl and/or ablation.jsonl.
    dir: PathBuf,
    /// Where to write the images (default: the report directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Experiment config (TOML); only the dataset section is used.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $CAHQP_OUT_ROOT/<name>/data.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit-code buckets: config problems exit 2, everything else 1.
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn from_core(e: cahqp_core::Error) -> Self {
        match e {
            cahqp_core::Error::Config(msg) => Failure::Config(msg),
            e @ cahqp_core::Error::TomlParse(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => runs::cmd_run(args),
        Command::Ablation(args) => runs::cmd_ablation(args),
        Command::Plot(args) => plot::cmd_plot(args),
        Command::GenData(args) => runs::cmd_gen_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
