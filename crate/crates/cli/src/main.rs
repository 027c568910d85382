//! Command-line entry points for the stden toolkit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration (exit 2).
    Config(String),
    /// Failure while running (exit 3).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<stden::Error> for CliError {
    fn from(e: stden::Error) -> Self {
        match e {
            stden::Error::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "stden", version, about = "Physics-guided traffic forecasting on road networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random connected road network.
    GenGraph(Flags),
    /// Simulate flows and true potentials on a (given or generated) network.
    Simulate(Flags),
    /// Check that simulated potentials conserve the energy total.
    VerifyConservation(Flags),
    /// Train a model and write its checkpoint and history.
    Train(Flags),
    /// Score a checkpoint (or the historical average) at several horizons.
    Evaluate(Flags),
    /// Forecast the next H steps from one history window.
    Predict(Flags),
    /// Sweep the adaptive solver tolerance and tabulate cost against error.
    NfeStudy(Flags),
    /// Export latent potentials and decoded flows for one window.
    InspectPef(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<String>,
    #[arg(long)]
    flows: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// stden, ha, gru, unkp or incp.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated horizon steps to evaluate.
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long = "rtol-list")]
    rtol_list: Option<String>,
    /// Simulation dynamics: tanh or linear.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long = "latent-dim")]
    latent_dim: Option<String>,
    #[arg(long = "gru-hidden")]
    gru_hidden: Option<String>,
    /// History window CSV for predict and inspect-pef.
    #[arg(long)]
    history: Option<String>,
    /// True potential CSV for verify-conservation.
    #[arg(long)]
    pef: Option<String>,
    /// Ground-truth parameter file for verify-conservation.
    #[arg(long)]
    truth: Option<String>,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.merge_file(p)?;
        }
        let pairs = [
            ("graph", &self.graph),
            ("flows", &self.flows),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("model", &self.model),
            ("seed", &self.seed),
            ("horizons", &self.horizon),
            ("rtol_list", &self.rtol_list),
            ("mode", &self.mode),
            ("noise", &self.noise),
            ("latent_dim", &self.latent_dim),
            ("gru_hidden", &self.gru_hidden),
            ("history", &self.history),
            ("pef", &self.pef),
            ("truth", &self.truth),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenGraph(f) => commands::gen_graph(&f.resolve()?),
        Command::Simulate(f) => commands::simulate(&f.resolve()?),
        Command::VerifyConservation(f) => commands::verify_conservation(&f.resolve()?),
        Command::Train(f) => commands::train(&f.resolve()?),
        Command::Evaluate(f) => commands::evaluate(&f.resolve()?),
        Command::Predict(f) => commands::predict(&f.resolve()?),
        Command::NfeStudy(f) => commands::nfe_study(&f.resolve()?),
        Command::InspectPef(f) => commands::inspect_pef(&f.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 3,
            })
        }
    }
}
