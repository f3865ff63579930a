use std::path::PathBuf;
use std::process::ExitCode;

use caustiq::RunConfig;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

mod cmd_ensemble;
mod cmd_paths;
mod cmd_pure;
mod config;
mod failure;
mod run;

use failure::Failure;

#[derive(Parser)]
#[command(
    name = "caustiq",
    version,
    about = "Quantum trajectories, most-likely paths and caustics of a monitored qubit"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CAUSTIQ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble of quantum trajectories.
    Simulate(cmd_ensemble::SimulateArgs),
    /// Keep trajectories meeting initial and final boundary conditions.
    Postselect(cmd_ensemble::PostselectArgs),
    /// Ensemble statistics: noise moments, clamping, mean against the Lindblad solution.
    Stats(cmd_ensemble::StatsArgs),
    /// Theory MLPs by shooting, and the distance/probability estimates from a post-selected ensemble.
    Mlp(cmd_paths::MlpArgs),
    /// Lagrangian manifold sweep, pin tests and fold curve.
    Manifold(cmd_paths::ManifoldArgs),
    /// Bipartition of a post-selected ensemble and the relative-probability fit.
    Cluster(cmd_paths::ClusterArgs),
    /// Pure-state fixed points, bifurcation scan and winding paths.
    Purestate(cmd_pure::PurestateArgs),
    /// Pure-state phase portrait grid.
    Portrait(cmd_pure::PortraitArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// JSON config file or a previous run's manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Label appended to the run directory name.
    #[arg(long)]
    pub tag: Option<String>,
    /// Exact output directory, replacing `<out-dir>/<timestamp>-<tag>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    pub dry_run: bool,
}

impl RunOpts {
    pub fn load<C>(&self, command: &str, flags: &impl Serialize) -> Result<C, Failure>
    where
        C: Serialize + DeserializeOwned + Default,
    {
        config::resolve(self.config.as_deref(), command, flags)
    }

    /// Validates the physical parameters and opens the run directory; `None` on a dry run.
    pub fn start(&self, command: &str, config: &impl Serialize, phys: &RunConfig) -> Result<Option<run::Run>, Failure> {
        phys.params()?;
        phys.grid()?;
        if self.dry_run {
            let text = serde_json::to_string_pretty(&json!({ "command": command, "config": config }))
                .map_err(|e| Failure::Config(e.to_string()))?;
            println!("{text}");
            return Ok(None);
        }
        let tag = self.tag.clone().unwrap_or_else(|| command.to_string());
        run::Run::start(command, config, phys.seed, &self.out_dir, &tag, self.run_dir.clone()).map(Some)
    }
}

/// Physical and grid overrides shared by the commands.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct PhysFlags {
    /// Decay rate γ, μs⁻¹.
    #[arg(long)]
    #[serde(rename = "gamma_per_us")]
    pub gamma: Option<f64>,
    /// Quantum efficiency η.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Drive Ω/2π, MHz.
    #[arg(long)]
    #[serde(rename = "omega_over_2pi_mhz")]
    pub omega_mhz: Option<f64>,
    /// Time step, μs.
    #[arg(long)]
    #[serde(rename = "dt_us")]
    pub dt: Option<f64>,
    /// Horizon T, μs.
    #[arg(long)]
    #[serde(rename = "t_final_us")]
    pub t_final: Option<f64>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn dispatch(command: Command) -> Result<Option<PathBuf>, Failure> {
    match command {
        Command::Simulate(a) => cmd_ensemble::simulate(a),
        Command::Postselect(a) => cmd_ensemble::postselect(a),
        Command::Stats(a) => cmd_ensemble::stats(a),
        Command::Mlp(a) => cmd_paths::mlp(a),
        Command::Manifold(a) => cmd_paths::manifold(a),
        Command::Cluster(a) => cmd_paths::cluster(a),
        Command::Purestate(a) => cmd_pure::purestate(a),
        Command::Portrait(a) => cmd_pure::portrait(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: configuration: thread count must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: configuration: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
