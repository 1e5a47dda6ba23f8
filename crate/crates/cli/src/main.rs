mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echelon::config::Config;
use echelon::experiments::{rerun_manifest, run_experiment, ExperimentKind, ExperimentManifest};
use echelon::{Error, ErrorCategory};

/// Train, evaluate and explain PPO inventory policies on a serial supply chain.
///
/// Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 training, 6 contract.
#[derive(Parser, Debug)]
#[command(name = "echelon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one policy per experiment seed.
    Train(RunArgs),
    /// Evaluate checkpoints and report the IQM with a bootstrap interval.
    Evaluate(CheckpointArgs),
    /// Random hyperparameter search.
    Sweep(RunArgs),
    /// Train and evaluate every configured architecture plus a random baseline.
    Benchmark(RunArgs),
    /// Evaluate checkpoints over the configured horizons.
    Stability(OptionalCheckpointArgs),
    /// Evaluate checkpoints under demand disruptions of each configured strength.
    Disrupt(OptionalCheckpointArgs),
    /// Retrain with disruptions active and compare against default checkpoints.
    Harden(OptionalCheckpointArgs),
    /// Trace shape functions, feature importances and the lookup policy of a NAM checkpoint;
    /// with several checkpoints, also the median importances across them.
    Explain(CheckpointArgs),
    /// Render shape-function and trajectory CSVs to SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set ppo.learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// First training seed (sets `experiment.seed_base`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Replay a previously written manifest.json instead of reading a configuration.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed"])]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint file. Repeatable; order sets the seed index.
    #[arg(long = "checkpoint", required_unless_present = "manifest")]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct OptionalCheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint file. Repeatable; when absent, policies are trained first.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Directory holding task*.csv and density.csv written by `explain`.
    #[arg(long)]
    shapes: Option<PathBuf>,
    /// Trajectory CSV written by `evaluate`. Repeatable.
    #[arg(long = "trajectories")]
    trajectories: Vec<PathBuf>,
    /// Directory for the SVG files.
    #[arg(long, short, default_value = "plots")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Training => 5,
        ErrorCategory::Contract => 6,
    }
}

fn resolve(run: &RunArgs) -> echelon::Result<Config> {
    let mut overrides = run.overrides.clone();
    if let Some(seed) = run.seed {
        overrides.push(format!("experiment.seed_base={seed}"));
    }
    Config::load(run.config.as_deref(), &overrides)
}

fn execute(kind: ExperimentKind, run: &RunArgs, checkpoints: &[PathBuf]) -> echelon::Result<PathBuf> {
    let out = run
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(kind.to_string()));
    let manifest = match &run.manifest {
        Some(path) => {
            let m = ExperimentManifest::load(path)?;
            if m.kind != kind {
                return Err(Error::config("manifest", format!("manifest records a `{}` run, not `{kind}`", m.kind)));
            }
            echo(&m.config, &out)?;
            rerun_manifest(path, Some(&out))?
        }
        None => {
            let config = resolve(run)?;
            echo(&config, &out)?;
            run_experiment(kind, &config, checkpoints, &out)?
        }
    };
    println!("{} run written to {} (config {})", manifest.kind, out.display(), manifest.config_digest);
    Ok(out)
}

fn echo(config: &Config, out: &Path) -> echelon::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = config.to_toml();
    println!("# resolved configuration\n{text}");
    let path = out.join("resolved_config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(cli: Cli) -> echelon::Result<()> {
    match cli.command {
        Command::Train(a) => execute(ExperimentKind::Train, &a, &[]).map(drop),
        Command::Sweep(a) => execute(ExperimentKind::Sweep, &a, &[]).map(drop),
        Command::Benchmark(a) => execute(ExperimentKind::Benchmark, &a, &[]).map(drop),
        Command::Evaluate(a) => execute(ExperimentKind::Evaluate, &a.run, &a.checkpoints).map(drop),
        Command::Explain(a) => execute(ExperimentKind::Explain, &a.run, &a.checkpoints).map(drop),
        Command::Stability(a) => execute(ExperimentKind::Stability, &a.run, &a.checkpoints).map(drop),
        Command::Disrupt(a) => execute(ExperimentKind::Disrupt, &a.run, &a.checkpoints).map(drop),
        Command::Harden(a) => execute(ExperimentKind::Harden, &a.run, &a.checkpoints).map(drop),
        Command::Plot(a) => {
            if a.shapes.is_none() && a.trajectories.is_empty() {
                return Err(Error::config("plot", "give --shapes and/or --trajectories"));
            }
            let mut written = Vec::new();
            if let Some(dir) = &a.shapes {
                written.extend(plot::plot_shapes(dir, &a.out)?);
            }
            for t in &a.trajectories {
                written.push(plot::plot_trajectories(t, &a.out)?);
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
