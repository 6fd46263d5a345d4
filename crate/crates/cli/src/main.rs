use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lyapctl::agents::Algo;
use lyapctl::environments::EnvKind;
use lyapctl_cli::{evaluate_checkpoint, run_sweep, train_command, CliError, ExperimentConfig, EXIT_CONFIG, EXIT_OK};

/// Lyapunov-constrained hierarchical RL for stochastic control.
#[derive(Parser)]
#[command(name = "lyapctl", version)]
struct Cli {
    /// Repeat for more log output (`-v` info, `-vv` debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm and write records, summary and checkpoint.
    Train(TrainArgs),
    /// Roll out a checkpoint, one trajectory per seed.
    Evaluate(EvalArgs),
    /// Train every configured algorithm over every seed and aggregate.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    algo: Option<Algo>,
    /// Overrides the configured seeds and `LYAPCTL_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// May be repeated or comma separated.
    #[arg(long, value_delimiter = ',')]
    algo: Vec<Algo>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment overrides; the checkpoint's own are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, default_value = "eval")]
    output_dir: PathBuf,
}

fn env_seeds() -> Result<Option<Vec<u64>>, CliError> {
    match std::env::var("LYAPCTL_SEED") {
        Ok(v) => v
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("LYAPCTL_SEED={v}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn load(common: &Common, algos: &[Algo], seeds: &[u64]) -> Result<ExperimentConfig, CliError> {
    let mut exp = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(env) = common.env {
        if env != exp.experiment.env {
            exp.experiment.env = env;
            exp.env = Default::default();
        }
    }
    if let Some(n) = common.episodes {
        exp.train.episodes = n;
    }
    if let Some(d) = &common.output_dir {
        exp.experiment.output_dir = d.clone();
    }
    if !algos.is_empty() {
        exp.experiment.algos = algos.to_vec();
    }
    if !seeds.is_empty() {
        exp.experiment.seeds = seeds.to_vec();
    } else if let Some(s) = env_seeds()? {
        exp.experiment.seeds = s;
    }
    exp.validate("command line")?;
    Ok(exp)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let exp = load(&a.common, a.algo.as_slice(), a.seed.as_slice())?;
            for dir in train_command(&exp)? {
                println!("{}", dir.display());
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let exp = load(&a.common, &a.algo, &a.seed)?;
            let dir = exp.experiment.output_dir.clone();
            let out = run_sweep(&exp, Some(&dir), a.parallel)?;
            for row in &out.table {
                println!("{}\t{:.4}\t{:.4}", row.algo, row.median_iae, row.median_ise);
            }
            if out.failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::PartialSweep {
                    failed: out.failures.len(),
                    total: out.failures.len() + out.runs.len(),
                })
            }
        }
        Command::Evaluate(a) => {
            let cfg = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
            let seeds = match (a.seed.is_empty(), env_seeds()?) {
                (false, _) => a.seed,
                (true, Some(s)) => s,
                (true, None) => vec![0],
            };
            for row in evaluate_checkpoint(&a.checkpoint, a.env, cfg.as_ref(), &seeds, &a.output_dir)? {
                println!("seed {}\tiae {:.4}\tise {:.4}", row.seed, row.iae, row.ise);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
