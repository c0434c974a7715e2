use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zostack_cli::{config::ExperimentConfig, diagnose, report, run_experiment, CliError, Mode};

/// Follower-agnostic Stackelberg optimization experiments.
#[derive(Parser, Debug)]
#[command(name = "zostack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (overrides the config's `output_dir`).
    #[arg(long, global = true, env = "ZOSTACK_OUT_DIR")]
    out: Option<PathBuf>,

    /// Worker threads for replicate runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// First seed of the generated seed list (ignored when the config lists seeds).
    #[arg(long, global = true)]
    seed_base: Option<u64>,

    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(required_unless_present = "config_flag")]
    config: Option<PathBuf>,

    #[arg(long = "config", conflicts_with = "config")]
    config_flag: Option<PathBuf>,
}

impl ConfigArg {
    fn path(&self) -> PathBuf {
        self.config.clone().or_else(|| self.config_flag.clone()).expect("clap enforces one")
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the base cell of a config for every seed.
    Run(ConfigArg),
    /// Run every cell of the config's sweep grid.
    Sweep(ConfigArg),
    /// Run the sweep and evaluate the enabled diagnostics.
    Diagnose(ConfigArg),
    /// Rebuild aggregate tables and the manifest from a finished output directory.
    Report {
        dir: PathBuf,
    },
}

fn load(cli: &Cli, arg: &ConfigArg) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&arg.path())?;
    if let Some(base) = cli.seed_base {
        if cfg.explicit_seeds {
            log::warn!("--seed-base ignored: the config lists seeds explicitly");
        }
        cfg = cfg.with_seed_base(base);
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn real_main(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(arg) | Command::Sweep(arg) => {
            let mode = if matches!(cli.command, Command::Run(_)) { Mode::Run } else { Mode::Sweep };
            let (cfg, out) = load(cli, arg)?;
            let outcome = run_experiment(&cfg, mode, &out, cli.jobs)?;
            println!(
                "{} runs written to {} ({} files in manifest)",
                outcome.summaries.len(),
                out.display(),
                outcome.manifest.files.len()
            );
        }
        Command::Diagnose(arg) => {
            let (cfg, out) = load(cli, arg)?;
            let (_, results) = diagnose(&cfg, &out, cli.jobs)?;
            for r in &results {
                println!("{} [{}]: {}", r.name, r.scope, if r.passed { "pass" } else { "FAIL" });
            }
        }
        Command::Report { dir } => {
            let rows = report(dir)?;
            println!("{} aggregate rows written to {}", rows.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match real_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
