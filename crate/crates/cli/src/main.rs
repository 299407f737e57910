use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emgpinn::autodiff::Primitive;
use emgpinn::training::TrainMode;
use emgpinn_cli::{cmd_eval, cmd_gradcheck, cmd_invdyn, cmd_synth, cmd_train, format_checks, gradcheck_verdict, CliError, Config};

/// Log verbosity, in `env_logger` filter syntax.
const LOG_ENV: &str = "EMGPINN_LOG";

#[derive(Parser)]
#[command(name = "emgpinn", version, about = "Physics-informed joint-angle prediction from EMG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the command's seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overrides data.synth.emg.noise_std.
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Train a network on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "pinn")]
        mode: TrainMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one or more checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append benchmark torques to a trial CSV.
    Invdyn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trial: PathBuf,
        #[arg(long)]
        load_kg: f64,
        /// Sampling rate in Hz; inferred from the time column when omitted.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random draws for the full-loss check.
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb one primitive's derivative (self-test of the checker).
        #[arg(long, hide = true, value_parser = parse_primitive)]
        inject_fault: Option<Primitive>,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected pinn or ann)"))
}

fn parse_primitive(s: &str) -> Result<Primitive, String> {
    Primitive::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Primitive::ALL.iter().map(|p| p.name()).collect();
        format!("unknown primitive `{s}` (one of {})", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, out, noise_std } => {
            let mut cfg = Config::load(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.data.synth.seed = seed;
            }
            if let Some(n) = noise_std {
                cfg.data.synth.emg.noise_std = n;
            }
            cfg.validate()?;
            let r = cmd_synth(&cfg, &out)?;
            println!("{} runs, {} trials, {} rows -> {}", r.runs, r.trials, r.rows, out.display());
        }
        Command::Train { common, data, mode, out } => {
            let mut cfg = Config::load(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.training.seed = seed;
            }
            let s = cmd_train(&cfg, &data, mode, &out)?;
            println!(
                "{} epochs ({}): final J {:.6e}, best val J {:.6e} -> {}",
                s.epochs,
                s.mode,
                s.final_j,
                s.best_val_j,
                out.display()
            );
        }
        Command::Eval { common, checkpoints, data, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            for r in cmd_eval(&cfg, &checkpoints, &data, &out)? {
                for c in &r.cells {
                    println!(
                        "{:<6} {:>4} kg {:<8} R {:.4} ± {:.4}  RMSE {:.4} ± {:.4}",
                        r.tag, c.load_kg, c.joint, c.r_mean, c.r_std, c.rmse_mean, c.rmse_std
                    );
                }
            }
        }
        Command::Invdyn { common, trial, load_kg, rate, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            let t = cmd_invdyn(&cfg, &trial, load_kg, rate, &out)?;
            println!("{} rows -> {}", t.len(), out.display());
        }
        Command::Gradcheck { common, draws, out, inject_fault } => {
            let cfg = Config::load(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.training.seed);
            let results = cmd_gradcheck(&cfg, seed, draws, inject_fault, out.as_deref())?;
            print!("{}", format_checks(&results));
            gradcheck_verdict(&results)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
