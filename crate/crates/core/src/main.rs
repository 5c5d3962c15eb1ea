use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rareval::env::{Environment, GamblersRuin, GridworldLava, BUILTIN_ENVS};
use rareval::harness::{run_experiment, ExperimentConfig};
use rareval::oracle::exact_value_oracle;
use rareval::Error;

#[derive(Parser)]
#[command(name = "rareval", version, about = "Rare-event policy evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact rare-event probability from the initial state.
    Oracle {
        #[arg(long)]
        env: String,
        /// Gambler's ruin goal.
        #[arg(long = "N", alias = "n")]
        goal: Option<usize>,
        /// Gambler's ruin win probability.
        #[arg(long)]
        p: Option<f64>,
        /// Gambler's ruin starting wealth (defaults to 1).
        #[arg(long)]
        start: Option<usize>,
        /// Gridworld width.
        #[arg(long)]
        width: Option<usize>,
    },
    /// List the built-in environments.
    ListEnvs,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Usage(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ListEnvs => {
            for name in BUILTIN_ENVS {
                println!("{name}");
            }
        }
        Command::Run { config, seed, out } => {
            if !config.is_file() {
                return Err(Failure::Usage(format!("config file not found: {}", config.display())));
            }
            let mut cfg = ExperimentConfig::load(&config)
                .map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let outcome = run_experiment(&cfg)?;
            let s = &outcome.summary;
            println!(
                "{} on {}: mean estimate {:.6e} (std {:.3e}) over {} seeds, {} converged",
                s.method,
                s.env,
                s.mean_final_estimate,
                s.std_final_estimate,
                s.runs.len(),
                s.converged_runs
            );
            if let Some(dir) = &cfg.output_dir {
                println!("artifacts written to {}", dir.display());
            }
        }
        Command::Oracle {
            env,
            goal,
            p,
            start,
            width,
        } => {
            let value = match env.as_str() {
                "gamblers-ruin" => {
                    let (Some(goal), Some(p)) = (goal, p) else {
                        return Err(Failure::Usage("gamblers-ruin needs --N and --p".into()));
                    };
                    let g = GamblersRuin::new(goal, p)?;
                    g.closed_form(start.unwrap_or(1))
                }
                "gridworld-lava" => {
                    let g = match width {
                        Some(w) => GridworldLava::new(w, 0)?,
                        None => GridworldLava::standard(),
                    };
                    exact_value_oracle(&g)?.value(&g, &g.initial_state())
                }
                other if BUILTIN_ENVS.contains(&other) => {
                    return Err(Failure::Runtime(format!(
                        "no exact oracle for continuous environment {other}"
                    )));
                }
                other => return Err(Failure::Usage(format!("unknown environment {other}"))),
            };
            println!("{value:.10}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
