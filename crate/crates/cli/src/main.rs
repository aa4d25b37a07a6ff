//! `fedsim` command-line runner.

use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim_core::{parse_config, run_sweep, Policy, SimError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated-learning fleet simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads for parallel runs.
    #[arg(long, env = "FEDSIM_WORKERS", global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, seed) pair of a config and write CSV reports.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Run only these seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Run only these policies.
        #[arg(long = "policy", value_parser = parse_policy)]
        policies: Vec<Policy>,
    },
    /// Validate a config and print it with defaults filled in.
    Check {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    Policy::from_key(s).ok_or_else(|| {
        let names: Vec<&str> = Policy::ALL.iter().map(|p| p.key()).collect();
        format!("unknown policy `{s}` (expected one of {})", names.join(", "))
    })
}

fn exit_code(err: &SimError) -> ExitCode {
    if err.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> io::Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Check { config } => parse_config(&config).and_then(|c| Ok(emit(&c.to_toml())?)),
        Command::Run {
            config,
            out,
            seeds,
            policies,
        } => parse_config(&config).and_then(|mut c| {
            if !seeds.is_empty() {
                c.seeds = seeds;
            }
            if !policies.is_empty() {
                c.policies = policies;
            }
            let dir = out.unwrap_or_else(|| c.output_dir.clone());
            let output = run_sweep(&c, &dir)?;
            let mut text = String::new();
            for row in &output.summary {
                let _ = writeln!(
                    text,
                    "{:<14} seed {:<4} rounds {:<4} accuracy {:>6.2}%  normalized ppw {}",
                    row.policy.key(),
                    row.seed,
                    row.rounds,
                    row.final_accuracy,
                    row.normalized_ppw.map_or("-".to_string(), |p| format!("{p:.3}")),
                );
            }
            let _ = writeln!(text, "wrote {} files to {}", output.files.len(), dir.display());
            Ok(emit(&text)?)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
