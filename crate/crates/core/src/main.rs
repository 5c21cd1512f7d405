use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dronecell::commands::{self, CommandError, Invocation};

#[derive(Parser)]
#[command(name = "dronecell", version, about = "Drone handover and resource management experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Q-table policy (continue from --policy if given)
    Train(Common),
    /// Evaluate a trained policy
    Eval(Common),
    /// Run the RSS handover benchmark
    Baseline(Common),
    /// Train and evaluate over a parameter sweep
    Sweep(Common),
    /// Handover-position heatmaps
    Heatmap(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy file written by `train`
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Parameter sweep, e.g. "weights.alpha_h=0,0.25,0.5"
    #[arg(long)]
    sweep: Option<String>,
    /// Episode count for the command's main phase
    #[arg(long)]
    episodes: Option<u64>,
}

impl From<Common> for Invocation {
    fn from(c: Common) -> Self {
        Invocation {
            config: c.config,
            seed: c.seed,
            out: c.out,
            policy: c.policy,
            sweep: c.sweep,
            episodes: c.episodes,
        }
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train(c) => {
            let path = commands::cmd_train(&c.into())?;
            println!("policy written to {}", path.display());
        }
        Command::Eval(c) => {
            let s = commands::cmd_eval(&c.into())?;
            println!(
                "episodes {} handovers/ep {:.3} delay {:.6} s interference {:.3e} mW",
                s.episodes, s.handovers.mean, s.delay_s.mean, s.interference_mw.mean
            );
        }
        Command::Baseline(c) => {
            let s = commands::cmd_baseline(&c.into())?;
            println!(
                "episodes {} handovers/ep {:.3} delay {:.6} s interference {:.3e} mW",
                s.episodes, s.handovers.mean, s.delay_s.mean, s.interference_mw.mean
            );
        }
        Command::Sweep(c) => {
            for (label, s) in commands::cmd_sweep(&c.into())? {
                println!("{label}: handovers/ep {:.3}", s.handovers.mean);
            }
        }
        Command::Heatmap(c) => {
            for (label, total) in commands::cmd_heatmap(&c.into())? {
                println!("{label}: {total} handovers");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
