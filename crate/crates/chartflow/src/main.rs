use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chartflow::cli::{cmd_convergence, cmd_run, cmd_validate, load_config};

#[derive(Parser)]
#[command(
    name = "chartflow",
    about = "Incompressible Navier-Stokes on chart-covered periodic tori"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-step the controlled scheme and write monitors + field dumps.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the atlas and run the invariant suite.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refinement study against the exact Taylor-Green decay.
    Convergence {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        levels: usize,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("CHARTFLOW_THREADS") {
        if let Ok(threads) = v.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out } => load_config(config.as_ref(), out.as_ref()).and_then(|cfg| {
            let out_dir = PathBuf::from(&cfg.out_dir);
            cmd_run(&cfg, &out_dir).map(|_| 0)
        }),
        Command::Validate { config, out } => {
            load_config(config.as_ref(), out.as_ref()).and_then(|cfg| {
                let checks = cmd_validate(&cfg)?;
                if let Some(failed) = checks.iter().find(|c| !c.passed) {
                    eprintln!("validation failed: {}", failed.name);
                    Ok(1)
                } else {
                    Ok(0)
                }
            })
        }
        Command::Convergence {
            config,
            out,
            levels,
        } => load_config(config.as_ref(), out.as_ref()).and_then(|cfg| {
            let out_dir = PathBuf::from(&cfg.out_dir);
            cmd_convergence(&cfg, *levels, &out_dir).map(|_| 0)
        }),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
