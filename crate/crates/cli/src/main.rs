mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffnea::exec::{set_threads, Exec};

use commands::{EvalArgs, GenerateArgs, GradcheckArgs, RolloutArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "diffnea", version, about = "Learn multibody dynamics models from motion data and benchmark them")]
struct Cli {
    /// Directory for produced files
    #[arg(long, global = true, env = "DIFFNEA_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0: one per core)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run everything on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark system and write a dataset
    Generate(GenerateArgs),
    /// Identify one (model, actuator, initialization) cell on a dataset
    Train(TrainArgs),
    /// Roll out a fitted model next to its reference plant
    Rollout(RolloutArgs),
    /// Benchmark every fit in a directory and write the aggregate table
    Eval(EvalArgs),
    /// Check tape gradients against finite differences
    Gradcheck(GradcheckArgs),
}

/// Shared run context.
pub struct Ctx {
    pub out_dir: PathBuf,
    pub exec: Exec,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        set_threads(cli.jobs);
    }
    let ctx = Ctx { out_dir: cli.out_dir, exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel } };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Rollout(a) => commands::rollout(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
