//! Thin argument-parsing shell over [`mmreid::cli`]. Exit codes: 0 ok,
//! 1 usage or config error, 2 invariant failure, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmreid::cli::{run, CliCommand, Invocation, RunConfig};
use mmreid::trainer::Recipe;
use mmreid::Result;

#[derive(Parser)]
#[command(
    name = "mmreid",
    version,
    about = "Two-stage multimodal person re-identification on a synthetic benchmark"
)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; missing or empty means all defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. --set train.lambda=0.5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for all artifacts (default: runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides data.seed and train.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Pretraining recipe: baseline, common, syncreid, or full.
    #[arg(long, global = true, value_name = "RECIPE")]
    recipe: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic re-identification benchmark to disk.
    GenData,
    /// Stage 1: multimodal pretraining with the chosen recipe.
    Pretrain,
    /// Stage 2: fine-tune the encoder for retrieval.
    TrainReid,
    /// Score a checkpoint on the dataset's query/gallery split.
    Eval,
    /// Score on the source split and on a shifted-domain counterpart.
    CrossEval,
    /// Run the four-recipe matrix over several seeds and summarize.
    Ablate {
        /// Seeds per recipe (default: ablate.seeds from the config).
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
    },
    /// Finite-difference checks for every op and loss.
    Gradcheck,
    /// Fast invariant suite: closed forms, oracles, data contracts.
    Selftest,
}

fn build_invocation(args: Args) -> Result<Invocation> {
    let mut config = RunConfig::parse(args.config.as_deref(), &args.set)?;
    config.resolve(args.out.as_deref(), args.seed)?;
    let recipe = match args.recipe.as_deref() {
        Some(r) => Recipe::parse(r)?,
        None => Recipe::Full,
    };
    let (command, seeds) = match args.command {
        Command::GenData => (CliCommand::GenData, None),
        Command::Pretrain => (CliCommand::Pretrain, None),
        Command::TrainReid => (CliCommand::TrainReid, None),
        Command::Eval => (CliCommand::Eval, None),
        Command::CrossEval => (CliCommand::CrossEval, None),
        Command::Ablate { seeds } => (CliCommand::Ablate, seeds),
        Command::Gradcheck => (CliCommand::GradCheck, None),
        Command::Selftest => (CliCommand::SelfTest, None),
    };
    Ok(Invocation {
        command,
        config,
        recipe,
        seeds,
    })
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // clap prints help/version through the same path
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let inv = match build_invocation(args) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("mmreid: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&inv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmreid: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
