//! `sftok` command-line entry points.

mod ablate;
mod args;
mod generate;
mod inspect;
mod plot;
mod report;
mod theory;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use args::{
    AblateArgs, DecodeArgs, DiagnoseArgs, EncodeArgs, GenerateArgs, PlotArgs, ReconstructArgs, TheoryArgs, TrainArgs,
    TrainGeneratorArgs,
};

#[derive(Parser, Debug)]
#[command(name = "sftok", version, about = "Train and run a discrete 1D image tokenizer")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more tokenizer stages.
    Train(TrainArgs),
    /// Per-step reconstruction quality table on held-out images.
    Reconstruct(ReconstructArgs),
    /// Encode images to latent token ids.
    Encode(EncodeArgs),
    /// Decode latent token ids to images.
    Decode(DecodeArgs),
    /// Train the class-conditional token generator.
    TrainGenerator(TrainGeneratorArgs),
    /// Sample token sequences from a generator and decode them.
    Generate(GenerateArgs),
    /// Per-step divergence diagnostics of the multi-step decoder.
    Diagnose(DiagnoseArgs),
    /// Verify the loss and accuracy inequalities on random instances.
    TheoryCheck(TheoryArgs),
    /// Replacement-ratio, warm-up and step-count sweeps.
    Ablate(AblateArgs),
    /// Plot loss curves or step tables from CSV reports.
    Plot(PlotArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Reconstruct(_) => "reconstruct",
            Command::Encode(_) => "encode",
            Command::Decode(_) => "decode",
            Command::TrainGenerator(_) => "train-generator",
            Command::Generate(_) => "generate",
            Command::Diagnose(_) => "diagnose",
            Command::TheoryCheck(_) => "theory-check",
            Command::Ablate(_) => "ablate",
            Command::Plot(_) => "plot",
        }
    }
}

/// A failed invariant, as opposed to an operational error.
#[derive(Debug)]
pub struct InvariantFailure(pub String);

impl std::fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantFailure {}

fn error_kind(e: &anyhow::Error) -> String {
    if e.downcast_ref::<InvariantFailure>().is_some() {
        return "InvariantFailure".into();
    }
    if let Some(core) = e.downcast_ref::<sftok::Error>() {
        let dbg = format!("{core:?}");
        return dbg.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
    }
    "Error".into()
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var("SFTOK_DEVICE") {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(d) => Err(sftok::Error::InvalidArgument(format!("SFTOK_DEVICE={d}: only `cpu` is supported")).into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        sftok::Execution::Sequential
    } else {
        sftok::Execution::Parallel
    };
    let name = cli.command.name();
    let result = check_device().and_then(|()| match cli.command {
        Command::Train(a) => train::run(a, exec),
        Command::Reconstruct(a) => inspect::reconstruct(a, exec),
        Command::Encode(a) => inspect::encode(a, exec),
        Command::Decode(a) => inspect::decode(a),
        Command::TrainGenerator(a) => generate::train(a, exec),
        Command::Generate(a) => generate::run(a, exec),
        Command::Diagnose(a) => inspect::diagnose(a, exec),
        Command::TheoryCheck(a) => theory::run(a, exec),
        Command::Ablate(a) => ablate::run(a, exec),
        Command::Plot(a) => plot::run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            let record = json!({
                "error": {
                    "command": name,
                    "kind": kind,
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{record}");
            ExitCode::from(if kind == "InvariantFailure" { 2 } else { 1 })
        }
    }
}
