use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod report;

use report::Common;

#[derive(Debug, Parser)]
#[command(name = "cua", version, about = "Cayley unitary adapter experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a teacher, compress it, and distil adapters into the student.
    Train(cmd::train::TrainArgs),
    /// Infidelity table, perplexity against depolarizing strength, and shot-noise error.
    NoiseSweep(cmd::noise::NoiseArgs),
    /// Operator-Schmidt rows for identity, Haar, brickwork, stress, or checkpoint operators.
    Entangle(cmd::entangle::EntangleArgs),
    /// Lane matching and circuit counts on a coupling map.
    Pack(cmd::pack::PackArgs),
    /// Perplexity with fixed ablation operators at the adapter sites.
    Ablate(cmd::ablate::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd::train::run(&cli.common, a),
        Command::NoiseSweep(a) => cmd::noise::run(&cli.common, a),
        Command::Entangle(a) => cmd::entangle::run(&cli.common, a),
        Command::Pack(a) => cmd::pack::run(&cli.common, a),
        Command::Ablate(a) => cmd::ablate::run(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
