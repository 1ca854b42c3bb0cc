//! `swg`: data generation, training, guided sampling, sweeps and analysis for
//! spectrum-weakening guidance on a toy token-grid transformer.

mod args;
mod commands;
mod error;

use clap::{Parser, Subcommand};

use commands::{data, entropy, sample, sweep, theory, train, weaken};

#[derive(Debug, Parser)]
#[command(name = "swg", version, about = "Spectrum weakening guidance lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural token-grid corpus.
    GenData(data::GenData),
    /// Train the toy transformer on a corpus.
    Train(train::Train),
    /// Draw guided samples with traces and renders.
    Sample(sample::Sample),
    /// Sweep guidance scales, bands and hook sets; write a metrics CSV.
    Sweep(sweep::Sweep),
    /// Check the information-loss and invariance properties on Gaussian instances.
    VerifyTheory(theory::VerifyTheory),
    /// Summarize cumulative entropy over a directory of traces.
    AnalyzeEntropy(entropy::AnalyzeEntropy),
    /// Apply spectral weakening to vectors from a CSV file.
    Weaken(weaken::Weaken),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => data::run(a),
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::VerifyTheory(a) => theory::run(a),
        Command::AnalyzeEntropy(a) => entropy::run(a),
        Command::Weaken(a) => weaken::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.kind.exit_code());
    }
}
