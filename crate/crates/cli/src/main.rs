//! `cycden` — the denoising workbench driver.
//!
//! Six subcommands cover the experiment lifecycle: `generate` builds a
//! synthetic phantom dataset, `train` fits the cycle model, `denoise` applies
//! a checkpoint, `evaluate` scores outputs against references, `ablate` runs
//! the variant grid, and `report` merges runs into tables and plots.
//!
//! Exit codes are a stable scripting contract: 0 on success, 1 for anything
//! the user can fix (bad flags, bad configs, missing or corrupt inputs), 2
//! for runtime failures (I/O mid-run, training divergence).

mod commands;
mod config;
mod dataset;
mod eval;
mod report;
mod svg;

use clap::{Parser, Subcommand};
use commands::{
    AblateArgs, DenoiseArgs, EvaluateArgs, GenerateArgs, Globals, ReportArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "cycden",
    version,
    about = "Cycle-constrained adversarial denoising workbench for synthetic low-dose brain volumes"
)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with simulated low-dose scans.
    Generate(GenerateArgs),
    /// Train the denoising model on a generated dataset.
    Train(TrainArgs),
    /// Apply a trained checkpoint to a volume or a dataset split.
    Denoise(DenoiseArgs),
    /// Score denoised volumes against their references.
    Evaluate(EvaluateArgs),
    /// Run the loss/component ablation grid and tabulate it.
    Ablate(AblateArgs),
    /// Merge evaluation reports and training logs into tables and plots.
    Report(ReportArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and are a success
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if cli.globals.deterministic {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match &cli.cmd {
        Cmd::Generate(args) => commands::generate(&cli.globals, args),
        Cmd::Train(args) => commands::train(&cli.globals, args),
        Cmd::Denoise(args) => commands::denoise(&cli.globals, args),
        Cmd::Evaluate(args) => commands::evaluate(&cli.globals, args),
        Cmd::Ablate(args) => commands::ablate(&cli.globals, args),
        Cmd::Report(args) => commands::report_cmd(&cli.globals, args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 1 } else { 2 });
    }
}
