//! peftlab command-line front end.
//!
//! Exit codes: 0 success, 2 usage/config errors, 1 runtime failures.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::Ctx;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const CSV_HELP: &str = "\
Output CSV formats (stable column order):
  vqa/vqa_metrics.csv        epoch,bleu,rouge1,rougeL,meteor
  vqa_eval/metrics.csv       epoch,bleu,rouge1,rougeL,meteor
  diffusion/gen_metrics.csv  epoch,fidelity,agreement,diversity,fbd
  gen_eval/gen_report.csv    epoch,fidelity,agreement,diversity,fbd
  report.csv                 experiment,bleu,rouge1,rougeL,meteor
  report_gen.csv             experiment,fidelity,agreement,diversity,fbd

Set PEFTLAB_LOG=info (or debug) for progress logging.";

#[derive(Parser)]
#[command(
    name = "peftlab",
    version,
    about = "Desk-scale PEFT lab: frozen-encoder VQA and LoRA diffusion",
    after_help = CSV_HELP
)]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Experiment directory all commands read from and write into.
    #[arg(long, global = true, value_name = "PATH")]
    out_dir: Option<PathBuf>,

    /// Overrides every section seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides the configured epoch count for training commands.
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (images, QA pairs, vocab, split).
    GenData,
    /// Train the VQA model; writes checkpoints and per-epoch metrics.
    TrainVqa,
    /// Evaluate the VQA checkpoint on the validation split.
    EvalVqa,
    /// Train diffusion LoRA adapters; writes adapters and per-epoch metrics.
    TrainDiffusion,
    /// Sample images from the adapted diffusion model.
    Generate,
    /// Score a generated image directory against the corpus images.
    EvalGen,
    /// Merge stage CSVs into experiment tables (CSV + JSON).
    Report,
    /// Print the full default configuration as TOML.
    PrintConfig,
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PEFTLAB_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        None => RunConfig::default(),
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return usage_error(&e.to_string()),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }

    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }

    let Some(out_dir) = cli.out_dir else {
        return usage_error("--out-dir is required for this command");
    };
    let ctx = Ctx {
        cfg,
        out_dir,
        epochs_override: cli.epochs,
    };

    let result = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainVqa => commands::train_vqa(&ctx),
        Command::EvalVqa => commands::eval_vqa(&ctx),
        Command::TrainDiffusion => commands::train_diffusion(&ctx),
        Command::Generate => commands::generate(&ctx),
        Command::EvalGen => commands::eval_gen(&ctx),
        Command::Report => commands::report(&ctx),
        Command::PrintConfig => unreachable!("handled above"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
