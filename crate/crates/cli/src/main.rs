//! `blockcd`: dataset generation, training, inference and evaluation for
//! two-stage change detection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config or schema error,
//! 3 I/O error, 4 missing upstream artifact.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use blockcd_core::pipeline::{
    cmd_decode, cmd_encode, cmd_eval, cmd_gen_data, cmd_grpo, cmd_infer, cmd_score, cmd_sft, cmd_train_decoder,
    CoarseSource, InferOptions, PipelineConfig, PipelineError, ReasonerStage,
};
use blockcd_core::scene::MANIFEST_FILE;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "blockcd", version, about = "Block-level change reasoning with mask-guided pixel decoding")]
struct Cli {
    /// Pipeline config (JSON). Defaults are used when absent.
    #[arg(long, global = true, env = "BLOCKCD_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for inference and evaluation; 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Block grid override, e.g. 4x4, 8x8 or 16x16.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training and held-out scenes.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        test_n: usize,
    },
    /// Print the run string of the blocks a PGM mask touches.
    Encode { mask: PathBuf },
    /// Write the coarse mask of a run string as a PGM.
    Decode {
        runs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a JSONL file of completions against a manifest.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        /// Defaults to the held-out manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Supervised fitting of the block reasoner.
    Sft,
    /// Reinforcement fine-tuning of the block reasoner.
    Grpo {
        /// Passes over the training prompts; overrides the configured step count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the mask-guided decoder.
    TrainDecoder {
        #[command(flatten)]
        coarse: CoarseArgs,
        /// Train the network with every guidance strength pinned at zero.
        #[arg(long)]
        no_guidance: bool,
    },
    /// Predict pixel change maps for a manifest.
    Infer {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        coarse: CoarseArgs,
        /// Force every guidance strength to zero.
        #[arg(long)]
        no_guidance: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predicted masks with the truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug, Args)]
struct CoarseArgs {
    /// Source of the coarse masks.
    #[arg(long, default_value = "reasoner")]
    coarse: CoarseSource,
    /// Reasoner checkpoint used when the source is the reasoner.
    #[arg(long, default_value = "grpo")]
    reasoner: ReasonerStage,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

/// Writes one line to stdout. A closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print(value: &impl Serialize) {
    emit(&serde_json::to_string_pretty(value).expect("report serializes"));
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default().resolved(),
    };
    let cfg = match cli.grid {
        Some((rows, cols)) => cfg.with_grid(rows, cols)?,
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    let threads = usize::from(cli.threads);
    let held_out = || cfg.test_dir().join(MANIFEST_FILE);
    match cli.command {
        Command::GenData { n, test_n } => print(&cmd_gen_data(&cfg, n, test_n)?),
        Command::Encode { mask } => emit(&cmd_encode(&mask, cfg.grid, cfg.tau)?),
        Command::Decode { runs, out } => cmd_decode(&runs, cfg.grid, &out)?,
        Command::Score { predictions, manifest } => {
            print(&cmd_score(&cfg, &predictions, &manifest.unwrap_or_else(held_out))?)
        }
        Command::Sft => print(&cmd_sft(&cfg)?),
        Command::Grpo { epochs } => print(&cmd_grpo(&cfg, epochs)?),
        Command::TrainDecoder { coarse, no_guidance } => {
            let mut cfg = cfg.clone();
            if no_guidance {
                cfg.mgd.guidance = false;
            }
            print(&cmd_train_decoder(&cfg, coarse.coarse, coarse.reasoner)?)
        }
        Command::Infer {
            manifest,
            coarse,
            no_guidance,
            out,
        } => {
            let opts = InferOptions {
                manifest,
                coarse: coarse.coarse,
                reasoner: coarse.reasoner,
                no_guidance,
                out_dir: out,
                threads,
            };
            print(&cmd_infer(&cfg, &opts)?)
        }
        Command::Eval { pred, manifest } => {
            let report = cmd_eval(&cfg, &pred, &manifest.unwrap_or_else(held_out), threads)?;
            print(&serde_json::json!({
                "aggregate": report.aggregate,
                "aggregate_percent": report.aggregate_percent,
                "scenes": report.per_scene.len(),
                "report": cfg.report("eval.json"),
            }))
        }
        Command::ShowConfig => print(&cfg),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
