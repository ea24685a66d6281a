//! Single entry point wiring corpus generation, training, evaluation, the
//! mask-ratio ablation, and one-shot prediction.
//!
//! Flag precedence is flag > config file > built-in default. Config files
//! are flat JSON objects whose keys are the long flag names with
//! underscores; unknown keys and unknown flags are both rejected. Exit code
//! is 0 iff the operation completed; any failure prints exactly one
//! machine-readable JSON line to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "lavaman",
    version,
    about = "Masked goal-image pretraining and SE(2) manipulation heads on a procedural tabletop"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an episode corpus on disk
    GenData(GenDataArgs),
    /// Pretrain the backbone on masked goal-image prediction
    Pretrain(PretrainArgs),
    /// Fine-tune a head (affordance, action, or bbox) on annotated episodes
    Finetune(FinetuneArgs),
    /// Score an affordance checkpoint over corpus splits
    Eval(EvalArgs),
    /// Sweep goal mask ratios end to end and plot success against reference
    AblateMask(AblateMaskArgs),
    /// Run one image + instruction through a checkpoint and dump artifacts
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output corpus directory (required here or in the config file)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training episodes to generate [default: 100]
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Held-out seen-split episodes [default: 0]
    #[arg(long)]
    pub seen: Option<usize>,
    /// Held-out intra-split episodes [default: 0]
    #[arg(long)]
    pub intra: Option<usize>,
    /// Held-out inter-split episodes [default: 0]
    #[arg(long)]
    pub inter: Option<usize>,
    /// Pin every episode to one task: packing_seq or packing_grp
    /// [default: alternate]
    #[arg(long)]
    pub task: Option<String>,
    /// Square image size in pixels [default: 64]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// JSON file with inter_classes / intra_classes / held_per_class counts
    /// [default: 4 / 4 / 2]
    #[arg(long)]
    pub split_config: Option<PathBuf>,
    /// Generation threads; output is identical for any count [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Corpus directory from gen-data (required here or in the config file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint output path [default: pretext.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimization steps [default: 3000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Episodes per step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Fraction of steps in linear warmup [default: 0.05]
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// Global gradient norm ceiling [default: 1]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Goal mask ratio [default: 0.95]
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Loss scope: all_patches or masked_only [default: all_patches]
    #[arg(long)]
    pub loss_scope: Option<String>,
    /// Model preset: desk or paper_scale [default: desk]
    #[arg(long)]
    pub preset: Option<String>,
    /// JSONL step log [default: <out>.log.jsonl, under LAVAMAN_CACHE if set]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Corpus directory from gen-data (required here or in the config file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretext checkpoint to start from; omit only with --scratch
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from random weights (the no-pretraining control)
    #[arg(long)]
    pub scratch: bool,
    /// Head to train: affordance, action, or bbox [default: affordance]
    #[arg(long)]
    pub head: Option<String>,
    /// Checkpoint output path [default: <head>.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimization steps [default: 600]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Episodes per step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.00005]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Fraction of steps in linear warmup [default: 0.05]
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// Global gradient norm ceiling [default: 1]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Update only the head, leaving the backbone bit-identical
    #[arg(long)]
    pub freeze_backbone: bool,
    /// Model preset for --scratch runs: desk or paper_scale [default: desk]
    #[arg(long)]
    pub preset: Option<String>,
    /// JSONL step log [default: <out>.log.jsonl, under LAVAMAN_CACHE if set]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Corpus directory from gen-data (required here or in the config file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Affordance checkpoint to score (required here or in the config file)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report JSON output path [default: report.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated splits to score [default: seen,intra,inter]
    #[arg(long)]
    pub splits: Option<String>,
    /// Rotation tolerance in degrees [default: 10]
    #[arg(long)]
    pub rot_tol: Option<u32>,
    /// Scoring threads; the report is identical for any count [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Base RNG seed; scoring is deterministic regardless [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateMaskArgs {
    /// Corpus directory from gen-data (required here or in the config file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for ablation.json and ablation.png (required here
    /// or in the config file)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated mask ratios to sweep [default: 0.75,0.95,1.0]
    #[arg(long)]
    pub ratios: Option<String>,
    /// Pretext steps per ratio [default: 3000]
    #[arg(long)]
    pub pretext_steps: Option<usize>,
    /// Fine-tune steps per ratio [default: 600]
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Episodes per step in both phases [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Split scored after each run [default: seen]
    #[arg(long)]
    pub eval_split: Option<String>,
    /// Cap on training episodes, 0 meaning all [default: 0]
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Cap on eval episodes, 0 meaning all [default: 0]
    #[arg(long)]
    pub limit_eval: Option<usize>,
    /// Model preset: desk or paper_scale [default: desk]
    #[arg(long)]
    pub preset: Option<String>,
    /// Base RNG seed shared by every ratio [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Input PNG image (required here or in the config file)
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Text instruction (required here or in the config file)
    #[arg(long)]
    pub instruction: Option<String>,
    /// Affordance checkpoint (required here or in the config file)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for goal_pred.png, affordance_{pick,place}.png, action.json
    /// [default: .]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Base RNG seed; prediction is deterministic regardless [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat JSON config file merged under the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn fail_line(code: &str, message: &str) {
    let line = serde_json::json!({ "error": { "code": code, "message": message } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            fail_line("invalid", "missing subcommand; run lavaman --help");
            return ExitCode::FAILURE;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments");
            fail_line("invalid", first);
            return ExitCode::FAILURE;
        }
    };
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail_line(e.code(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
