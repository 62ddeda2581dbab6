//! `tinykd`: pre-train a teacher, distill students, fine-tune, benchmark and
//! inspect model configurations.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TINYKD_OUT";

#[derive(Debug, Parser)]
#[command(name = "tinykd", version, about = "Whole-word-masked pre-training and two-stage knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the teacher with masked language modelling.
    PretrainTeacher(RunArgs),
    /// Distill a student, one-stage or two-stage according to the plan.
    Distill(DistillArgs),
    /// Fine-tune a checkpoint on a labeled sentence-classification task.
    Finetune(FinetuneArgs),
    /// Time frozen-encoder inference next to analytic FLOPs.
    Bench(BenchArgs),
    /// Print parameter counts and FLOPs for model configurations.
    Inspect(InspectArgs),
    /// Print masked samples of sentences for auditing.
    MakeSamples(SamplesArgs),
    /// Write a synthetic corpus, lexicon, vocabulary, toy task and desk plan.
    MakeCorpus(CorpusArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run-plan file (TOML).
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    /// Plan override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run both pipelines and write the side-by-side comparison.
    #[arg(long)]
    compare: bool,
    /// Seeds for `--compare` (default: the plan seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Toy task (`label<TAB>text`) scored for every student under `--compare`.
    #[arg(long)]
    task: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Model checkpoint to fine-tune.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file, one `label<TAB>text` per line.
    #[arg(long)]
    task: PathBuf,
    /// Plan supplying vocabulary and lexicon paths.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    /// Fraction of the task held out as the dev split.
    #[arg(long, default_value_t = 0.25)]
    dev_fraction: f64,
    /// Fine-tuning seeds; the dev accuracy is averaged over them.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Seed of the train/dev split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ThreadMode {
    Single,
    Multi,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Preset names, or `all` for the six published configurations. The
    /// first is the reference for speedups.
    #[arg(long, default_value = "all")]
    preset: Vec<String>,
    /// Additional config files.
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    seq: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, value_enum, default_value_t = ThreadMode::Single)]
    threads: ThreadMode,
    /// Skip configs whose estimated footprint exceeds this many GiB.
    #[arg(long, default_value_t = 4.0)]
    max_memory_gb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Preset names, or `all` for the six published configurations.
    #[arg(long)]
    preset: Vec<String>,
    /// Config files.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Sequence length for FLOPs.
    #[arg(long, default_value_t = 512)]
    seq: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Wwm,
    Token,
}

#[derive(Debug, Args)]
struct SamplesArgs {
    /// Sentence to mask; repeatable.
    #[arg(long)]
    text: Vec<String>,
    /// Corpus file, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Wwm)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per sentence; sample k uses seed + k.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    sentences: usize,
    #[arg(long, default_value_t = 600)]
    task_examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::PretrainTeacher(a) => commands::pretrain(a),
        Command::Distill(a) => commands::distill(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Bench(a) => commands::bench(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::MakeSamples(a) => commands::make_samples(a),
        Command::MakeCorpus(a) => commands::make_corpus(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
