//! Subcommand implementations.

use std::fmt;
use std::path::{Path, PathBuf};

use tinykd_core::eval::{
    benchmark_inference, compare_pipelines, fine_tune_classifier, fine_tune_seeds, BenchOptions, FineTuneConfig,
    PipelineRun, TaskDataset, Threading,
};
use tinykd_core::model::{
    count_parameters, estimate_flops, preset, EncoderModel, ModelConfig, PUBLISHED,
};
use tinykd_core::synth::Language;
use tinykd_core::text::{is_cjk, load_corpus, Encoded, Lexicon, MaskStrategy, Vocab, IGNORE_LABEL};
use tinykd_core::trainer::{
    heldout_accuracy, one_stage_pipeline, train_mlm, two_stage_pipeline, Dataset, Mode, PipelineReport, StageIo,
    TrainPlan,
};

use crate::{BenchArgs, CommonArgs, CorpusArgs, DistillArgs, FinetuneArgs, InspectArgs, RunArgs, SamplesArgs, StrategyArg, ThreadMode};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, plan or inputs; nothing was run.
    Invalid(String),
    /// Failure while running.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Invalid(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Invalid(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

/// Plan file with `--set` overrides and `--seed` applied, then validated.
fn load_plan(args: &CommonArgs) -> Result<TrainPlan> {
    let mut plan = TrainPlan::load(&args.plan).map_err(invalid)?;
    for kv in &args.overrides {
        plan.set(kv).map_err(invalid)?;
    }
    if let Some(seed) = args.seed {
        plan.seed = seed;
    }
    plan.validate().map_err(invalid)?;
    Ok(plan)
}

fn load_data(plan: &TrainPlan) -> Result<Dataset> {
    Dataset::load(&plan.corpus, &plan.lexicon, &plan.vocab, plan.heldout_fraction, plan.max_len).map_err(invalid)
}

pub fn pretrain(args: RunArgs) -> Result<()> {
    let plan = load_plan(&args.common)?;
    let data = load_data(&plan)?;
    let config = plan.teacher_config().map_err(invalid)?;
    let out = &args.common.out;
    create_dir(out)?;
    let io = StageIo { dir: Some(out.clone()), resume: args.resume };
    let result = train_mlm(&plan, config, &data, &io).map_err(runtime)?;
    let score = heldout_accuracy(&result.model, &data, &plan).map_err(runtime)?;
    write(&out.join("teacher.heldout.json"), &json(&score))?;
    let last = result.log.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "teacher: {} steps, final MLM loss {last:.4}, held-out accuracy {:.4} ({} tokens), checkpoint {}",
        plan.mlm_steps(),
        score.accuracy,
        score.tokens,
        out.join("teacher.ckpt").display()
    );
    Ok(())
}

fn load_teacher(plan: &TrainPlan, out: &Path) -> Result<EncoderModel> {
    let path = plan.teacher_checkpoint.clone().unwrap_or_else(|| out.join("teacher.ckpt"));
    if !path.is_file() {
        return Err(invalid(format!(
            "teacher checkpoint {} not found; run pretrain-teacher first or set teacher_checkpoint",
            path.display()
        )));
    }
    let teacher = EncoderModel::load(&path).map_err(invalid)?;
    let want = plan.teacher_config().map_err(invalid)?;
    if *teacher.config() != want {
        return Err(invalid(format!("{} does not match the plan's teacher config", path.display())));
    }
    Ok(teacher)
}

fn summarize(report: &PipelineReport) {
    for s in &report.stages {
        println!(
            "{}: map {}, {} steps, windowed L_distill {:.4} -> {:.4} ({:.1}% decrease)",
            s.name,
            s.layer_map,
            s.steps,
            s.first_window_mean.unwrap_or(f64::NAN),
            s.last_window_mean.unwrap_or(f64::NAN),
            100.0 * s.relative_decrease.unwrap_or(f64::NAN)
        );
    }
    println!(
        "student held-out accuracy {:.4} ({} tokens, random {:.4})",
        report.heldout.accuracy, report.heldout.tokens, report.heldout.random_baseline
    );
}

pub fn distill(args: DistillArgs) -> Result<()> {
    let common = &args.run.common;
    let plan = load_plan(common)?;
    let data = load_data(&plan)?;
    let teacher = load_teacher(&plan, &common.out)?;
    create_dir(&common.out)?;
    if !args.compare {
        let resume = args.run.resume.as_deref();
        let report = match plan.mode {
            Mode::TwoStage => two_stage_pipeline(&plan, &teacher, &data, Some(&common.out), resume).map_err(runtime)?.report,
            Mode::OneStage => one_stage_pipeline(&plan, &teacher, &data, Some(&common.out), resume).map_err(runtime)?.report,
            Mode::TeacherMlm => return Err(invalid("plan mode is teacher_mlm; use pretrain-teacher")),
        };
        summarize(&report);
        return Ok(());
    }

    if args.run.resume.is_some() {
        return Err(invalid("--resume cannot be combined with --compare"));
    }
    let mut plan = plan;
    if plan.assistant.is_none() || plan.student.is_none() {
        return Err(invalid("--compare needs both assistant and student configs in the plan"));
    }
    let task = match &args.task {
        Some(p) => Some(TaskDataset::load(p).map_err(invalid)?.split(0.25, 0).map_err(invalid)?),
        None => None,
    };
    let seeds = if args.seeds.is_empty() { vec![plan.seed] } else { args.seeds.clone() };
    let (mut two, mut one) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        plan.seed = seed;
        let dir = common.out.join(format!("seed{seed}"));
        create_dir(&dir)?;
        let a = two_stage_pipeline(&plan, &teacher, &data, Some(&dir), None).map_err(runtime)?;
        let b = one_stage_pipeline(&plan, &teacher, &data, Some(&dir), None).map_err(runtime)?;
        let toy = |m: &EncoderModel| -> Result<Option<f64>> {
            let Some(split) = &task else { return Ok(None) };
            let cfg = FineTuneConfig { seed, max_len: plan.max_len, ..FineTuneConfig::default() };
            let out = fine_tune_classifier(m, &data.vocab, &data.lexicon, split, &cfg).map_err(runtime)?;
            Ok(Some(out.dev_accuracy))
        };
        two.push(PipelineRun { toy_accuracy: toy(&a.student)?, report: a.report });
        one.push(PipelineRun { toy_accuracy: toy(&b.student)?, report: b.report });
    }
    let cmp = compare_pipelines(&two, &one).map_err(runtime)?;
    write(&common.out.join("comparison.json"), &json(&cmp))?;
    write(&common.out.join("comparison.md"), &cmp.table())?;
    print!("{}", cmp.table());
    Ok(())
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let plan = args.plan.as_deref().map(TrainPlan::load).transpose().map_err(invalid)?;
    let pick = |flag: &Option<PathBuf>, from_plan: fn(&TrainPlan) -> &PathBuf, name: &str| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| plan.as_ref().map(|p| from_plan(p).clone()))
            .ok_or_else(|| invalid(format!("--{name} or --plan is required")))
    };
    let vocab = Vocab::load(&pick(&args.vocab, |p| &p.vocab, "vocab")?).map_err(invalid)?;
    let lexicon = Lexicon::load(&pick(&args.lexicon, |p| &p.lexicon, "lexicon")?).map_err(invalid)?;
    let model = EncoderModel::load(&args.checkpoint).map_err(invalid)?;
    let split = TaskDataset::load(&args.task).map_err(invalid)?.split(args.dev_fraction, args.seed).map_err(invalid)?;
    if args.seeds.is_empty() {
        return Err(invalid("--seeds must name at least one seed"));
    }
    let cfg = FineTuneConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        max_len: args.max_len,
        ..FineTuneConfig::default()
    };
    let summary = fine_tune_seeds(&model, &vocab, &lexicon, &split, &cfg, &args.seeds).map_err(|e| match e {
        tinykd_core::eval::EvalError::Label { .. } | tinykd_core::eval::EvalError::VocabMismatch { .. } => invalid(e),
        other => runtime(other),
    })?;
    create_dir(&args.out)?;
    write(&args.out.join("finetune.json"), &json(&summary))?;
    print!("{}", json(&summary));
    Ok(())
}

/// Expands `all` to the published configurations; other names are presets.
fn named_configs(presets: &[String], files: &[PathBuf]) -> Result<Vec<(String, ModelConfig)>> {
    let mut out = Vec::new();
    for name in presets {
        if name.eq_ignore_ascii_case("all") {
            out.extend(PUBLISHED.iter().map(|r| (r.preset.to_string(), r.config)));
        } else {
            out.push((name.clone(), preset(name).map_err(invalid)?));
        }
    }
    for f in files {
        out.push((f.display().to_string(), ModelConfig::load(f).map_err(invalid)?));
    }
    if out.is_empty() {
        return Err(invalid("no configurations given; use --preset all, --preset NAME or --config FILE"));
    }
    Ok(out)
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let configs = named_configs(&args.preset, &args.config)?;
    if !(args.max_memory_gb > 0.0) {
        return Err(invalid("--max-memory-gb must be positive"));
    }
    let opts = BenchOptions {
        seq_len: args.seq,
        batch: args.batch,
        warmup: args.warmup,
        trials: args.trials,
        threading: match args.threads {
            ThreadMode::Single => Threading::Single,
            ThreadMode::Multi => Threading::Multi,
        },
        max_bytes: (args.max_memory_gb * (1u64 << 30) as f64) as u64,
        seed: args.seed,
    };
    if opts.trials == 0 || opts.batch == 0 || opts.seq_len == 0 {
        return Err(invalid("--trials, --batch and --seq must be positive"));
    }
    let report = benchmark_inference(&configs, &opts).map_err(runtime)?;
    create_dir(&args.out)?;
    write(&args.out.join("bench.json"), &json(&report))?;
    eprint!("{}", report.table());
    print!("{}", json(&report));
    Ok(())
}

#[derive(serde::Serialize)]
struct InspectRow {
    name: String,
    config: ModelConfig,
    total: u64,
    non_embedding: u64,
    published_total_m: Option<f64>,
    published_non_embedding_m: Option<f64>,
    flops: u64,
    flops_ratio: f64,
    published_speedup: Option<f64>,
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let configs = named_configs(&args.preset, &args.config)?;
    let reference = estimate_flops(&configs[0].1, args.seq);
    let rows: Vec<InspectRow> = configs
        .into_iter()
        .map(|(name, config)| {
            let count = count_parameters(&config);
            let published = PUBLISHED.iter().find(|r| r.preset == name && r.config == config);
            let flops = estimate_flops(&config, args.seq);
            InspectRow {
                name,
                config,
                total: count.total,
                non_embedding: count.non_embedding,
                published_total_m: published.map(|r| r.total_m),
                published_non_embedding_m: published.map(|r| r.non_embedding_m),
                flops,
                flops_ratio: reference as f64 / flops as f64,
                published_speedup: published.map(|r| r.speedup),
            }
        })
        .collect();
    if args.json {
        print!("{}", json(&rows));
        return Ok(());
    }
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    println!(
        "{:<14} {:>6} {:>6} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>11} {:>8} {:>8}",
        "model", "layers", "hidden", "ffn", "heads", "total M", "published", "non-emb M", "published", "GFLOPs/seq", "FLOPs x", "speedup"
    );
    for r in &rows {
        println!(
            "{:<14} {:>6} {:>6} {:>6} {:>5} {:>9.1} {:>9} {:>9.1} {:>9} {:>11.1} {:>8.2} {:>8}",
            r.name,
            r.config.layers,
            r.config.hidden,
            r.config.ffn,
            r.config.heads,
            r.total as f64 / 1e6,
            opt(r.published_total_m, 1),
            r.non_embedding as f64 / 1e6,
            opt(r.published_non_embedding_m, 1),
            r.flops as f64 / 1e9,
            r.flops_ratio,
            opt(r.published_speedup, 1),
        );
    }
    println!("FLOPs at sequence length {}; ratios relative to {}", args.seq, rows[0].name);
    Ok(())
}

/// Word pieces for the reference sentence when no vocabulary is given.
const DEMO_PIECES: [&str; 3] = ["pro", "##babi", "##lity"];
/// Segmentation words used when no lexicon is given.
const DEMO_WORDS: [&str; 5] = ["使用", "语言", "模型", "预测", "一个"];

/// The demo pieces plus every character of the texts; Latin characters after
/// the first of a word enter as `##` continuations.
fn demo_vocab(texts: &[String]) -> Result<Vocab> {
    let mut tokens: Vec<String> = DEMO_PIECES.iter().map(|s| s.to_string()).collect();
    for text in texts {
        let mut word = String::new();
        for c in text.chars().chain([' ']) {
            if c.is_alphanumeric() && !is_cjk(c) {
                word.extend(c.to_lowercase());
                continue;
            }
            for (i, ch) in std::mem::take(&mut word).chars().enumerate() {
                tokens.push(if i == 0 { ch.to_string() } else { format!("##{ch}") });
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    Vocab::with_reserved(tokens).map_err(invalid)
}

pub fn make_samples(args: SamplesArgs) -> Result<()> {
    let mut texts = args.text.clone();
    if let Some(p) = &args.corpus {
        texts.extend(load_corpus(p).map_err(invalid)?);
    }
    if texts.is_empty() {
        return Err(invalid("give --text or --corpus"));
    }
    let vocab = match &args.vocab {
        Some(p) => Vocab::load(p).map_err(invalid)?,
        None => demo_vocab(&texts)?,
    };
    let lexicon = match &args.lexicon {
        Some(p) => Lexicon::load(p).map_err(invalid)?,
        None => Lexicon::new(DEMO_WORDS).map_err(invalid)?,
    };
    let strategy = match args.strategy {
        StrategyArg::Wwm => MaskStrategy::WholeWord,
        StrategyArg::Token => MaskStrategy::Token,
    };
    let render = |ids: &[usize]| -> String {
        ids.iter().map(|&i| vocab.token(i).unwrap_or("[UNK]")).collect::<Vec<_>>().join(" ")
    };
    for text in &texts {
        let enc = Encoded::new(text, &vocab, &lexicon);
        let words: Vec<String> = enc
            .spans
            .iter()
            .map(|s| enc.tokens[s.range()].iter().map(|t| t.text.trim_start_matches("##")).collect())
            .collect();
        println!("text\t{text}");
        println!("tokens\t{}", render(&enc.ids));
        println!("words\t{}", words.join(" "));
        for k in 0..args.count {
            let seed = args.seed.wrapping_add(k);
            let sample = enc.mask(&vocab, strategy, args.mask_rate, seed).map_err(invalid)?;
            let targets: Vec<String> = sample
                .labels
                .iter()
                .map(|&l| if l == IGNORE_LABEL { "_".to_string() } else { vocab.token(l as usize).unwrap_or("?").to_string() })
                .collect();
            println!("masked seed={seed}\t{}", render(&sample.input_ids));
            println!("targets seed={seed}\t{}", targets.join(" "));
        }
    }
    Ok(())
}

/// Desk-scale plan: 800 teacher + 600 + 600 distillation steps.
fn desk_plan() -> String {
    [
        "mode = \"two_stage\"",
        "teacher = \"desk-teacher\"",
        "assistant = \"desk-assistant\"",
        "student = \"desk-student\"",
        "corpus = \"corpus.txt\"",
        "lexicon = \"lexicon.txt\"",
        "vocab = \"vocab.txt\"",
        "teacher_steps = 800",
        "assistant_steps = 600",
        "steps = 600",
        "batch_size = 16",
        "max_len = 32",
        "seed = 0",
        "",
    ]
    .join("\n")
}

pub fn make_corpus(args: CorpusArgs) -> Result<()> {
    let lang = Language::generate(args.vocab_size, args.seed).map_err(invalid)?;
    create_dir(&args.out)?;
    let corpus = lang.corpus(args.sentences, args.seed.wrapping_add(1));
    write(&args.out.join("corpus.txt"), &(corpus.join("\n") + "\n"))?;
    write(&args.out.join("lexicon.txt"), &lang.lexicon_text())?;
    write(&args.out.join("vocab.txt"), &lang.vocab_text())?;
    let task = TaskDataset::new(lang.task_examples(args.task_examples, args.seed.wrapping_add(2)), 2).map_err(runtime)?;
    write(&args.out.join("task.tsv"), &task.to_text())?;
    write(&args.out.join("desk.plan.toml"), &desk_plan())?;
    println!(
        "wrote {} sentences, {} lexicon words, {} vocabulary entries and {} task examples to {}",
        corpus.len(),
        lang.words.len(),
        lang.vocab.len(),
        task.examples.len(),
        args.out.display()
    );
    Ok(())
}
