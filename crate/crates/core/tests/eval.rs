mod common;

use common::bag_of_tokens_oracle;
use tinykd_core::eval::{
    benchmark_inference, compare_pipelines, fine_tune_classifier, BenchOptions, EvalError, FineTuneConfig,
    PipelineRun, TaskDataset, TaskSplit, Threading,
};
use tinykd_core::model::{estimate_flops, preset, EncoderModel, ModelConfig};
use tinykd_core::synth::Language;
use tinykd_core::text::Lexicon;
use tinykd_core::trainer::{HeldoutScore, Mode, PipelineReport, StageReport};

fn toy() -> (Language, Lexicon, TaskSplit) {
    let lang = Language::generate(96, 3).unwrap();
    let lex = Lexicon::parse(&lang.lexicon_text()).unwrap();
    let split = TaskDataset::new(lang.task_examples(200, 8), 2).unwrap().split(0.25, 1).unwrap();
    (lang, lex, split)
}

#[test]
fn toy_task_is_certified_learnable() {
    let (lang, _, split) = toy();
    assert_eq!(bag_of_tokens_oracle(&lang, &split), 1.0);
    let larger = TaskDataset::new(lang.task_examples(600, 21), 2).unwrap().split(0.25, 3).unwrap();
    assert_eq!(bag_of_tokens_oracle(&lang, &larger), 1.0);
}

fn small_model() -> EncoderModel {
    EncoderModel::init(ModelConfig::new(1, 16, 32, 2).with_vocab(96, 32), 4).unwrap()
}

#[test]
fn untrained_head_predicts_the_majority_class() {
    let (lang, lex, mut split) = toy();
    split.train.retain(|(l, t)| *l == 0 || t.len() % 3 == 0);
    let cfg = FineTuneConfig { epochs: 0, ..Default::default() };
    let out = fine_tune_classifier(&small_model(), &lang.vocab, &lex, &split, &cfg).unwrap();
    assert!(out.epoch_losses.is_empty());
    assert_eq!(out.dev_accuracy, out.majority_baseline);
    assert_eq!(out.majority_baseline, split.dev.iter().filter(|(l, _)| *l == 0).count() as f64 / split.dev.len() as f64);
}

#[test]
fn fine_tuning_is_seed_deterministic_and_learns() {
    let (lang, lex, split) = toy();
    let cfg = FineTuneConfig { epochs: 3, lr: 3e-3, ..Default::default() };
    let a = fine_tune_classifier(&small_model(), &lang.vocab, &lex, &split, &cfg).unwrap();
    let b = fine_tune_classifier(&small_model(), &lang.vocab, &lex, &split, &cfg).unwrap();
    assert_eq!(a.dev_accuracy, b.dev_accuracy);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap(), "{:?}", a.epoch_losses);
}

#[test]
fn fine_tuning_contract_errors() {
    let (lang, lex, split) = toy();
    let mut bad = split.clone();
    bad.dev[0].0 = 5;
    let r = fine_tune_classifier(&small_model(), &lang.vocab, &lex, &bad, &FineTuneConfig::default());
    assert!(matches!(r, Err(EvalError::Label { label: 5, classes: 2 })));
    let narrow = EncoderModel::init(ModelConfig::new(1, 16, 32, 2).with_vocab(40, 32), 4).unwrap();
    let r = fine_tune_classifier(&narrow, &lang.vocab, &lex, &split, &FineTuneConfig::default());
    assert!(matches!(r, Err(EvalError::VocabMismatch { .. })));
}

fn quick(trials: usize) -> BenchOptions {
    BenchOptions { seq_len: 16, batch: 2, warmup: 2, trials, ..Default::default() }
}

#[test]
fn benchmark_reports_medians_and_ratios() {
    let t = ModelConfig::new(2, 32, 64, 2).with_vocab(64, 32);
    let s = ModelConfig::new(1, 16, 32, 2).with_vocab(64, 32);
    let report = benchmark_inference(&[("t".into(), t), ("t-again".into(), t), ("s".into(), s)], &quick(31)).unwrap();
    assert_eq!(report.threads, 1);
    assert!(report.protocol.contains("median"));
    for row in &report.rows {
        assert_eq!(row.trials.len(), 31);
        assert!(row.skipped.is_none());
        let mut sorted = row.trials.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(row.median_secs, Some(sorted[15]));
        assert_eq!(row.speedup, Some(report.rows[0].median_secs.unwrap() / row.median_secs.unwrap()));
    }
    assert_eq!(report.rows[0].speedup, Some(1.0));
    assert_eq!(report.rows[2].flops_ratio, estimate_flops(&t, 16) as f64 / estimate_flops(&s, 16) as f64);
    let same = report.rows[1].speedup.unwrap();
    assert!((0.5..2.0).contains(&same), "identical config speedup {same}");
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"trials\""));
}

#[test]
fn oversized_configs_are_skipped_not_fatal() {
    let big = preset("roberta-wwm").unwrap();
    let small = preset("minirbt-h256").unwrap();
    let opts = BenchOptions { seq_len: 512, batch: 8, max_bytes: 1 << 20, trials: 1, warmup: 0, ..Default::default() };
    let report = benchmark_inference(&[("roberta-wwm".into(), big), ("minirbt-h256".into(), small)], &opts).unwrap();
    assert!(report.rows.iter().all(|r| r.skipped.is_some() && r.trials.is_empty() && r.speedup.is_none()));
    assert!(report.rows[1].flops_ratio >= 6.8);
    assert!(report.table().contains("skipped"));
    let opts = BenchOptions { seq_len: 64, threading: Threading::Single, ..quick(1) };
    let desk = preset("desk-student").unwrap();
    let r = benchmark_inference(&[("desk".into(), desk)], &BenchOptions { seq_len: 65, ..opts }).unwrap();
    assert!(r.rows[0].skipped.as_ref().unwrap().contains("max_positions"));
}

fn stage(name: &str, layer: f64, pred: f64) -> StageReport {
    let cfg = ModelConfig::new(1, 8, 16, 2);
    StageReport {
        name: name.into(),
        teacher: cfg,
        student: cfg,
        layer_map: "1:1".into(),
        steps: 10,
        window: 5,
        first_window_mean: Some(9.0),
        last_window_mean: Some(layer + pred),
        relative_decrease: Some(1.0 - (layer + pred) / 9.0),
        final_layer: Some(layer),
        final_prediction: Some(pred),
        final_distill: Some(layer + pred),
        l_distill: vec![layer + pred; 10],
    }
}

fn run(mode: Mode, seed: u64, layer: f64, acc: f64, toy: f64) -> PipelineRun {
    let stages = match mode {
        Mode::TwoStage => vec![stage("assistant", 1.0, 6.0), stage("student", layer, 6.0)],
        _ => vec![stage("one_stage_student", layer, 6.0)],
    };
    PipelineRun {
        report: PipelineReport {
            pipeline: mode,
            seed,
            final_stage_steps: 10,
            total_steps: 10 * stages.len() as u64,
            stages,
            student: ModelConfig::new(1, 8, 16, 2),
            heldout: HeldoutScore { accuracy: acc, tokens: 100, random_baseline: 0.01 },
        },
        toy_accuracy: Some(toy),
    }
}

#[test]
fn identical_runs_give_zero_deltas() {
    let two = [run(Mode::TwoStage, 0, 0.5, 0.3, 0.9)];
    let one = [run(Mode::OneStage, 0, 0.5, 0.3, 0.9)];
    let c = compare_pipelines(&two, &one).unwrap();
    assert!(c.deltas.iter().all(|&d| d == 0.0));
    assert_eq!(c.columns.len(), 5);
    let table = c.table();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[2].starts_with("| two-stage") && lines[3].starts_with("| one-stage"), "{table}");
}

#[test]
fn three_seed_cells_are_mean_and_sample_spread() {
    let accs = [0.2, 0.3, 0.7];
    let two: Vec<PipelineRun> = (0..3).map(|s| run(Mode::TwoStage, s, 0.5, accs[s as usize], 1.0)).collect();
    let one: Vec<PipelineRun> = (0..3).map(|s| run(Mode::OneStage, s, 0.6, 0.4, 0.9)).collect();
    let c = compare_pipelines(&two, &one).unwrap();
    let col = c.columns.iter().position(|n| n == "held-out MLM acc").unwrap();
    let cell = c.rows[0].cells[col];
    // mean 0.4, deviations −0.2, −0.1, 0.3 → variance 0.14 / 2
    assert!((cell.mean - 0.4).abs() < 1e-15);
    assert!((cell.spread - 0.07f64.sqrt()).abs() < 1e-15);
    assert_eq!(cell.n, 3);
    assert!(c.deltas[col].abs() < 1e-15);
    let layer = c.columns.iter().position(|n| n == "final L_layer").unwrap();
    assert!((c.deltas[layer] + 0.1).abs() < 1e-12);
}

#[test]
fn mismatched_runs_are_refused() {
    let two = [run(Mode::TwoStage, 0, 0.5, 0.3, 0.9)];
    let mut one = run(Mode::OneStage, 0, 0.5, 0.3, 0.9);
    one.report.final_stage_steps = 20;
    assert!(matches!(compare_pipelines(&two, &[one]), Err(EvalError::Mismatch(m)) if m.contains("budget")));
    let one = run(Mode::OneStage, 1, 0.5, 0.3, 0.9);
    assert!(matches!(compare_pipelines(&two, &[one]), Err(EvalError::Mismatch(m)) if m.contains("seeds")));
    let swapped = run(Mode::TwoStage, 0, 0.5, 0.3, 0.9);
    assert!(compare_pipelines(&two, &[swapped]).is_err());
    let mut one = run(Mode::OneStage, 0, 0.5, 0.3, 0.9);
    one.toy_accuracy = None;
    assert!(compare_pipelines(&two, &[one]).is_err());
}
