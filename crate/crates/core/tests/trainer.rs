use std::path::Path;

use tinykd_core::model::{EncoderModel, ModelConfig};
use tinykd_core::synth::Language;
use tinykd_core::text::Lexicon;
use tinykd_core::trainer::{
    adamw_step, distill_stage, one_stage_pipeline, train_mlm, two_stage_pipeline, window_means, AdamW, Dataset, Mode,
    OptimizerState, Role, StageIo, StageSpec, StepRecord, TrainError, TrainPlan,
};
use tinykd_core::autodiff::Tensor;
use tinykd_core::distill::{uniform_layer_map, DistillConfig};

const VOCAB: usize = 96;

fn tiny(layers: usize, hidden: usize) -> ModelConfig {
    ModelConfig::new(layers, hidden, 2 * hidden, 2).with_vocab(VOCAB, 32)
}

struct Fixture {
    dir: tempfile::TempDir,
    data: Dataset,
    plan: TrainPlan,
}

/// Synthetic language, corpus files, per-role config files and a plan using them.
fn fixture(sentences: usize, steps: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let lang = Language::generate(VOCAB, 3).unwrap();
    let corpus = lang.corpus(sentences, 5);
    let p = |f: &str| dir.path().join(f);
    std::fs::write(p("corpus.txt"), corpus.join("\n")).unwrap();
    std::fs::write(p("lexicon.txt"), lang.lexicon_text()).unwrap();
    std::fs::write(p("vocab.txt"), lang.vocab_text()).unwrap();
    for (name, cfg) in [("teacher", tiny(4, 16)), ("assistant", tiny(2, 12)), ("student", tiny(1, 8))] {
        std::fs::write(p(&format!("{name}.toml")), cfg.to_kv()).unwrap();
    }
    let text = format!(
        "mode = \"two_stage\"\nteacher = {:?}\nassistant = {:?}\nstudent = {:?}\n\
         corpus = \"corpus.txt\"\nlexicon = \"lexicon.txt\"\nvocab = \"vocab.txt\"\n\
         steps = {steps}\nbatch_size = 8\nmax_len = 24\npeak_lr = 3e-3\nlog_window = 10\n",
        p("teacher.toml").display().to_string(),
        p("assistant.toml").display().to_string(),
        p("student.toml").display().to_string(),
    );
    let plan = TrainPlan::parse(&text, dir.path()).unwrap();
    plan.validate().unwrap();
    let lex = Lexicon::parse(&lang.lexicon_text()).unwrap();
    let data = Dataset::from_sentences(lang.vocab, lex, &corpus, plan.heldout_fraction, plan.max_len).unwrap();
    Fixture { dir, data, plan }
}

fn bits(records: &[StepRecord]) -> Vec<[u64; 4]> {
    records
        .iter()
        .map(|r| {
            let opt = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits);
            [r.lr.to_bits(), r.loss.to_bits(), opt(r.layer), opt(r.prediction)]
        })
        .collect()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

// Independent scalar AdamW with decoupled decay and bias correction.
fn oracle_adamw(w: f64, grads: &[f64], lr: f64, hp: &AdamW) -> f64 {
    let (mut w, mut m, mut v) = (w, 0.0, 0.0);
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        let m_hat = m / (1.0 - hp.beta1.powi(t));
        let v_hat = v / (1.0 - hp.beta2.powi(t));
        w = w - lr * hp.weight_decay * w - lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    w
}

#[test]
fn adamw_matches_scalar_oracle() {
    let hp = AdamW::default();
    let grads = [0.5, -1.5, 0.25, 2.0];
    let lr = 1e-2;
    let mut p = Tensor::new(&[1, 1], vec![0.7]).unwrap();
    let mut state = OptimizerState::new([1]);
    for (k, &g) in grads.iter().enumerate() {
        adamw_step(&mut [&mut p], &[Some(vec![g])], &[true], &mut state, &hp, lr, k as u64).unwrap();
    }
    let want = oracle_adamw(0.7, &grads, lr, &hp);
    assert!((p.data()[0] - want).abs() < 1e-15, "{} vs {want}", p.data()[0]);
}

#[test]
fn adamw_zero_gradient_and_decay() {
    let lr = 0.1;
    let no_decay = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let mut a = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    let mut state = OptimizerState::new([2]);
    adamw_step(&mut [&mut a], &[Some(vec![0.0, 0.0])], &[true], &mut state, &no_decay, lr, 0).unwrap();
    assert_eq!(a.data(), &[1.0, -2.0]);

    let hp = AdamW::default();
    let mut b = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    let mut state = OptimizerState::new([2]);
    adamw_step(&mut [&mut b], &[Some(vec![0.0, 0.0])], &[true], &mut state, &hp, lr, 0).unwrap();
    let s = 1.0 - lr * hp.weight_decay;
    assert_eq!(b.data(), &[s, -2.0 * s]);

    // excluded from decay, or no gradient at all: untouched
    let mut c = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
    let mut d = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
    let mut state = OptimizerState::new([2, 2]);
    adamw_step(&mut [&mut c, &mut d], &[Some(vec![0.0, 0.0]), None], &[false, true], &mut state, &hp, lr, 0).unwrap();
    assert_eq!((c.data(), d.data()), (&[1.0, -2.0][..], &[3.0, 4.0][..]));
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
    let mut state = OptimizerState::new([1]);
    let err = adamw_step(&mut [&mut p], &[Some(vec![f64::NAN])], &[true], &mut state, &AdamW::default(), 0.1, 4)
        .unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient { step: 4 }));
    assert_eq!(p.data(), &[1.0]);
}

#[test]
fn mlm_loss_decreases() {
    let f = fixture(64, 200);
    let out = train_mlm(&f.plan, tiny(2, 16), &f.data, &StageIo::default()).unwrap();
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 200);
    let (first, last) = window_means(&losses, 20).unwrap();
    assert!(last < 0.8 * first, "first {first} last {last}");
}

#[test]
fn runs_are_bitwise_reproducible() {
    let f = fixture(48, 10);
    let a = train_mlm(&f.plan, tiny(2, 16), &f.data, &StageIo::default()).unwrap();
    let b = train_mlm(&f.plan, tiny(2, 16), &f.data, &StageIo::default()).unwrap();
    assert_eq!(bits(&a.log.records), bits(&b.log.records));
    assert_eq!(a.model.params().fingerprint(), b.model.params().fingerprint());

    let mut other = f.plan.clone();
    other.seed += 1;
    let c = train_mlm(&other, tiny(2, 16), &f.data, &StageIo::default()).unwrap();
    assert_ne!(bits(&a.log.records), bits(&c.log.records));
}

#[test]
fn mlm_resume_matches_uninterrupted_run() {
    let f = fixture(48, 8);
    let mut plan = f.plan.clone();
    plan.checkpoint_every = 3;
    let full_dir = f.dir.path().join("full");
    std::fs::create_dir(&full_dir).unwrap();
    let full = train_mlm(&plan, tiny(2, 16), &f.data, &StageIo::in_dir(&full_dir)).unwrap();
    assert!(full_dir.join("teacher.step3.ckpt").is_file());
    assert!(full_dir.join("teacher.step6.ckpt").is_file());

    let resumed_dir = f.dir.path().join("resumed");
    std::fs::create_dir(&resumed_dir).unwrap();
    std::fs::copy(full_dir.join("teacher.metrics.tsv"), resumed_dir.join("teacher.metrics.tsv")).unwrap();
    let io = StageIo { dir: Some(resumed_dir.clone()), resume: Some(full_dir.join("teacher.step3.ckpt")) };
    let resumed = train_mlm(&plan, tiny(2, 16), &f.data, &io).unwrap();
    assert_eq!(resumed.log.records.first().unwrap().step, 3);
    assert_eq!(bits(&resumed.log.records), bits(&full.log.records[3..]));
    assert_eq!(resumed.model.params().fingerprint(), full.model.params().fingerprint());
    let read = |d: &Path| std::fs::read_to_string(d.join("teacher.metrics.tsv")).unwrap();
    assert_eq!(read(&resumed_dir), read(&full_dir));
}

#[test]
fn resume_rejects_mismatched_checkpoints() {
    let f = fixture(48, 4);
    let mut plan = f.plan.clone();
    plan.checkpoint_every = 2;
    train_mlm(&plan, tiny(2, 16), &f.data, &StageIo::in_dir(f.dir.path())).unwrap();
    let ckpt = f.dir.path().join("teacher.step2.ckpt");

    let mut reseeded = plan.clone();
    reseeded.seed = 99;
    let io = StageIo { dir: None, resume: Some(ckpt.clone()) };
    assert!(matches!(train_mlm(&reseeded, tiny(2, 16), &f.data, &io), Err(TrainError::Resume(_))));
    assert!(matches!(train_mlm(&plan, tiny(1, 16), &f.data, &io), Err(TrainError::Resume(_))));
    let final_model = StageIo { dir: None, resume: Some(f.dir.path().join("teacher.ckpt")) };
    assert!(matches!(train_mlm(&plan, tiny(2, 16), &f.data, &final_model), Err(TrainError::Resume(_))));
}

fn stage_spec<'a>(teacher: &'a EncoderModel, student: ModelConfig, steps: u64) -> StageSpec<'a> {
    let map = uniform_layer_map(student.layers, teacher.config().layers).unwrap();
    StageSpec { name: "student", role: Role::Student, teacher, student, distill: DistillConfig::new(map), steps }
}

#[test]
fn distill_stage_resume_restores_projections_and_moments() {
    let f = fixture(48, 6);
    let teacher = EncoderModel::init(tiny(2, 16), 1).unwrap();
    let mut plan = f.plan.clone();
    plan.checkpoint_every = 2;
    let spec = stage_spec(&teacher, tiny(1, 8), 6);
    let full = distill_stage(&spec, &plan, &f.data, &StageIo::in_dir(f.dir.path())).unwrap();
    let io = StageIo { dir: None, resume: Some(f.dir.path().join("student.step4.ckpt")) };
    let resumed = distill_stage(&spec, &plan, &f.data, &io).unwrap();
    assert_eq!(bits(&resumed.log.records), bits(&full.log.records[4..]));
    assert_eq!(resumed.projections.fingerprint(), full.projections.fingerprint());
    assert_eq!(resumed.student.params().fingerprint(), full.student.params().fingerprint());
}

#[test]
fn distillation_never_touches_the_teacher() {
    let f = fixture(48, 5);
    let teacher = EncoderModel::init(tiny(2, 16), 1).unwrap();
    let before = teacher.params().fingerprint();
    let out = distill_stage(&stage_spec(&teacher, tiny(1, 8), 5), &f.plan, &f.data, &StageIo::default()).unwrap();
    assert_eq!(teacher.params().fingerprint(), before);
    assert_eq!(out.log.records.len(), 5);
    assert!(out.log.records.iter().all(|r| {
        let (l, p) = (r.layer.unwrap(), r.prediction.unwrap());
        l >= 0.0 && p >= 0.0 && r.loss == l + p
    }));
}

#[test]
fn zero_learning_rate_smoke() {
    let f = fixture(48, 4);
    let teacher = EncoderModel::init(tiny(2, 16), 1).unwrap();
    let mut plan = f.plan.clone();
    plan.peak_lr = 0.0;
    let spec = stage_spec(&teacher, tiny(2, 16), 4);
    let out = distill_stage(&spec, &plan, &f.data, &StageIo::default()).unwrap();
    assert_eq!(out.log.records.first().unwrap().step, 0);
    assert!(out.log.records.iter().all(|r| r.loss.is_finite() && r.layer.unwrap() > 0.0));
    let init = EncoderModel::init(tiny(2, 16), tinykd_core::trainer::role_seed(plan.seed, Role::Student, 1)).unwrap();
    assert_eq!(out.student.params().fingerprint(), init.params().fingerprint());
}

#[test]
fn bad_layer_map_fails_before_any_step() {
    let f = fixture(48, 4);
    let teacher = EncoderModel::init(tiny(4, 16), 1).unwrap();
    let mut plan = f.plan.clone();
    plan.assistant_student_map = Some("1:3".into());
    let out = f.dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    assert!(plan.validate().is_err());
    let err = two_stage_pipeline(&plan, &teacher, &f.data, Some(&out), None).unwrap_err();
    assert!(matches!(err, TrainError::Distill(_)), "{err}");
    assert!(files_in(&out).is_empty(), "{:?}", files_in(&out));

    let mut plan = f.plan.clone();
    plan.teacher_student_map = Some("2:1,1:2".into());
    assert!(one_stage_pipeline(&plan, &teacher, &f.data, Some(&out), None).is_err());
    assert!(files_in(&out).is_empty());
}

#[test]
fn pipelines_share_final_budget_and_report_schema() {
    let f = fixture(64, 6);
    let mut plan = f.plan.clone();
    plan.assistant_steps = Some(4);
    let teacher = EncoderModel::init(tiny(4, 16), 1).unwrap();
    let out = f.dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let two = two_stage_pipeline(&plan, &teacher, &f.data, Some(&out), None).unwrap();
    let one = one_stage_pipeline(&plan, &teacher, &f.data, Some(&out), None).unwrap();
    assert_eq!((two.report.pipeline, one.report.pipeline), (Mode::TwoStage, Mode::OneStage));
    assert_eq!(two.report.final_stage_steps, one.report.final_stage_steps);
    assert_eq!((two.report.total_steps, one.report.total_steps), (10, 6));
    assert_eq!(two.report.stages.iter().map(|s| s.layer_map.as_str()).collect::<Vec<_>>(), ["1:2,2:4", "1:2"]);
    assert_eq!(one.report.stages[0].layer_map, "1:4");
    // both students start from the same weights and see the same batches
    let s2 = &two.report.stages[1].l_distill;
    assert_eq!(s2.len(), 6);
    assert_eq!(two.report.student, one.report.student);
    for name in [
        "assistant.ckpt",
        "assistant.metrics.tsv",
        "student.ckpt",
        "student.metrics.tsv",
        "one_stage_student.ckpt",
        "one_stage_student.metrics.tsv",
        "two_stage.report.json",
        "one_stage.report.json",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("two_stage.report.json")).unwrap()).unwrap();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    let one_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("one_stage.report.json")).unwrap()).unwrap();
    assert_eq!(keys(&report), keys(&one_json));
    let tsv = std::fs::read_to_string(out.join("student.metrics.tsv")).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "step\tlr\tL_layer\tL_pred\tL_distill");
    assert_eq!(tsv.lines().count(), 7);
}

#[test]
fn second_stage_resume_reloads_the_assistant() {
    let f = fixture(64, 4);
    let mut plan = f.plan.clone();
    plan.assistant_steps = Some(3);
    plan.checkpoint_every = 2;
    let teacher = EncoderModel::init(tiny(4, 16), 1).unwrap();
    let full = two_stage_pipeline(&plan, &teacher, &f.data, Some(f.dir.path()), None).unwrap();
    let ckpt = f.dir.path().join("student.step2.ckpt");
    let resumed = two_stage_pipeline(&plan, &teacher, &f.data, Some(f.dir.path()), Some(&ckpt)).unwrap();
    assert_eq!(resumed.student.params().fingerprint(), full.student.params().fingerprint());
    assert_eq!(resumed.report.stages[0].l_distill, full.report.stages[0].l_distill);
    assert_eq!(&full.report.stages[1].l_distill[2..], &resumed.report.stages[1].l_distill[..]);
}

#[test]
fn full_size_chain_maps_validate() {
    let f = fixture(16, 1);
    let mut plan = f.plan.clone();
    plan.teacher = "roberta-wwm".into();
    plan.assistant = Some("rbt6".into());
    plan.student = Some("minirbt-h256".into());
    plan.validate().unwrap();
    let (t, a, s) = (plan.teacher_config().unwrap(), plan.assistant_config().unwrap(), plan.student_config().unwrap());
    let m1 = plan.layer_map(&plan.teacher_assistant_map, &a, &t).unwrap();
    let m2 = plan.layer_map(&plan.assistant_student_map, &s, &a).unwrap();
    assert_eq!(m1.pairs(), &[(1, 2), (2, 4), (3, 6), (4, 8), (5, 10), (6, 12)]);
    assert_eq!(m2.pairs(), &[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6)]);
}
