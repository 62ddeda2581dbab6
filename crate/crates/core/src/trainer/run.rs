//! Training loops, resumable training state and the two distillation pipelines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{DataStream, Dataset};
use super::metrics::{window_means, LogKind, MetricsLog, StepRecord};
use super::optim::{adamw_step, clip_global_norm, OptimizerState};
use super::plan::{Mode, TrainPlan};
use super::TrainError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::distill::{
    init_projections, prediction_rows, student_losses, teacher_targets, DistillConfig, LayerMap,
};
use crate::model::{Bound, Checkpoint, EncoderModel, ModelConfig, Param, ParamGroup, ParamSet};
use crate::text::{derive_seed, Batch};

/// Which model a stage trains; every seed a stage uses is derived from the
/// plan seed and this role, so the student of both pipelines starts from the
/// same weights and sees the same batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Assistant,
    Student,
}

const PURPOSE_DATA: u64 = 0;
const PURPOSE_INIT: u64 = 1;
const PURPOSE_PROJECTION: u64 = 2;

pub fn role_seed(seed: u64, role: Role, purpose: u64) -> u64 {
    derive_seed(seed, role as u64, purpose)
}

/// Where a stage writes its artifacts and an optional training checkpoint
/// to continue from.
#[derive(Debug, Clone, Default)]
pub struct StageIo {
    pub dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl StageIo {
    pub fn in_dir(dir: &Path) -> Self {
        Self { dir: Some(dir.to_path_buf()), resume: None }
    }

    fn path(&self, file: String) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(file))
    }
}

/// Parameters being optimised (model first, then projections), their
/// optimizer moments and the number of completed steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub model_len: usize,
    pub opt: OptimizerState,
    pub step: u64,
}

impl TrainState {
    fn fresh(model: EncoderModel, extra: ParamSet) -> Self {
        let config = *model.config();
        let mut params = model.params().clone().into_vec();
        let model_len = params.len();
        params.extend(extra.into_vec());
        let params = ParamSet::from_vec(params);
        let opt = OptimizerState::new(params.iter().map(|p| p.tensor.numel()));
        Self { config, params, model_len, opt, step: 0 }
    }

    fn split(self) -> Result<(EncoderModel, ParamSet), TrainError> {
        let mut all = self.params.into_vec();
        let extra = all.split_off(self.model_len);
        Ok((EncoderModel::from_params(self.config, ParamSet::from_vec(all))?, ParamSet::from_vec(extra)))
    }

    /// Model tensors plus `adam.m.*` / `adam.v.*` moments and step counters.
    pub fn to_checkpoint(&self, stage: &str, seed: u64) -> Result<Checkpoint, TrainError> {
        let model_params: Vec<Param> = self.params.iter().take(self.model_len).cloned().collect();
        let mut ck = EncoderModel::from_params(self.config, ParamSet::from_vec(model_params))?.to_checkpoint();
        ck.set_meta("kind", "train");
        ck.set_meta("stage", stage);
        ck.set_meta("step", self.step);
        ck.set_meta("optimizer_step", self.opt.step);
        ck.set_meta("seed", seed);
        ck.set_meta("model_tensors", self.model_len);
        for p in self.params.iter().skip(self.model_len) {
            ck.tensors.push(Param { name: p.name.clone(), group: p.group, tensor: p.tensor.detach() });
        }
        for (i, p) in self.params.iter().enumerate() {
            for (prefix, moments) in [("adam.m", &self.opt.m[i]), ("adam.v", &self.opt.v[i])] {
                ck.tensors.push(Param {
                    name: format!("{prefix}.{}", p.name),
                    group: ParamGroup::Optimizer,
                    tensor: Tensor::new(p.tensor.shape(), moments.clone())?,
                });
            }
        }
        Ok(ck)
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`] onto the
    /// layout of `template` (same parameter names in the same order).
    fn restore(template: &TrainState, ck: &Checkpoint, stage: &str, seed: u64) -> Result<Self, TrainError> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| TrainError::Resume(format!("missing metadata {k}")));
        if meta("kind")? != "train" {
            return Err(TrainError::Resume("not a training checkpoint".into()));
        }
        if meta("stage")? != stage {
            return Err(TrainError::Resume(format!("checkpoint is for stage {:?}, not {stage:?}", meta("stage")?)));
        }
        let ck_seed: u64 = meta("seed")?.parse().map_err(|_| TrainError::Resume("bad seed".into()))?;
        if ck_seed != seed {
            return Err(TrainError::Resume(format!("checkpoint seed {ck_seed} differs from plan seed {seed}")));
        }
        if ck.config()? != template.config {
            return Err(TrainError::Resume("model config differs from the plan".into()));
        }
        let num = |k: &str| -> Result<u64, TrainError> {
            meta(k)?.parse().map_err(|_| TrainError::Resume(format!("bad {k}")))
        };
        let find = |name: &str, like: &Tensor| -> Result<Tensor, TrainError> {
            let t = &ck
                .tensors
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| TrainError::Resume(format!("missing tensor {name}")))?
                .tensor;
            if t.shape() != like.shape() {
                return Err(TrainError::Resume(format!("tensor {name} has shape {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let mut state = template.clone();
        for (i, p) in state.params.iter_mut().enumerate() {
            let like = p.tensor.clone();
            p.tensor = find(&p.name, &like)?;
            state.opt.m[i] = find(&format!("adam.m.{}", p.name), &like)?.into_data();
            state.opt.v[i] = find(&format!("adam.v.{}", p.name), &like)?.into_data();
        }
        state.step = num("step")?;
        state.opt.step = num("optimizer_step")?;
        Ok(state)
    }
}

type StepOutput = (Var, Option<(f64, f64)>);

/// Runs optimisation steps until `state.step == total`.
fn optimize<F>(
    state: &mut TrainState,
    plan: &TrainPlan,
    total: u64,
    stream: &mut DataStream,
    log: &mut MetricsLog,
    save: &mut dyn FnMut(&TrainState) -> Result<(), TrainError>,
    mut objective: F,
) -> Result<(), TrainError>
where
    F: FnMut(&mut Tape, &[Var], &Batch) -> Result<StepOutput, TrainError>,
{
    let schedule = plan.schedule(total);
    let hp = plan.optimizer();
    let decay: Vec<bool> = state.params.iter().map(Param::decays).collect();
    while state.step < total {
        let step = state.step;
        let batch = stream.batch(step)?;
        let mut tape = Tape::new();
        let vars = state.params.bind(&mut tape, true);
        let (loss, parts) = objective(&mut tape, &vars, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
        drop(tape);
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step });
        }
        if plan.clip_norm > 0.0 {
            clip_global_norm(&mut grads, plan.clip_norm);
        }
        let lr = schedule.lr(step);
        let mut tensors: Vec<&mut Tensor> = state.params.iter_mut().map(|p| &mut p.tensor).collect();
        adamw_step(&mut tensors, &grads, &decay, &mut state.opt, &hp, lr, step)?;
        state.step += 1;
        log.push(StepRecord {
            step,
            lr,
            loss: value,
            layer: parts.map(|p| p.0),
            prediction: parts.map(|p| p.1),
        })?;
        if plan.checkpoint_every > 0 && state.step % plan.checkpoint_every == 0 && state.step < total {
            save(state)?;
        }
    }
    Ok(())
}

fn check_vocab(data: &Dataset, config: &ModelConfig) -> Result<(), TrainError> {
    if data.vocab.len() > config.vocab_size {
        return Err(TrainError::Plan(format!(
            "tokenizer vocabulary of {} exceeds model vocabulary of {}",
            data.vocab.len(),
            config.vocab_size
        )));
    }
    Ok(())
}

fn open_log(kind: LogKind, io: &StageIo, stage: &str, start: u64) -> Result<MetricsLog, TrainError> {
    match io.path(format!("{stage}.metrics.tsv")) {
        Some(p) => MetricsLog::file(kind, &p, start),
        None => Ok(MetricsLog::memory(kind)),
    }
}

fn saver<'a>(io: &'a StageIo, stage: &'a str, seed: u64) -> impl FnMut(&TrainState) -> Result<(), TrainError> + 'a {
    move |s: &TrainState| {
        if let Some(p) = io.path(format!("{stage}.step{}.ckpt", s.step)) {
            s.to_checkpoint(stage, seed)?.save(&p)?;
        }
        Ok(())
    }
}

fn resume_state(fresh: TrainState, io: &StageIo, stage: &str, seed: u64) -> Result<TrainState, TrainError> {
    match &io.resume {
        Some(path) => TrainState::restore(&fresh, &Checkpoint::load(path)?, stage, seed),
        None => Ok(fresh),
    }
}

#[derive(Debug)]
pub struct MlmOutcome {
    pub model: EncoderModel,
    pub log: MetricsLog,
}

/// Masked-language-model training from a fresh initialisation for
/// `plan.mlm_steps()` steps. Writes `teacher.metrics.tsv` and `teacher.ckpt`
/// when `io.dir` is set.
pub fn train_mlm(plan: &TrainPlan, config: ModelConfig, data: &Dataset, io: &StageIo) -> Result<MlmOutcome, TrainError> {
    const STAGE: &str = "teacher";
    check_vocab(data, &config)?;
    let init = EncoderModel::init(config, role_seed(plan.seed, Role::Teacher, PURPOSE_INIT))?;
    let mut state = resume_state(TrainState::fresh(init.clone(), ParamSet::new()), io, STAGE, plan.seed)?;
    let mut stream = DataStream::new(
        data,
        plan.batch_size,
        plan.max_len,
        role_seed(plan.seed, Role::Teacher, PURPOSE_DATA),
        plan.mask_strategy,
        plan.mask_rate,
    );
    let mut log = open_log(LogKind::Mlm, io, STAGE, state.step)?;
    optimize(&mut state, plan, plan.mlm_steps(), &mut stream, &mut log, &mut saver(io, STAGE, plan.seed), |tape, vars, batch| {
        let bound = Bound { vars: vars.to_vec() };
        let enc = init.encode(tape, &bound, &batch.ids, &batch.lengths, batch.max_len)?;
        let logits = init.mlm_logits(tape, &bound, enc.last(), Some(&batch.labeled_positions()))?;
        Ok((tape.cross_entropy(logits, &batch.labeled_targets())?, None))
    })?;
    let (model, _) = state.split()?;
    if let Some(p) = io.path(format!("{STAGE}.ckpt")) {
        model.save(&p)?;
    }
    Ok(MlmOutcome { model, log })
}

/// One teacher → student distillation stage.
#[derive(Debug, Clone)]
pub struct StageSpec<'a> {
    /// File stem for this stage's artifacts.
    pub name: &'a str,
    pub role: Role,
    pub teacher: &'a EncoderModel,
    pub student: ModelConfig,
    pub distill: DistillConfig,
    pub steps: u64,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub student: EncoderModel,
    pub projections: ParamSet,
    pub log: MetricsLog,
}

/// Trains a fresh student and its projections on L_distill against a frozen
/// teacher. Writes `{name}.metrics.tsv` and `{name}.ckpt` (student only).
pub fn distill_stage(spec: &StageSpec, plan: &TrainPlan, data: &Dataset, io: &StageIo) -> Result<StageOutcome, TrainError> {
    let tcfg = *spec.teacher.config();
    check_vocab(data, &spec.student)?;
    check_vocab(data, &tcfg)?;
    // revalidate the map against this particular pair before any step
    LayerMap::new(spec.distill.layer_map.pairs().to_vec(), spec.student.layers, tcfg.layers)?;
    spec.distill.validate()?;
    if spec.student.vocab_size != tcfg.vocab_size {
        return Err(TrainError::Plan(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            spec.student.vocab_size, tcfg.vocab_size
        )));
    }

    let init = EncoderModel::init(spec.student, role_seed(plan.seed, spec.role, PURPOSE_INIT))?;
    let projections = init_projections(
        &spec.distill.layer_map,
        spec.student.hidden,
        tcfg.hidden,
        role_seed(plan.seed, spec.role, PURPOSE_PROJECTION),
    );
    let mut state = resume_state(TrainState::fresh(init.clone(), projections), io, spec.name, plan.seed)?;
    let n_model = state.model_len;
    let mut stream = DataStream::new(
        data,
        plan.batch_size,
        plan.max_len,
        role_seed(plan.seed, spec.role, PURPOSE_DATA),
        plan.mask_strategy,
        plan.mask_rate,
    );
    let mut log = open_log(LogKind::Distill, io, spec.name, state.step)?;
    optimize(
        &mut state,
        plan,
        spec.steps,
        &mut stream,
        &mut log,
        &mut saver(io, spec.name, plan.seed),
        |tape, vars, batch| {
            let rows = prediction_rows(batch, spec.distill.positions);
            let targets = teacher_targets(spec.teacher, batch, &rows)?;
            let bound = Bound { vars: vars[..n_model].to_vec() };
            let l = student_losses(tape, &init, &bound, &vars[n_model..], batch, &targets, &spec.distill)?;
            let parts = (tape.value(l.layer).item(), tape.value(l.prediction).item());
            Ok((l.total, Some(parts)))
        },
    )?;
    let (student, projections) = state.split()?;
    if let Some(p) = io.path(format!("{}.ckpt", spec.name)) {
        student.save(&p)?;
    }
    Ok(StageOutcome { student, projections, log })
}

/// Accuracy of MLM predictions on the held-out split's masked tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore {
    pub accuracy: f64,
    pub tokens: usize,
    /// `1 / vocab_size`, the expected accuracy of a uniform guess.
    pub random_baseline: f64,
}

pub fn heldout_accuracy(model: &EncoderModel, data: &Dataset, plan: &TrainPlan) -> Result<HeldoutScore, TrainError> {
    let batches = data.heldout_batches(plan.mask_strategy, plan.mask_rate, plan.seed, plan.batch_size, plan.max_len)?;
    let (mut correct, mut tokens) = (0usize, 0usize);
    for batch in &batches {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let enc = model.encode(&mut tape, &bound, &batch.ids, &batch.lengths, batch.max_len)?;
        let logits = model.mlm_logits(&mut tape, &bound, enc.last(), Some(&batch.labeled_positions()))?;
        let v = model.config().vocab_size;
        for (row, &target) in tape.value(logits).data().chunks(v).zip(&batch.labeled_targets()) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0;
            correct += usize::from(best == target);
            tokens += 1;
        }
    }
    Ok(HeldoutScore {
        accuracy: if tokens == 0 { 0.0 } else { correct as f64 / tokens as f64 },
        tokens,
        random_baseline: 1.0 / model.config().vocab_size as f64,
    })
}

/// Summary of one distillation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub layer_map: String,
    pub steps: u64,
    pub window: usize,
    pub first_window_mean: Option<f64>,
    pub last_window_mean: Option<f64>,
    /// `1 − last / first` of the windowed L_distill means.
    pub relative_decrease: Option<f64>,
    pub final_layer: Option<f64>,
    pub final_prediction: Option<f64>,
    pub final_distill: Option<f64>,
    pub l_distill: Vec<f64>,
}

impl StageReport {
    fn new(spec: &StageSpec, log: &MetricsLog, window: usize) -> Self {
        let curve: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        let means = window_means(&curve, window);
        let last = log.records.last();
        Self {
            name: spec.name.to_string(),
            teacher: *spec.teacher.config(),
            student: spec.student,
            layer_map: spec.distill.layer_map.to_string(),
            steps: spec.steps,
            window,
            first_window_mean: means.map(|m| m.0),
            last_window_mean: means.map(|m| m.1),
            relative_decrease: means.map(|(a, b)| 1.0 - b / a),
            final_layer: last.and_then(|r| r.layer),
            final_prediction: last.and_then(|r| r.prediction),
            final_distill: last.map(|r| r.loss),
            l_distill: curve,
        }
    }
}

/// Same schema for both pipelines so reports can be diffed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: Mode,
    pub seed: u64,
    /// Steps spent on the stage that produces the final student.
    pub final_stage_steps: u64,
    pub total_steps: u64,
    pub stages: Vec<StageReport>,
    pub student: ModelConfig,
    pub heldout: HeldoutScore,
}

#[derive(Debug)]
pub struct TwoStageOutcome {
    pub assistant: EncoderModel,
    pub student: EncoderModel,
    pub report: PipelineReport,
}

#[derive(Debug)]
pub struct OneStageOutcome {
    pub student: EncoderModel,
    pub report: PipelineReport,
}

fn distill_config(plan: &TrainPlan, map: LayerMap) -> DistillConfig {
    DistillConfig {
        temperature: plan.temperature,
        layer_map: map,
        hidden_weight: plan.hidden_weight,
        prediction_weight: plan.prediction_weight,
        positions: plan.prediction_positions,
    }
}

fn staged<T>(stage: &str, r: Result<T, TrainError>) -> Result<T, TrainError> {
    r.map_err(|e| TrainError::Stage { stage: stage.to_string(), source: Box::new(e) })
}

pub const ASSISTANT_STAGE: &str = "assistant";
pub const STUDENT_STAGE: &str = "student";
pub const ONE_STAGE_STUDENT: &str = "one_stage_student";

/// Teacher → assistant, then assistant → student. `resume` may point at a
/// training checkpoint of either stage; resuming the second stage reloads
/// the finished assistant from `dir`.
pub fn two_stage_pipeline(
    plan: &TrainPlan,
    teacher: &EncoderModel,
    data: &Dataset,
    dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TwoStageOutcome, TrainError> {
    let tcfg = *teacher.config();
    let acfg = plan.assistant_config()?;
    let scfg = plan.student_config()?;
    let map1 = plan.layer_map(&plan.teacher_assistant_map, &acfg, &tcfg)?;
    let map2 = plan.layer_map(&plan.assistant_student_map, &scfg, &acfg)?;
    let resume_stage = match resume {
        Some(p) => Some((Checkpoint::load(p)?.meta("stage").unwrap_or_default().to_string(), p.to_path_buf())),
        None => None,
    };
    let io_for = |stage: &str| StageIo {
        dir: dir.map(Path::to_path_buf),
        resume: resume_stage.as_ref().filter(|(s, _)| s == stage).map(|(_, p)| p.clone()),
    };

    let spec1 = StageSpec {
        name: ASSISTANT_STAGE,
        role: Role::Assistant,
        teacher,
        student: acfg,
        distill: distill_config(plan, map1),
        steps: plan.stage1_steps(),
    };
    let (assistant, report1) = if resume_stage.as_ref().is_some_and(|(s, _)| s == STUDENT_STAGE) {
        let path = dir
            .map(|d| d.join(format!("{ASSISTANT_STAGE}.ckpt")))
            .ok_or_else(|| TrainError::Resume("resuming the second stage needs the output directory".into()))?;
        let assistant = EncoderModel::load(&path)?;
        let log_path = path.with_file_name(format!("{ASSISTANT_STAGE}.metrics.tsv"));
        let log = read_log(&log_path)?;
        let report = StageReport::new(&spec1, &log, plan.log_window);
        (assistant, report)
    } else {
        let out = staged("stage 1 (teacher → assistant)", distill_stage(&spec1, plan, data, &io_for(ASSISTANT_STAGE)))?;
        let report = StageReport::new(&spec1, &out.log, plan.log_window);
        (out.student, report)
    };

    let spec2 = StageSpec {
        name: STUDENT_STAGE,
        role: Role::Student,
        teacher: &assistant,
        student: scfg,
        distill: distill_config(plan, map2),
        steps: plan.steps,
    };
    let out = staged("stage 2 (assistant → student)", distill_stage(&spec2, plan, data, &io_for(STUDENT_STAGE)))?;
    let report2 = StageReport::new(&spec2, &out.log, plan.log_window);
    let heldout = heldout_accuracy(&out.student, data, plan)?;
    let report = PipelineReport {
        pipeline: Mode::TwoStage,
        seed: plan.seed,
        final_stage_steps: plan.steps,
        total_steps: plan.stage1_steps() + plan.steps,
        stages: vec![report1, report2],
        student: scfg,
        heldout,
    };
    write_report(dir, "two_stage", &report)?;
    Ok(TwoStageOutcome { assistant, student: out.student, report })
}

/// Teacher → student directly, with the same final-stage budget as the
/// second stage of [`two_stage_pipeline`].
pub fn one_stage_pipeline(
    plan: &TrainPlan,
    teacher: &EncoderModel,
    data: &Dataset,
    dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<OneStageOutcome, TrainError> {
    let tcfg = *teacher.config();
    let scfg = plan.student_config()?;
    let map = plan.layer_map(&plan.teacher_student_map, &scfg, &tcfg)?;
    let spec = StageSpec {
        name: ONE_STAGE_STUDENT,
        role: Role::Student,
        teacher,
        student: scfg,
        distill: distill_config(plan, map),
        steps: plan.steps,
    };
    let io = StageIo { dir: dir.map(Path::to_path_buf), resume: resume.map(Path::to_path_buf) };
    let out = staged("one-stage (teacher → student)", distill_stage(&spec, plan, data, &io))?;
    let heldout = heldout_accuracy(&out.student, data, plan)?;
    let report = PipelineReport {
        pipeline: Mode::OneStage,
        seed: plan.seed,
        final_stage_steps: plan.steps,
        total_steps: plan.steps,
        stages: vec![StageReport::new(&spec, &out.log, plan.log_window)],
        student: scfg,
        heldout,
    };
    write_report(dir, "one_stage", &report)?;
    Ok(OneStageOutcome { student: out.student, report })
}

fn write_report(dir: Option<&Path>, stem: &str, report: &PipelineReport) -> Result<(), TrainError> {
    if let Some(d) = dir {
        let path = d.join(format!("{stem}.report.json"));
        let text = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| TrainError::io(&path, e))?;
    }
    Ok(())
}

/// Reads a distillation metrics file back into records.
fn read_log(path: &Path) -> Result<MetricsLog, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    let mut log = MetricsLog::memory(LogKind::Distill);
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        if f.len() != 5 {
            return Err(TrainError::io(path, format!("malformed line {line:?}")));
        }
        log.records.push(StepRecord { step: f[0] as u64, lr: f[1], layer: Some(f[2]), prediction: Some(f[3]), loss: f[4] });
    }
    Ok(log)
}
