//! Run-plan files: flat `key = value` TOML mapping onto [`TrainPlan`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Schedule};
use super::TrainError;
use crate::distill::{LayerMap, PredictionPositions, DEFAULT_TEMPERATURE};
use crate::model::ModelConfig;
use crate::text::{MaskStrategy, DEFAULT_MASK_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TeacherMlm,
    OneStage,
    TwoStage,
}

/// Everything a training run needs. Relative paths are resolved against the
/// directory of the plan file.
///
/// `steps` is the length of one-stage distillation and of the second
/// (assistant → student) stage of two-stage distillation, so the two
/// pipelines spend the same budget on their final stage. The first stage runs
/// for `assistant_steps` and teacher MLM training for `teacher_steps`, both
/// defaulting to `steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: Mode,
    /// Preset name or model-config file.
    pub teacher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<String>,
    /// Trained teacher for the distillation modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    pub corpus: PathBuf,
    pub lexicon: PathBuf,
    pub vocab: PathBuf,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_steps: Option<u64>,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::temperature")]
    pub temperature: f64,
    #[serde(default = "d::mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "d::mask_strategy")]
    pub mask_strategy: MaskStrategy,
    #[serde(default = "d::peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d::warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "d::one")]
    pub hidden_weight: f64,
    #[serde(default = "d::one")]
    pub prediction_weight: f64,
    #[serde(default)]
    pub prediction_positions: PredictionPositions,
    /// `"student:teacher,..."`; uniform stride when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_assistant_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_student_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_student_map: Option<String>,
    #[serde(default = "d::heldout_fraction")]
    pub heldout_fraction: f64,
    /// Save a resumable checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Steps per window when summarising loss curves.
    #[serde(default = "d::log_window")]
    pub log_window: usize,
}

mod d {
    use super::*;
    pub fn batch_size() -> usize {
        16
    }
    pub fn max_len() -> usize {
        32
    }
    pub fn temperature() -> f64 {
        DEFAULT_TEMPERATURE
    }
    pub fn mask_rate() -> f64 {
        DEFAULT_MASK_RATE
    }
    pub fn mask_strategy() -> MaskStrategy {
        MaskStrategy::WholeWord
    }
    pub fn peak_lr() -> f64 {
        4e-4
    }
    pub fn warmup_fraction() -> f64 {
        0.1
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn heldout_fraction() -> f64 {
        0.1
    }
    pub fn log_window() -> usize {
        50
    }
}

fn plan_err(msg: impl Into<String>) -> TrainError {
    TrainError::Plan(msg.into())
}

impl TrainPlan {
    /// Plan with defaults for everything but the required fields.
    pub fn new(mode: Mode, teacher: &str, corpus: PathBuf, lexicon: PathBuf, vocab: PathBuf, steps: u64) -> Self {
        let text = toml::to_string(&Minimal { mode, teacher, corpus: &corpus, lexicon: &lexicon, vocab: &vocab, steps })
            .expect("plain fields serialize");
        toml::from_str(&text).expect("defaults fill the rest")
    }

    /// Parses plan text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, TrainError> {
        let mut plan: Self = toml::from_str(text).map_err(|e| plan_err(e.message().to_string()))?;
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut plan.corpus);
        join(&mut plan.lexicon);
        join(&mut plan.vocab);
        if let Some(p) = &mut plan.teacher_checkpoint {
            join(p);
        }
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan fields serialize")
    }

    /// Applies a `key=value` override using the plan-file syntax for the value
    /// (strings may be given bare).
    pub fn set(&mut self, assignment: &str) -> Result<(), TrainError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| plan_err(format!("override {assignment:?} is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| plan_err(format!("override {key}: {}", e.message())))?;
        Ok(())
    }

    pub fn teacher_config(&self) -> Result<ModelConfig, TrainError> {
        Ok(ModelConfig::resolve(&self.teacher)?)
    }

    fn named_config(&self, field: &str, value: &Option<String>) -> Result<ModelConfig, TrainError> {
        let spec = value
            .as_deref()
            .ok_or_else(|| plan_err(format!("mode {:?} requires `{field}`", self.mode)))?;
        Ok(ModelConfig::resolve(spec)?)
    }

    pub fn assistant_config(&self) -> Result<ModelConfig, TrainError> {
        self.named_config("assistant", &self.assistant)
    }

    pub fn student_config(&self) -> Result<ModelConfig, TrainError> {
        self.named_config("student", &self.student)
    }

    pub fn mlm_steps(&self) -> u64 {
        self.teacher_steps.unwrap_or(self.steps)
    }

    pub fn stage1_steps(&self) -> u64 {
        self.assistant_steps.unwrap_or(self.steps)
    }

    pub fn schedule(&self, total_steps: u64) -> Schedule {
        Schedule { peak: self.peak_lr, warmup_fraction: self.warmup_fraction, total_steps }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { weight_decay: self.weight_decay, ..AdamW::default() }
    }

    /// Explicit map from the plan or the uniform stride.
    pub fn layer_map(&self, explicit: &Option<String>, student: &ModelConfig, teacher: &ModelConfig) -> Result<LayerMap, TrainError> {
        Ok(match explicit {
            Some(text) => LayerMap::parse(text, student.layers, teacher.layers)?,
            None => crate::distill::uniform_layer_map(student.layers, teacher.layers)?,
        })
    }

    /// Checks ranges, mode requirements, referenced files and layer maps.
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [("batch_size", self.batch_size as f64), ("temperature", self.temperature), ("log_window", self.log_window as f64)];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(plan_err(format!("{k} must be positive, got {v}")));
            }
        }
        if self.max_len < 3 {
            return Err(plan_err(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(plan_err(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate)));
        }
        let unit = [
            ("warmup_fraction", self.warmup_fraction),
            ("heldout_fraction", self.heldout_fraction),
        ];
        for (k, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(plan_err(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        let non_negative = [
            ("peak_lr", self.peak_lr),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("hidden_weight", self.hidden_weight),
            ("prediction_weight", self.prediction_weight),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(plan_err(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        let mut files = vec![("corpus", &self.corpus), ("lexicon", &self.lexicon), ("vocab", &self.vocab)];
        if let Some(p) = &self.teacher_checkpoint {
            files.push(("teacher_checkpoint", p));
        }
        for (k, p) in files {
            if !p.is_file() {
                return Err(plan_err(format!("{k} file {} does not exist", p.display())));
            }
        }
        let teacher = self.teacher_config()?;
        for c in [Some(teacher), self.assistant.as_ref().map(|_| self.assistant_config()).transpose()?, self.student.as_ref().map(|_| self.student_config()).transpose()?]
            .into_iter()
            .flatten()
        {
            if c.max_positions < self.max_len {
                return Err(plan_err(format!("max_len {} exceeds max_positions {}", self.max_len, c.max_positions)));
            }
        }
        match self.mode {
            Mode::TeacherMlm => {}
            Mode::OneStage => {
                let s = self.student_config()?;
                self.layer_map(&self.teacher_student_map, &s, &teacher)?;
            }
            Mode::TwoStage => {
                let a = self.assistant_config()?;
                let s = self.student_config()?;
                self.layer_map(&self.teacher_assistant_map, &a, &teacher)?;
                self.layer_map(&self.assistant_student_map, &s, &a)?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Minimal<'a> {
    mode: Mode,
    teacher: &'a str,
    corpus: &'a Path,
    lexicon: &'a Path,
    vocab: &'a Path,
    steps: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
mode = "two_stage"
teacher = "desk-teacher"
assistant = "desk-assistant"
student = "desk-student"
corpus = "corpus.txt"
lexicon = "lexicon.txt"
vocab = "vocab.txt"
steps = 300
"#;

    #[test]
    fn defaults_and_relative_paths() {
        let p = TrainPlan::parse(TEXT, Path::new("/data")).unwrap();
        assert_eq!(p.corpus, Path::new("/data/corpus.txt"));
        assert_eq!((p.batch_size, p.temperature, p.peak_lr, p.seed), (16, 8.0, 4e-4, 0));
        assert_eq!(p.stage1_steps(), 300);
        assert_eq!(p.prediction_positions, PredictionPositions::Masked);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainPlan::parse(&format!("{TEXT}\nbatchsize = 4\n"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut p = TrainPlan::parse(TEXT, Path::new("/data")).unwrap();
        p.set("seed=7").unwrap();
        p.set("student = desk-assistant").unwrap();
        p.set("prediction_positions=all").unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.student.as_deref(), Some("desk-assistant"));
        assert_eq!(p.prediction_positions, PredictionPositions::All);
        assert!(p.set("no_such_key=1").is_err());
        assert!(p.set("seed").is_err());
        assert_eq!(TrainPlan::parse(&p.to_toml(), Path::new("/elsewhere")).unwrap(), p);
    }

    #[test]
    fn validation_catches_missing_pieces() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["corpus.txt", "lexicon.txt", "vocab.txt"] {
            std::fs::write(dir.path().join(f), "x\n").unwrap();
        }
        let p = TrainPlan::parse(TEXT, dir.path()).unwrap();
        p.validate().unwrap();
        let mut q = p.clone();
        q.assistant = None;
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.teacher_assistant_map = Some("1:1,2:9".into());
        assert!(q.validate().is_err());
        let mut q = p.clone();
        q.mask_rate = 1.0;
        assert!(q.validate().is_err());
        let mut q = p;
        q.corpus = dir.path().join("missing.txt");
        assert!(q.validate().is_err());
    }
}
