//! Per-step metrics and their tab-separated log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Mlm,
    Distill,
}

impl LogKind {
    pub fn header(self) -> &'static str {
        match self {
            Self::Mlm => "step\tlr\tloss",
            Self::Distill => "step\tlr\tL_layer\tL_pred\tL_distill",
        }
    }
}

/// One optimisation step. `loss` is the optimised objective (MLM
/// cross-entropy or L_distill); the components are set for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub layer: Option<f64>,
    pub prediction: Option<f64>,
}

impl StepRecord {
    /// Tab-separated line; floats use the shortest exact representation.
    pub fn line(&self, kind: LogKind) -> String {
        match kind {
            LogKind::Mlm => format!("{}\t{}\t{}", self.step, self.lr, self.loss),
            LogKind::Distill => format!(
                "{}\t{}\t{}\t{}\t{}",
                self.step,
                self.lr,
                self.layer.unwrap_or(f64::NAN),
                self.prediction.unwrap_or(f64::NAN),
                self.loss
            ),
        }
    }
}

/// In-memory record list mirrored to an optional file.
#[derive(Debug)]
pub struct MetricsLog {
    pub kind: LogKind,
    pub records: Vec<StepRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn memory(kind: LogKind) -> Self {
        Self { kind, records: Vec::new(), sink: None }
    }

    /// Opens `path` for writing. When resuming at `start_step`, lines for
    /// earlier steps already in the file are kept and later ones dropped.
    pub fn file(kind: LogKind, path: &Path, start_step: u64) -> Result<Self, TrainError> {
        let mut kept = Vec::new();
        if start_step > 0 && path.exists() {
            let f = File::open(path).map_err(|e| TrainError::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| TrainError::io(path, e))?;
                let step: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start_step) {
                    kept.push(line);
                }
            }
        }
        let f = File::create(path).map_err(|e| TrainError::io(path, e))?;
        let mut sink = BufWriter::new(f);
        let mut write = |s: &str| writeln!(sink, "{s}").map_err(|e| TrainError::io(path, e));
        write(kind.header())?;
        for line in &kept {
            write(line)?;
        }
        Ok(Self { kind, records: Vec::new(), sink: Some((path.to_path_buf(), sink)) })
    }

    pub fn push(&mut self, record: StepRecord) -> Result<(), TrainError> {
        if let Some((path, sink)) = &mut self.sink {
            writeln!(sink, "{}", record.line(self.kind))
                .and_then(|_| sink.flush())
                .map_err(|e| TrainError::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Means of the first and last `window` values (the whole series when shorter).
pub fn window_means(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}
