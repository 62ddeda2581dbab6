//! Two-stage versus one-stage comparison over matched runs.

use serde::{Deserialize, Serialize};

use super::finetune::mean_spread;
use super::EvalError;
use crate::trainer::{Mode, PipelineReport};

/// One pipeline run and, optionally, its student's toy-task dev accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub toy_accuracy: Option<f64>,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub spread: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pipeline: Mode,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    /// Two-stage first, then one-stage.
    pub rows: Vec<ComparisonRow>,
    /// Two-stage mean minus one-stage mean per column.
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub final_stage_steps: u64,
}

type Metric = (&'static str, fn(&PipelineRun) -> Option<f64>);

const METRICS: [Metric; 5] = [
    ("final L_layer", |r| r.report.stages.last()?.final_layer),
    ("final L_pred", |r| r.report.stages.last()?.final_prediction),
    ("final L_distill", |r| r.report.stages.last()?.final_distill),
    ("held-out MLM acc", |r| Some(r.report.heldout.accuracy)),
    ("toy dev acc", |r| r.toy_accuracy),
];

fn seeds(runs: &[PipelineRun]) -> Vec<u64> {
    let mut s: Vec<u64> = runs.iter().map(|r| r.report.seed).collect();
    s.sort_unstable();
    s
}

/// Side-by-side table of matched runs. Refuses runs whose final-stage
/// budgets, seeds or student configs differ. No winner is declared.
pub fn compare_pipelines(two_stage: &[PipelineRun], one_stage: &[PipelineRun]) -> Result<Comparison, EvalError> {
    let mismatch = |m: String| Err(EvalError::Mismatch(m));
    if two_stage.is_empty() || one_stage.is_empty() {
        return mismatch("both pipelines need at least one run".into());
    }
    if let Some(r) = two_stage.iter().find(|r| r.report.pipeline != Mode::TwoStage) {
        return mismatch(format!("expected two-stage runs, got {:?}", r.report.pipeline));
    }
    if let Some(r) = one_stage.iter().find(|r| r.report.pipeline != Mode::OneStage) {
        return mismatch(format!("expected one-stage runs, got {:?}", r.report.pipeline));
    }
    let all: Vec<&PipelineRun> = two_stage.iter().chain(one_stage).collect();
    let budget = all[0].report.final_stage_steps;
    if let Some(r) = all.iter().find(|r| r.report.final_stage_steps != budget) {
        return mismatch(format!("final-stage budgets differ: {budget} vs {} steps", r.report.final_stage_steps));
    }
    let student = all[0].report.student;
    if all.iter().any(|r| r.report.student != student) {
        return mismatch("student configs differ".into());
    }
    let (s2, s1) = (seeds(two_stage), seeds(one_stage));
    if s2 != s1 {
        return mismatch(format!("seeds differ: {s2:?} vs {s1:?}"));
    }
    let with_toy = all.iter().filter(|r| r.toy_accuracy.is_some()).count();
    if with_toy != 0 && with_toy != all.len() {
        return mismatch("toy accuracy present for only some runs".into());
    }
    let metrics: Vec<&Metric> = METRICS.iter().filter(|(name, _)| with_toy > 0 || *name != "toy dev acc").collect();
    let row = |pipeline: Mode, runs: &[PipelineRun]| ComparisonRow {
        pipeline,
        cells: metrics
            .iter()
            .map(|(_, get)| {
                let values: Vec<f64> = runs.iter().map(|r| get(r).unwrap_or(f64::NAN)).collect();
                let (mean, spread) = mean_spread(&values);
                Cell { mean, spread, n: values.len() }
            })
            .collect(),
    };
    let rows = vec![row(Mode::TwoStage, two_stage), row(Mode::OneStage, one_stage)];
    let deltas = rows[0].cells.iter().zip(&rows[1].cells).map(|(a, b)| a.mean - b.mean).collect();
    Ok(Comparison {
        columns: metrics.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
        deltas,
        seeds: s2,
        final_stage_steps: budget,
    })
}

impl Comparison {
    /// Markdown table: one row per pipeline, `mean ± spread` cells.
    pub fn table(&self) -> String {
        let mut out = format!("| pipeline | {} |\n|---|{}\n", self.columns.join(" | "), "---|".repeat(self.columns.len()));
        for r in &self.rows {
            let name = match r.pipeline {
                Mode::TwoStage => "two-stage",
                Mode::OneStage => "one-stage",
                Mode::TeacherMlm => "teacher",
            };
            let cells: Vec<String> = r.cells.iter().map(|c| format!("{:.4} ± {:.4}", c.mean, c.spread)).collect();
            out += &format!("| {name} | {} |\n", cells.join(" | "));
        }
        let deltas: Vec<String> = self.deltas.iter().map(|d| format!("{d:+.4}")).collect();
        out += &format!("| delta | {} |\n", deltas.join(" | "));
        out
    }
}
