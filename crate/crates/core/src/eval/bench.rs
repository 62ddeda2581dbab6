//! Frozen-encoder inference timing next to analytic FLOPs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tape;
use crate::model::{count_parameters, estimate_flops, EncoderModel, ModelConfig};
use crate::parallel;
use crate::text::RESERVED;

pub const BENCH_PROTOCOL: &str =
    "encoder forward only (no MLM head), random non-reserved ids, full-length rows; \
     warmup runs discarded, then the median wall-clock of the timed trials; \
     speedup = teacher median / row median; FLOPs ratio = teacher FLOPs / row FLOPs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threading {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub seq_len: usize,
    pub batch: usize,
    pub warmup: usize,
    pub trials: usize,
    pub threading: Threading,
    /// Configs whose estimated forward footprint exceeds this are skipped.
    pub max_bytes: u64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { seq_len: 512, batch: 8, warmup: 5, trials: 30, threading: Threading::Single, max_bytes: 4 << 30, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub config: ModelConfig,
    /// Forward FLOPs for one sequence.
    pub flops: u64,
    pub flops_ratio: f64,
    pub estimated_bytes: u64,
    /// Seconds per batch for every timed trial, in run order.
    pub trials: Vec<f64>,
    pub median_secs: Option<f64>,
    pub speedup: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: String,
    pub options: BenchOptions,
    pub threads: usize,
    pub environment: String,
    /// The first row is the reference (teacher) config.
    pub rows: Vec<BenchRow>,
}

/// Rough peak bytes of a taped inference forward: parameters held twice
/// plus the per-layer activations kept on the tape.
pub fn estimate_forward_bytes(config: &ModelConfig, seq_len: usize, batch: usize) -> u64 {
    let (s, h, f, a) = (seq_len as u64, config.hidden as u64, config.ffn as u64, config.heads as u64);
    let params = count_parameters(config).total;
    let per_layer = 12 * s * h + 3 * s * f + 3 * a * s * s;
    8 * (2 * params + batch as u64 * (config.layers as u64 * per_layer + 4 * s * h))
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

fn time_config(config: &ModelConfig, opts: &BenchOptions) -> Result<Vec<f64>, EvalError> {
    let model = EncoderModel::init(*config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<usize> =
        (0..opts.batch * opts.seq_len).map(|_| rng.random_range(RESERVED.len()..config.vocab_size)).collect();
    let lengths = vec![opts.seq_len; opts.batch];
    let run = || -> Result<f64, EvalError> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let enc = model.encode(&mut tape, &bound, &ids, &lengths, opts.seq_len)?;
        std::hint::black_box(tape.value(enc.last()).data()[0]);
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..opts.warmup {
        run()?;
    }
    (0..opts.trials).map(|_| run()).collect()
}

/// Times every config; the first entry is the reference for ratios.
pub fn benchmark_inference(configs: &[(String, ModelConfig)], opts: &BenchOptions) -> Result<BenchReport, EvalError> {
    if configs.is_empty() {
        return Err(EvalError::Data("no configs to benchmark".into()));
    }
    if opts.trials == 0 || opts.batch == 0 || opts.seq_len == 0 {
        return Err(EvalError::Data("trials, batch and seq_len must be positive".into()));
    }
    let teacher_flops = estimate_flops(&configs[0].1, opts.seq_len);
    let mut rows = Vec::with_capacity(configs.len());
    for (name, config) in configs {
        let bytes = estimate_forward_bytes(config, opts.seq_len, opts.batch);
        let skipped = if opts.seq_len > config.max_positions {
            Some(format!("seq_len {} exceeds max_positions {}", opts.seq_len, config.max_positions))
        } else if bytes > opts.max_bytes {
            Some(format!("estimated {:.1} GiB exceeds the {:.1} GiB budget", gib(bytes), gib(opts.max_bytes)))
        } else {
            None
        };
        let trials = match (&skipped, opts.threading) {
            (Some(_), _) => Vec::new(),
            (None, Threading::Single) => parallel::sequential(|| time_config(config, opts))?,
            (None, Threading::Multi) => time_config(config, opts)?,
        };
        let flops = estimate_flops(config, opts.seq_len);
        rows.push(BenchRow {
            name: name.clone(),
            config: *config,
            flops,
            flops_ratio: teacher_flops as f64 / flops as f64,
            estimated_bytes: bytes,
            median_secs: median(&trials),
            trials,
            speedup: None,
            skipped,
        });
    }
    let reference = rows[0].median_secs;
    for row in &mut rows {
        row.speedup = reference.zip(row.median_secs).map(|(t, r)| t / r);
    }
    let threads = match opts.threading {
        Threading::Single => 1,
        Threading::Multi => parallel::threads(),
    };
    Ok(BenchReport {
        protocol: BENCH_PROTOCOL.to_string(),
        options: *opts,
        threads,
        environment: format!(
            "{}-{}, {} logical CPUs, parallel feature {}",
            std::env::consts::OS,
            std::env::consts::ARCH,
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            if cfg!(feature = "parallel") { "on" } else { "off" }
        ),
        rows,
    })
}

fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

impl BenchReport {
    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>14} {:>10} {:>12} {:>9}\n",
            "config", "GFLOPs/seq", "FLOPs x", "median ms", "speedup"
        );
        for r in &self.rows {
            let ms = r.median_secs.map_or("-".to_string(), |s| format!("{:.2}", s * 1e3));
            let sp = r.speedup.map_or("-".to_string(), |s| format!("{s:.2}"));
            out += &format!("{:<16} {:>14.3} {:>10.2} {:>12} {:>9}", r.name, r.flops as f64 / 1e9, r.flops_ratio, ms, sp);
            if let Some(note) = &r.skipped {
                out += &format!("  skipped: {note}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
