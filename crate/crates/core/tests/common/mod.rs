#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinykd_core::autodiff::{Tape, Tensor, Var};
use tinykd_core::eval::TaskSplit;
use tinykd_core::synth::Language;
use tinykd_core::text::tokenize;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so that entries whose true gradient is
/// exactly zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Maximum relative error between backward and central finite differences
/// over every entry of every input.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, turning any tensor into a
/// scalar whose gradient exercises every output entry differently.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_tensor(&shape, seed));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Linear bag-of-tokens classifier fitted by exhaustive counting: a token
/// votes for a class when every training example containing it has that
/// class; all other tokens get weight zero.
pub fn bag_of_tokens_oracle(lang: &Language, split: &TaskSplit) -> f64 {
    let tokens = |text: &str| -> HashSet<usize> { tokenize(text, &lang.vocab).iter().map(|t| t.id).collect() };
    let mut seen: HashMap<usize, HashSet<usize>> = HashMap::new();
    for (label, text) in &split.train {
        for id in tokens(text) {
            seen.entry(id).or_default().insert(*label);
        }
    }
    let weight = |id: usize, class: usize| match seen.get(&id) {
        Some(labels) if labels.len() == 1 && labels.contains(&class) => 1.0,
        _ => 0.0,
    };
    let predict = |text: &str| {
        let toks = tokens(text);
        let score = |c: usize| toks.iter().map(|&id| weight(id, c)).sum::<f64>();
        (0..split.classes).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).unwrap()
    };
    let correct = split.dev.iter().filter(|(l, t)| predict(t) == *l).count();
    correct as f64 / split.dev.len() as f64
}
