//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashSet;

use ear::mask::SequencePlan;
use ear::model::{
    argmax, embed_sequence, forward_masked, gradient, training_loss, MaskMode, Matrix, ModelConfig,
    ModelParameters, Precision, Real, TrainingInstance,
};
use ear::schedule::{ScheduleKind, StepSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Turtle walk on the unbounded plane: from the center, turn clockwise
/// whenever the cell on the right is unvisited, otherwise go straight.
/// Cells inside the grid are collected in visiting order.
pub fn turtle_spiral(n: usize) -> Vec<(usize, usize)> {
    // directions clockwise: up, right, down, left as (drow, dcol)
    const DIRS: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let c = (n / 2) as i64;
    let (mut r, mut col) = (c, c);
    let mut dir = 0usize;
    let mut seen = HashSet::from([(r, col)]);
    let mut out = Vec::with_capacity(n * n);
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < n as i64 && c < n as i64;
    if inside(r, col) {
        out.push((r as usize, col as usize));
    }
    while out.len() < n * n {
        let right = (dir + 1) % 4;
        let (dr, dc) = DIRS[right];
        if !seen.contains(&(r + dr, col + dc)) {
            dir = right;
        }
        r += DIRS[dir].0;
        col += DIRS[dir].1;
        seen.insert((r, col));
        if inside(r, col) {
            out.push((r as usize, col as usize));
        }
    }
    out
}

pub fn random_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        model_dim: 32,
        mlp_hidden_dim: 64,
        vocab_size: 16,
        num_classes: 3,
        rope_base: 10_000.0,
        precision,
    }
}

pub fn micro_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        mlp_hidden_dim: 32,
        vocab_size: 8,
        num_classes: 3,
        rope_base: 10_000.0,
        precision,
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng, t: usize, v: u32, classes: usize) -> TrainingInstance {
    TrainingInstance {
        tokens: (0..t).map(|_| rng.random_range(0..v)).collect(),
        class_id: rng.random_range(0..classes),
    }
}

/// Full-sequence forward; returns the MT logits by rank (`T × V`).
pub fn full_mt_logits<F: Real>(
    params: &ModelParameters<F>,
    plan: &SequencePlan,
    tokens: &[u32],
    class_id: usize,
    mode: MaskMode,
) -> Matrix<F> {
    let emb = embed_sequence(params, &plan.layout, tokens, class_id, mode).unwrap();
    let logits = forward_masked(params, &emb, &plan.mask, &plan.positions).unwrap();
    let t = plan.layout.tokens();
    let mut out = Matrix::zeros(t, params.config.vocab_size);
    for r in 0..t {
        out.row_mut(r)
            .copy_from_slice(logits.row(plan.layout.mt_slot(r)));
    }
    out
}

/// Greedy decoding by re-running the full training forward once per step,
/// with not-yet-generated ranks filled by token 0.
pub fn greedy_full_forward<F: Real>(
    params: &ModelParameters<F>,
    schedule: &StepSchedule,
    class_id: usize,
    mode: MaskMode,
) -> Vec<u32> {
    let plan = SequencePlan::new(schedule);
    let mut tokens = vec![0u32; schedule.total()];
    for step in 1..=schedule.num_steps() {
        let logits = full_mt_logits(params, &plan, &tokens, class_id, mode);
        for r in schedule.step_range(step) {
            tokens[r] = argmax(logits.row(r)) as u32;
        }
    }
    tokens
}

/// Largest per-row relative difference: `max |a − b| / max(max |b|, tiny)`
/// taken row by row.
pub fn max_row_relative_diff<F: Real>(a: &Matrix<F>, b: &Matrix<F>) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    let mut worst = 0.0f64;
    for r in 0..a.rows {
        let scale = b
            .row(r)
            .iter()
            .map(|v| v.to_f64().unwrap().abs())
            .fold(1e-300, f64::max);
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            let d = (x.to_f64().unwrap() - y.to_f64().unwrap()).abs() / scale;
            worst = worst.max(d);
        }
    }
    worst
}

pub fn schedule(kind: &str, t: usize) -> StepSchedule {
    StepSchedule::new(&kind.parse::<ScheduleKind>().unwrap(), t).unwrap()
}

fn flat_get(p: &ModelParameters<f64>, tensor: usize, idx: usize) -> f64 {
    p.named_tensors()[tensor].1.data[idx]
}

fn flat_set(p: &mut ModelParameters<f64>, tensor: usize, idx: usize, v: f64) {
    p.tensors_mut()[tensor].data[idx] = v;
}

fn batch_loss(
    p: &ModelParameters<f64>,
    plan: &SequencePlan,
    batch: &[TrainingInstance],
    mode: MaskMode,
) -> f64 {
    batch
        .iter()
        .map(|i| training_loss(p, plan, i, mode).unwrap())
        .sum::<f64>()
        / batch.len() as f64
}

/// Worst relative error between the analytic gradient and central finite
/// differences at h = 1e-5 over 200 sampled coordinates (fp64 micro model,
/// odd schedule over 9 tokens).
pub fn finite_difference_check(mode: MaskMode, seed: u64) -> f64 {
    let cfg = micro_config(Precision::Fp64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::<f64>::init(&cfg, &mut rng);
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let plan = SequencePlan::new(&schedule("odd", 9));
    let batch: Vec<_> = (0..3).map(|_| random_instance(&mut rng, 9, 8, 3)).collect();
    let (_, grad) = gradient(&params, &plan, &batch, mode).unwrap();
    let sizes: Vec<usize> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.len())
        .collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let orig = flat_get(&params, tensor, flat);
        flat_set(&mut params, tensor, flat, orig + h);
        let up = batch_loss(&params, &plan, &batch, mode);
        flat_set(&mut params, tensor, flat, orig - h);
        let down = batch_loss(&params, &plan, &batch, mode);
        flat_set(&mut params, tensor, flat, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = flat_get(&grad, tensor, flat);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
