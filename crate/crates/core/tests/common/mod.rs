#![allow(dead_code)]

use ccu::autodiff::{Activation, Tape, Tensor, Var};
use ccu::data::{generate, split, DataConfig, DatasetSplit, SampleStore};
use ccu::eval::{mia_member_rate, AccuracyTable, EvalSet};
use ccu::model::{train_original, Mode, Model, ModelDims, TrainConfig};
use ccu::unlearn::{ccu_unlearn, neggrad_plus, retrain, Method, StopReason, UnlearnRunConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---- brute-force oracles: plain loops over the formulas, no library code ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

/// `None` when every anchor is skipped.
pub fn svu_oracle(
    anchor_v: &[Vec<f64>],
    anchor_a: &[Vec<f64>],
    anchor_labels: &[usize],
    retain_v: &[Vec<f64>],
    retain_a: &[Vec<f64>],
    retain_labels: &[usize],
    tau: f64,
) -> Option<f64> {
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..anchor_v.len() {
        let pos: Vec<usize> = (0..retain_labels.len()).filter(|&j| retain_labels[j] == anchor_labels[i]).collect();
        let neg: Vec<usize> = (0..retain_labels.len()).filter(|&j| retain_labels[j] != anchor_labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let m = &anchor_v[i];
        let den: f64 = pos.iter().map(|&p| (dot(m, &retain_v[p]) / tau).exp()).sum();
        let mut visual = 0.0;
        for &a in &neg {
            visual += ((dot(m, &retain_v[a]) / tau).exp() / den).ln();
        }
        total += -visual / neg.len() as f64;

        let n = &anchor_a[i];
        let den: f64 = neg.iter().map(|&a| (dot(n, &retain_a[a]) / tau).exp()).sum();
        let mut audio = 0.0;
        for &p in &pos {
            audio += ((dot(n, &retain_a[p]) / tau).exp() / den).ln();
        }
        total += -audio / pos.len() as f64;
        counted += 1;
    }
    (counted > 0).then_some(total)
}

pub fn ckr_oracle(visual: &[Vec<f64>], audio: &[Vec<f64>], tau: f64) -> f64 {
    let b = visual.len();
    let s = |i: usize, j: usize| dot(&audio[i], &visual[j]) / tau;
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
        total += -(s(i, i).exp() / row).ln();
    }
    for j in 0..b {
        let col: f64 = (0..b).map(|i| s(i, j).exp()).sum();
        total += -(s(j, j).exp() / col).ln();
    }
    total
}

pub fn dcs_oracle(e: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..e.len() {
        let mut num = 0.0;
        let mut den = 0.0;
        let (mut np, mut nn) = (0, 0);
        for j in 0..e.len() {
            let w = (dot(&e[i], &e[j]) / tau).exp();
            if j != i && labels[j] == labels[i] {
                num += w;
                np += 1;
            }
            if labels[j] != labels[i] {
                den += w;
                nn += 1;
            }
        }
        if np == 0 || nn == 0 {
            continue;
        }
        total += (num / den).ln();
        counted += 1;
    }
    (counted > 0).then(|| -total / counted as f64)
}

// ---- random inputs ----

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&refs).unwrap()
}

// ---- finite differences ----

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Largest norm-wise relative error between the tape gradient of `f` and a
/// central difference, over all inputs.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&tape, vars[k]);
        let mut numeric = vec![0.0; input.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[e] += h;
            let up = eval(&xs);
            xs[k].data_mut()[e] -= 2.0 * h;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * h);
        }
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(analytic.data()).max(norm(&numeric)).max(1e-6);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

// ---- the synthetic directional experiment ----

pub const FORGET_RATIO: f64 = 0.05;

pub fn experiment_data() -> DataConfig {
    DataConfig {
        classes: 4,
        visual_dim: 20,
        audio_dim: 20,
        samples_per_class: 200,
        noise: 0.3,
        coupling: 0.7,
        ..DataConfig::default()
    }
}

pub fn experiment_dims() -> ModelDims {
    ModelDims {
        visual_dim: 20,
        audio_dim: 20,
        hidden_dim: 32,
        embed_dim: 16,
        classes: 4,
    }
}

pub struct Replicate {
    pub store: SampleStore,
    pub split: DatasetSplit,
    pub original: Model,
    pub before: AccuracyTable,
    pub retrain: AccuracyTable,
    pub retrain_seconds: f64,
    pub ccu: AccuracyTable,
    pub ccu_stop: StopReason,
    pub ccu_seconds: f64,
    pub neggrad: AccuracyTable,
    pub mia_original_unlearn: f64,
    pub mia_original_test: f64,
    pub mia_ccu_unlearn: f64,
}

/// One independent replicate: dataset, original model, forget set and all
/// runs derive from `seed`.
pub fn replicate(seed: u64) -> Replicate {
    let data_seed = 1000 + seed;
    let store = generate(&experiment_data(), data_seed).unwrap();
    let split = split(store.len(), 0.8, FORGET_RATIO, seed).unwrap();
    let dims = experiment_dims();
    let train = TrainConfig::default();
    let init = Model::init(dims, Activation::Silu, data_seed).unwrap();
    let (original, _) = train_original(init, &store, &split.train, &train, data_seed).unwrap();
    let (_, rt) = retrain(&store, &split, dims, Activation::Silu, &train, seed).unwrap();
    let (ccu_model, ct) = ccu_unlearn(&original, &store, &split, &UnlearnRunConfig::new(Method::Ccu, seed)).unwrap();
    let (_, nt) = neggrad_plus(&original, &store, &split, &UnlearnRunConfig::new(Method::NeggradPlus, seed)).unwrap();
    let mia_original = mia_member_rate(&original, &store, &split, seed).unwrap();
    let mia_ccu = mia_member_rate(&ccu_model, &store, &split, seed).unwrap();
    Replicate {
        before: ct.snapshots[0],
        retrain: *rt.final_snapshot(),
        retrain_seconds: rt.seconds,
        ccu: *ct.final_snapshot(),
        ccu_stop: ct.stop,
        ccu_seconds: ct.seconds,
        neggrad: *nt.final_snapshot(),
        mia_original_unlearn: mia_original.unlearn,
        mia_original_test: mia_original.test,
        mia_ccu_unlearn: mia_ccu.unlearn,
        store,
        split,
        original,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn test_acc(t: &AccuracyTable, mode: Mode) -> f64 {
    t.get(EvalSet::Test, mode)
}
