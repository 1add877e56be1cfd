//! Confidence-vector membership inference with a class-balanced logistic
//! attack.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp_raw;
use crate::data::{DatasetSplit, SampleStore};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};

const ATTACK_ITERATIONS: usize = 1500;
const ATTACK_LR: f64 = 0.5;
const ATTACK_L2: f64 = 1e-4;

/// Percentage of samples the attack labels as members, per evaluated set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaRates {
    /// On the unlearn set; a false-positive rate for an ideal unlearner.
    pub unlearn: f64,
    /// On the half of the retain set not used to fit the attack.
    pub retain_holdout: f64,
    pub test: f64,
}

/// Softmax confidences of the mode=all logits, sorted in decreasing order.
pub fn confidence_features(model: &Model, store: &SampleStore, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let logits = model.logits(store, indices, Mode::All)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let lse = logsumexp_raw(row);
            let mut p: Vec<f64> = row.iter().map(|&z| (z - lse).exp()).collect();
            p.sort_by(|a, b| b.total_cmp(a));
            p
        })
        .collect())
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&Vec<f64>]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale = var
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits the attack on `members` vs `non_members` and returns, for each
/// evaluation set, the percentage predicted as members.
pub fn attack_rates(
    members: &[Vec<f64>],
    non_members: &[Vec<f64>],
    eval_sets: &[&[Vec<f64>]],
) -> Result<Vec<f64>> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::EmptySet(
            "membership attack training set (needs members and non-members)".into(),
        ));
    }
    let dim = members[0].len();
    let all: Vec<&Vec<f64>> = members.iter().chain(non_members).collect();
    let eval_rows = eval_sets.iter().flat_map(|s| s.iter());
    if let Some(bad) = all.iter().copied().chain(eval_rows).find(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch {
            op: "attack_rates",
            lhs: vec![dim],
            rhs: vec![bad.len()],
        });
    }
    let std = Standardizer::fit(&all);
    let n = all.len() as f64;
    let w_member = n / (2.0 * members.len() as f64);
    let w_non = n / (2.0 * non_members.len() as f64);
    let train: Vec<(Vec<f64>, f64, f64)> = members
        .iter()
        .map(|r| (std.apply(r), 1.0, w_member))
        .chain(non_members.iter().map(|r| (std.apply(r), 0.0, w_non)))
        .collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..ATTACK_ITERATIONS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y, weight) in &train {
            let z = b + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let r = weight * (sigmoid(z) - y) / n;
            gb += r;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= ATTACK_LR * (g + ATTACK_L2 * *wi);
        }
        b -= ATTACK_LR * gb;
    }

    Ok(eval_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                return 0.0;
            }
            let hits = set
                .iter()
                .filter(|r| {
                    let x = std.apply(r);
                    b + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() > 0.0
                })
                .count();
            100.0 * hits as f64 / set.len() as f64
        })
        .collect())
}

/// Member-prediction rates of an attack fitted on a seeded half of the
/// retain set (members) against the test set (non-members).
pub fn mia_member_rate(
    model: &Model,
    store: &SampleStore,
    split: &DatasetSplit,
    attack_seed: u64,
) -> Result<MiaRates> {
    let mut retain = split.retain.clone();
    retain.shuffle(&mut ChaCha8Rng::seed_from_u64(attack_seed));
    let (fit_half, holdout) = retain.split_at(retain.len() / 2);
    let members = confidence_features(model, store, fit_half)?;
    let non_members = confidence_features(model, store, &split.test)?;
    let unlearn = confidence_features(model, store, &split.unlearn)?;
    let held = confidence_features(model, store, holdout)?;
    let rates = attack_rates(&members, &non_members, &[&unlearn, &held, &non_members])?;
    Ok(MiaRates {
        unlearn: rates[0],
        retain_holdout: rates[1],
        test: rates[2],
    })
}
