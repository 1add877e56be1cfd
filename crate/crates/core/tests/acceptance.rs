//! Runs the seven acceptance criteria and prints one line per criterion.
//! Exits nonzero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ccu::autodiff::{Activation, Tape, Tensor};
use ccu::cli::{cmd_pipeline, ExperimentConfig};
use ccu::data::{contrast_sets, generate, split, ContrastBatch, DataConfig};
use ccu::eval::{cmsg, upg};
use ccu::losses::{
    ckr_loss, cross_entropy, dcs_loss, svu_loss, ContrastEmbeddings, Denominator, LossConfig,
};
use ccu::model::{Mode, Model, ModelDims};
use ccu::unlearn::{ccu_objective, StopReason, SvuReferences};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    check(spent < budget, format!("took {spent:.1?}, budget {budget:?}"))
}

fn metric_formulas() -> Outcome {
    let cases = [
        ("upg", upg(0.7251, 0.7074), 2.5),
        ("upg", upg(0.5976, 0.5816), 2.8),
        ("cmsg", cmsg(0.3087, 0.1579), 95.5),
        ("cmsg", cmsg(0.2944, 0.1361), 116.3),
    ];
    let mut got = Vec::new();
    for (name, value, want) in cases {
        let value = value.map_err(|e| e.to_string())?;
        check((value - want).abs() <= 0.1, format!("{name} = {value:.3}, expected {want}"))?;
        got.push(format!("{value:+.1}"));
    }
    Ok(got.join(" "))
}

fn embeddings(tape: &mut Tape, rows: [&[Vec<f64>]; 4]) -> ContrastEmbeddings {
    ContrastEmbeddings {
        anchor_visual: tape.constant(tensor(rows[0])),
        anchor_audio: tape.constant(tensor(rows[1])),
        retain_visual: tape.constant(tensor(rows[2])),
        retain_audio: tape.constant(tensor(rows[3])),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let tol = 1e-9;
    let mut batches = [0usize; 4];
    let mut seed = 0;
    while batches.iter().any(|&n| n < 50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let b = rng.random_range(2..=4);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..1.0);

        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let y = labels(&mut rng, b, 3);
        let mut tape = Tape::new();
        let l = tape.constant(tensor(&logits));
        let ce = cross_entropy(&mut tape, l, &y).map_err(|e| e.to_string())?;
        check((tape.value(ce).item() - ce_oracle(&logits, &y)).abs() < tol, format!("cross-entropy, seed {seed}"))?;
        batches[0] += 1;

        let (av, aa, rv, ra) = (
            unit_rows(&mut rng, b, d),
            unit_rows(&mut rng, b, d),
            unit_rows(&mut rng, b, d),
            unit_rows(&mut rng, b, d),
        );
        let (al, rl) = (labels(&mut rng, b, 2), labels(&mut rng, b, 2));
        let emb = embeddings(&mut tape, [&av, &aa, &rv, &ra]);
        let svu = svu_loss(&mut tape, &emb, &contrast_sets(&al, &rl), tau, Denominator::Printed);
        match (svu, svu_oracle(&av, &aa, &al, &rv, &ra, &rl, tau)) {
            (Ok(v), Some(want)) => {
                check((tape.value(v).item() - want).abs() < tol, format!("svu, seed {seed}"))?;
                batches[1] += 1;
            }
            (Err(_), None) => {}
            _ => return Err(format!("svu degeneracy disagrees, seed {seed}")),
        }

        let ckr = ckr_loss(&mut tape, emb.retain_visual, emb.retain_audio, tau).map_err(|e| e.to_string())?;
        check((tape.value(ckr).item() - ckr_oracle(&rv, &ra, tau)).abs() < tol, format!("ckr, seed {seed}"))?;
        batches[2] += 1;

        match (dcs_loss(&mut tape, emb.retain_visual, &rl, tau, Denominator::Printed), dcs_oracle(&rv, &rl, tau)) {
            (Ok(v), Some(want)) => {
                check((tape.value(v).item() - want).abs() < tol, format!("dcs, seed {seed}"))?;
                batches[3] += 1;
            }
            (Err(_), None) => {}
            _ => return Err(format!("dcs degeneracy disagrees, seed {seed}")),
        }
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("ce/svu/ckr/dcs batches {batches:?} from {seed} draws"))
}

fn end_to_end_error(seed: u64, fixed: bool) -> f64 {
    let data = DataConfig {
        classes: 3,
        visual_dim: 5,
        audio_dim: 5,
        samples_per_class: 10,
        ..DataConfig::default()
    };
    let store = generate(&data, seed).unwrap();
    let s = split(store.len(), 0.8, 0.2, seed).unwrap();
    let mut retain = Vec::new();
    for class in 0..3 {
        retain.extend(s.retain.iter().copied().filter(|&i| store.labels(&[i])[0] == class).take(2));
    }
    let batch = ContrastBatch::new(&store, s.unlearn[..3].to_vec(), retain);
    let loss_cfg = LossConfig {
        tau_svu: 0.5,
        tau_ckr: 0.5,
        tau_dcs: 0.5,
        svu_fixed_references: fixed,
        ..LossConfig::default()
    };
    let dims = ModelDims {
        visual_dim: 5,
        audio_dim: 5,
        hidden_dim: 6,
        embed_dim: 4,
        classes: 3,
    };
    let base = Model::init(dims, Activation::Tanh, seed).unwrap();
    let refs = SvuReferences {
        visual: base.embed_visual(&store, &batch.retain).unwrap(),
        audio: base.embed_audio(&store, &batch.retain).unwrap(),
    };
    let params: Vec<Tensor> = base.params().into_iter().cloned().collect();
    gradient_error(&params, |tape, vars| {
        let bound = base.bind_vars(vars).unwrap();
        ccu_objective(tape, &bound, &store, &batch, &loss_cfg, true, Some(&refs)).unwrap().0
    })
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rel = 1e-3;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = |rng: &mut ChaCha8Rng, n| tensor(&unit_rows(rng, n, 4));
        let logits = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y = labels(&mut rng, 3, 4);
        worst = worst.max(gradient_error(&[logits], |t, v| cross_entropy(t, v[0], &y).unwrap()));

        let inputs: Vec<Tensor> = (0..4).map(|_| rows(&mut rng, 3)).collect();
        let sets = contrast_sets(&[0, 1, 0], &[0, 1, 1]);
        worst = worst.max(gradient_error(&inputs, |t, v| {
            let emb = ContrastEmbeddings {
                anchor_visual: v[0],
                anchor_audio: v[1],
                retain_visual: v[2],
                retain_audio: v[3],
            };
            svu_loss(t, &emb, &sets, 0.2, Denominator::Printed).unwrap()
        }));

        let pair = [rows(&mut rng, 4), rows(&mut rng, 4)];
        worst = worst.max(gradient_error(&pair, |t, v| ckr_loss(t, v[0], v[1], 0.2).unwrap()));

        let e = rows(&mut rng, 5);
        let y = [0, 1, 0, 1, 1];
        worst = worst.max(gradient_error(&[e], |t, v| dcs_loss(t, v[0], &y, 0.2, Denominator::Printed).unwrap()));

        worst = worst.max(end_to_end_error(seed, true));
        worst = worst.max(end_to_end_error(seed, false));
        check(worst < rel, format!("relative error {worst:.2e} at seed {seed}"))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("20 seeds, worst relative error {worst:.1e}"))
}

fn trivial_values() -> Outcome {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![3, 5]));
    let ce = cross_entropy(&mut tape, l, &[0, 2, 4]).map_err(|e| e.to_string())?;
    let ce = tape.value(ce).item();
    check((ce - 5f64.ln()).abs() < 1e-9, format!("uniform cross-entropy {ce}"))?;

    let b = 3;
    let v = tape.constant(tensor(&vec![vec![0.6, 0.8]; b]));
    let ckr = ckr_loss(&mut tape, v, v, 0.1).map_err(|e| e.to_string())?;
    let ckr = tape.value(ckr).item();
    let want = 2.0 * b as f64 * (b as f64).ln();
    check((ckr - want).abs() < 1e-9, format!("constant-similarity ckr {ckr}, expected {want}"))?;

    let s = 0.5f64.sqrt();
    let m = vec![vec![1.0, 0.0]];
    let retain = vec![vec![s, s], vec![s, -s]];
    let emb = embeddings(&mut tape, [&m, &m, &retain, &retain]);
    let svu = svu_loss(&mut tape, &emb, &contrast_sets(&[0], &[0, 1]), 0.1, Denominator::Printed)
        .map_err(|e| e.to_string())?;
    let svu = tape.value(svu).item();
    check(svu.abs() < 1e-9, format!("symmetric svu {svu}"))?;
    Ok(format!("ln K {ce:.6}, 2B ln B {ckr:.6}, svu {svu:.1e}"))
}

fn directional(reps: &[Replicate], started: Instant) -> Outcome {
    let med = |f: &dyn Fn(&Replicate) -> f64| median(reps.iter().map(f).collect());
    let forgotten: Vec<bool> = reps.iter().map(|r| r.ccu_stop == StopReason::EarlyStop && r.ccu.forgotten()).collect();
    let gap = med(&|r| test_acc(&r.ccu, Mode::All) - test_acc(&r.retrain, Mode::All));
    let ccu_drop = med(&|r| test_acc(&r.before, Mode::AudioOnly) - test_acc(&r.ccu, Mode::AudioOnly));
    let ng_drop = med(&|r| test_acc(&r.before, Mode::AudioOnly) - test_acc(&r.neggrad, Mode::AudioOnly));
    let mia_ccu = med(&|r| r.mia_ccu_unlearn);
    let mia_orig = med(&|r| r.mia_original_unlearn);
    let summary = format!(
        "forgotten {forgotten:?}, acc gap {gap:+.4}, audio drop ccu {ccu_drop:+.4} neggrad+ {ng_drop:+.4}, \
         mia on forget set {mia_ccu:.3} vs original {mia_orig:.3}"
    );
    let mut failed = Vec::new();
    if !forgotten.iter().all(|&f| f) {
        failed.push("a");
    }
    if gap.abs() > 0.05 {
        failed.push("b");
    }
    if ccu_drop > 0.05 {
        failed.push("c");
    }
    if ng_drop <= ccu_drop {
        failed.push("d");
    }
    if mia_ccu >= mia_orig {
        failed.push("e");
    }
    if started.elapsed() >= Duration::from_secs(300) {
        failed.push("runtime");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("failed {failed:?}: {summary}"))
    }
}

fn efficiency(reps: &[Replicate]) -> Outcome {
    let pairs: Vec<String> = reps
        .iter()
        .map(|r| format!("{:.3}s<{:.3}s", r.ccu_seconds, r.retrain_seconds))
        .collect();
    check(
        reps.iter().all(|r| r.ccu_seconds < r.retrain_seconds),
        format!("ccu not faster on every seed: {pairs:?}"),
    )?;
    Ok(pairs.join(" "))
}

fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    cfg.out = dir.path().join("out");
    cfg.record_timing = false;
    cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
    let first = snapshot(&cfg.out);
    cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
    let second = snapshot(&cfg.out);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    check(first.len() == second.len() && differing.is_empty(), format!("differing files {differing:?}"))?;
    Ok(format!("{} files byte-identical across two pipeline runs", first.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(outcome) => outcome,
        Err(payload) => Err(payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "metric formulas", guarded(metric_formulas)),
        (2, "oracle equivalence", guarded(oracle_equivalence)),
        (3, "gradient suite", guarded(gradient_suite)),
        (4, "trivial values", guarded(trivial_values)),
    ];
    let started = Instant::now();
    let reps = catch_unwind(|| (0..5).map(replicate).collect::<Vec<_>>());
    match &reps {
        Ok(reps) => {
            results.push((5, "directional experiment", guarded(|| directional(reps, started))));
            results.push((6, "efficiency", guarded(|| efficiency(reps))));
        }
        Err(_) => {
            results.push((5, "directional experiment", Err("replicate run panicked".into())));
            results.push((6, "efficiency", Err("replicate run panicked".into())));
        }
    }
    results.push((7, "determinism", guarded(determinism)));

    let mut all = true;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS  {detail}"),
            Err(detail) => {
                all = false;
                println!("criterion {n} ({name}): FAIL  {detail}");
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
