//! The contrastive unlearning loop and the Retrain / Finetune / NegGrad+
//! baselines, all sharing the per-epoch early-stopping rule.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Tensor, Var};
use crate::data::{draw_without_replacement, ContrastBatch, DatasetSplit, SampleStore};
use crate::error::{Error, Result};
use crate::eval::{accuracy_table, AccuracyTable, EvalSet, MODE_COLUMNS};
use crate::losses::{
    ckr_loss, cross_entropy, dcs_loss, svu_loss, total_loss, ContrastEmbeddings, LossConfig,
    LossTerms,
};
use crate::model::{
    cross_entropy_epoch, train_original, BoundModel, Mode, Model, ModelDims, TrainConfig,
    TrainableScope,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ccu,
    Retrain,
    Finetune,
    NeggradPlus,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ccu, Method::Retrain, Method::Finetune, Method::NeggradPlus];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ccu => "ccu",
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::NeggradPlus => "neggrad_plus",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnRunConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub early_stop: bool,
    pub scope: TrainableScope,
}

impl UnlearnRunConfig {
    /// Per-method defaults. Retrain takes its schedule from [`TrainConfig`]
    /// and ignores these fields.
    pub fn new(method: Method, seed: u64) -> Self {
        let (epochs, lr, batch_size) = match method {
            Method::Ccu => (30, 3e-4, 16),
            Method::Finetune => (20, 0.1, 32),
            Method::NeggradPlus => (20, 1.0, 16),
            Method::Retrain => (40, 0.5, 32),
        };
        Self {
            method,
            epochs,
            lr,
            batch_size,
            loss: LossConfig::default(),
            seed,
            early_stop: true,
            scope: TrainableScope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("{}.{f}", self.method.name());
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(field("lr"), "must be finite and non-negative"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    Budget,
}

impl StopReason {
    fn name(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::Budget => "budget",
        }
    }
}

/// Loss values of one optimizer step. Component columns that a method does
/// not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub loss: f64,
    pub svu: Option<f64>,
    pub ckr: Option<f64>,
    pub dcs: Option<f64>,
}

impl StepRecord {
    fn plain(epoch: usize, loss: f64) -> Self {
        Self {
            epoch,
            loss,
            svu: None,
            ckr: None,
            dcs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnTrace {
    pub method: Method,
    pub steps: Vec<StepRecord>,
    /// Entry 0 is the model before the run; entry `e` follows epoch `e`.
    pub snapshots: Vec<AccuracyTable>,
    pub stop: StopReason,
    /// Planned optimizer steps and how many of them would have DCS active.
    pub planned_steps: usize,
    pub dcs_window: usize,
    pub seconds: f64,
}

impl UnlearnTrace {
    fn new(method: Method) -> Self {
        Self {
            method,
            steps: Vec::new(),
            snapshots: Vec::new(),
            stop: StopReason::Budget,
            planned_steps: 0,
            dcs_window: 0,
            seconds: 0.0,
        }
    }

    pub fn epochs_run(&self) -> usize {
        self.snapshots.len().saturating_sub(1)
    }

    pub fn final_snapshot(&self) -> &AccuracyTable {
        self.snapshots.last().expect("trace holds the initial snapshot")
    }

    pub fn dcs_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.dcs.is_some()).count()
    }

    /// Plain-text form. `with_seconds = false` writes 0 for wall-clock time
    /// so that repeated runs serialize identically.
    pub fn to_text(&self, with_seconds: bool) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ccu-trace method={} stop={} epochs={} planned_steps={} dcs_window={} dcs_steps={} seconds={}",
            self.method,
            self.stop.name(),
            self.epochs_run(),
            self.planned_steps,
            self.dcs_window,
            self.dcs_steps(),
            if with_seconds { self.seconds } else { 0.0 },
        );
        let _ = writeln!(out, "# steps: epoch loss svu ckr dcs");
        for s in &self.steps {
            let _ = writeln!(out, "step {} {} {} {} {}", s.epoch, s.loss, opt(s.svu), opt(s.ckr), opt(s.dcs));
        }
        let mut cols = Vec::new();
        for set in EvalSet::ALL {
            for mode in MODE_COLUMNS {
                cols.push(format!("{}_{}", set.name(), mode_name(mode)));
            }
        }
        let _ = writeln!(out, "# snapshots: epoch {}", cols.join(" "));
        for (e, snap) in self.snapshots.iter().enumerate() {
            let values: Vec<String> = snap.values.iter().flatten().map(f64::to_string).collect();
            let _ = writeln!(out, "snapshot {e} {}", values.join(" "));
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty trace"))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("ccu-trace") {
            return Err(Error::parse(origin, 1, "not a trace file"));
        }
        let mut trace = UnlearnTrace::new(Method::Ccu);
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, 1, format!("bad header token `{tok}`")))?;
            let bad = |e: String| Error::parse(origin, 1, format!("{key}: {e}"));
            match key {
                "method" => trace.method = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "stop" => {
                    trace.stop = match value {
                        "early_stop" => StopReason::EarlyStop,
                        "budget" => StopReason::Budget,
                        _ => return Err(bad(format!("unknown `{value}`"))),
                    }
                }
                "planned_steps" => trace.planned_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
                "dcs_window" => trace.dcs_window = value.parse().map_err(|e| bad(format!("{e}")))?,
                "seconds" => trace.seconds = value.parse().map_err(|e| bad(format!("{e}")))?,
                "epochs" | "dcs_steps" => {}
                _ => return Err(bad("unknown key".into())),
            }
        }
        for (i, line) in lines {
            let lineno = i + 1;
            let err = |msg: String| Error::parse(origin, lineno, msg);
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
            let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
            match f.first().copied() {
                Some("#") | None => {}
                Some("step") if f.len() == 6 => trace.steps.push(StepRecord {
                    epoch: f[1].parse().map_err(|e| err(format!("epoch: {e}")))?,
                    loss: num(f[2])?,
                    svu: opt(f[3])?,
                    ckr: opt(f[4])?,
                    dcs: opt(f[5])?,
                }),
                Some("snapshot") if f.len() == 11 => {
                    let mut values = [[0.0; 3]; 3];
                    for (k, v) in f[2..].iter().enumerate() {
                        values[k / 3][k % 3] = num(v)?;
                    }
                    trace.snapshots.push(AccuracyTable { values });
                }
                _ => return Err(err(format!("unrecognised line `{line}`"))),
            }
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path, with_seconds: bool) -> Result<()> {
        fs::write(path, self.to_text(with_seconds))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::All => "all",
        Mode::AudioOnly => "audio",
        Mode::VisualOnly => "visual",
    }
}

fn check_finite(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            context: context(),
            value,
        })
    }
}

/// Snapshots after an epoch and reports whether the run should stop.
fn end_epoch(
    trace: &mut UnlearnTrace,
    model: &Model,
    store: &SampleStore,
    split: &DatasetSplit,
    early_stop: bool,
) -> Result<bool> {
    let snap = accuracy_table(model, store, split)?;
    trace.snapshots.push(snap);
    if early_stop && snap.forgotten() {
        trace.stop = StopReason::EarlyStop;
        return Ok(true);
    }
    Ok(false)
}

fn unlearn_batches(split: &DatasetSplit, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = split.unlearn.clone();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Retain-batch embeddings held fixed inside SVU, `[B, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SvuReferences {
    pub visual: Tensor,
    pub audio: Tensor,
}

/// The weighted contrastive objective of one paired batch on `tape`.
///
/// When the loss config fixes SVU references, `refs` supplies them; `None`
/// takes the current retain embeddings' values.
#[allow(clippy::too_many_arguments)]
pub fn ccu_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    store: &SampleStore,
    batch: &ContrastBatch,
    loss_cfg: &LossConfig,
    dcs_active: bool,
    refs: Option<&SvuReferences>,
) -> Result<(Var, LossTerms)> {
    let xuv = tape.constant(store.visual_matrix(&batch.unlearn)?);
    let xua = tape.constant(store.audio_matrix(&batch.unlearn)?);
    let xrv = tape.constant(store.visual_matrix(&batch.retain)?);
    let xra = tape.constant(store.audio_matrix(&batch.retain)?);
    let emb = ContrastEmbeddings {
        anchor_visual: bound.embed_visual(tape, xuv)?,
        anchor_audio: bound.embed_audio(tape, xua)?,
        retain_visual: bound.embed_visual(tape, xrv)?,
        retain_audio: bound.embed_audio(tape, xra)?,
    };
    let svu_emb = if loss_cfg.svu_fixed_references {
        let (v, a) = match refs {
            Some(r) => (r.visual.clone(), r.audio.clone()),
            None => (
                tape.value(emb.retain_visual).clone(),
                tape.value(emb.retain_audio).clone(),
            ),
        };
        ContrastEmbeddings {
            retain_visual: tape.constant(v),
            retain_audio: tape.constant(a),
            ..emb
        }
    } else {
        emb
    };
    let svu = svu_loss(tape, &svu_emb, &batch.sets, loss_cfg.tau_svu, loss_cfg.denominators)?;
    let ckr = ckr_loss(tape, emb.retain_visual, emb.retain_audio, loss_cfg.tau_ckr)?;
    let dcs = if dcs_active {
        let labels = &batch.retain_labels;
        let v = dcs_loss(tape, emb.retain_visual, labels, loss_cfg.tau_dcs, loss_cfg.denominators)?;
        let a = dcs_loss(tape, emb.retain_audio, labels, loss_cfg.tau_dcs, loss_cfg.denominators)?;
        Some(tape.add(v, a)?)
    } else {
        None
    };
    let terms = LossTerms { svu, ckr, dcs };
    let total = total_loss(tape, &terms, loss_cfg, dcs_active)?;
    Ok((total, terms))
}

/// One contrastive unlearning step on a paired unlearn/retain batch.
/// Returns the step's loss record; the model is updated in place.
pub fn ccu_step(
    model: &mut Model,
    store: &SampleStore,
    batch: &ContrastBatch,
    loss_cfg: &LossConfig,
    dcs_active: bool,
    lr: f64,
    scope: TrainableScope,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, scope);
    let (total, terms) = ccu_objective(&mut tape, &bound, store, batch, loss_cfg, dcs_active, None)?;
    let value = tape.value(total).item();
    check_finite(value, || "contrastive unlearning step".into())?;
    let grads = tape.backward(total)?;
    model.apply_gradients(&tape, &bound, &grads, lr, scope)?;
    Ok(StepRecord {
        epoch: 0,
        loss: value,
        svu: Some(tape.value(terms.svu).item()),
        ckr: Some(tape.value(terms.ckr).item()),
        dcs: terms.dcs.map(|d| tape.value(d).item()),
    })
}

/// Contrastive unlearning. Each epoch walks the shuffled unlearn set in
/// batches; every unlearn batch is contrasted with `omega` freshly drawn
/// retain batches, one optimizer step each. DCS joins the objective for
/// the final steps of the planned budget.
pub fn ccu_unlearn(
    model: &Model,
    store: &SampleStore,
    split: &DatasetSplit,
    cfg: &UnlearnRunConfig,
) -> Result<(Model, UnlearnTrace)> {
    cfg.validate()?;
    if cfg.batch_size > split.retain.len() {
        return Err(Error::config(
            "ccu.batch_size",
            format!("exceeds the retain set size {}", split.retain.len()),
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut trace = UnlearnTrace::new(Method::Ccu);
    let per_epoch = split.unlearn.len().div_ceil(cfg.batch_size) * cfg.loss.omega;
    trace.planned_steps = cfg.epochs * per_epoch;
    trace.dcs_window = cfg.loss.dcs_window(trace.planned_steps);
    let dcs_from = trace.planned_steps - trace.dcs_window;
    trace.snapshots.push(accuracy_table(&model, store, split)?);

    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for unlearn in unlearn_batches(split, cfg.batch_size, &mut rng) {
            for _ in 0..cfg.loss.omega {
                let retain = draw_without_replacement(&split.retain, cfg.batch_size, &mut rng);
                let batch = ContrastBatch::new(store, unlearn.clone(), retain);
                let dcs_active = step >= dcs_from;
                let mut record = ccu_step(&mut model, store, &batch, &cfg.loss, dcs_active, cfg.lr, cfg.scope)
                    .map_err(|e| match e {
                        Error::Diverged { value, .. } => Error::Diverged {
                            context: format!("ccu epoch {epoch}, step {step}"),
                            value,
                        },
                        other => other,
                    })?;
                record.epoch = epoch;
                trace.steps.push(record);
                step += 1;
            }
        }
        if end_epoch(&mut trace, &model, store, split, cfg.early_stop)? {
            break;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

/// Fresh initialization trained on the retain set only.
pub fn retrain_model(
    store: &SampleStore,
    retain: &[usize],
    dims: ModelDims,
    activation: Activation,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    let model = Model::init(dims, activation, seed)?;
    train_original(model, store, retain, train, seed)
}

/// The retrain reference. Runs the full training budget; the early-stop
/// rule does not apply to training from scratch.
pub fn retrain(
    store: &SampleStore,
    split: &DatasetSplit,
    dims: ModelDims,
    activation: Activation,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Model, UnlearnTrace)> {
    train.validate()?;
    if split.retain.is_empty() {
        return Err(Error::EmptySet("retain set".into()));
    }
    let start = Instant::now();
    let mut model = Model::init(dims, activation, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = UnlearnTrace::new(Method::Retrain);
    trace.planned_steps = train.epochs * split.retain.len().div_ceil(train.batch_size);
    trace.snapshots.push(accuracy_table(&model, store, split)?);
    for epoch in 1..=train.epochs {
        let loss = cross_entropy_epoch(
            &mut model,
            store,
            &split.retain,
            train,
            TrainableScope::All,
            &mut rng,
            &format!("retrain epoch {epoch}"),
        )?;
        trace.steps.push(StepRecord::plain(epoch, loss));
        end_epoch(&mut trace, &model, store, split, false)?;
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

/// Continued cross-entropy training on the retain set.
pub fn finetune(
    model: &Model,
    store: &SampleStore,
    split: &DatasetSplit,
    cfg: &UnlearnRunConfig,
) -> Result<(Model, UnlearnTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut trace = UnlearnTrace::new(Method::Finetune);
    trace.planned_steps = cfg.epochs * split.retain.len().div_ceil(cfg.batch_size);
    trace.snapshots.push(accuracy_table(&model, store, split)?);
    let train = TrainConfig {
        epochs: 1,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    };
    for epoch in 1..=cfg.epochs {
        let loss = cross_entropy_epoch(
            &mut model,
            store,
            &split.retain,
            &train,
            cfg.scope,
            &mut rng,
            &format!("finetune epoch {epoch}"),
        )?;
        trace.steps.push(StepRecord::plain(epoch, loss));
        if end_epoch(&mut trace, &model, store, split, cfg.early_stop)? {
            break;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

/// One NegGrad+ step: ascent on the unlearn batch, descent on the retain
/// batch, `-CE(X_u) + CE(X_r)`.
pub fn neggrad_step(
    model: &mut Model,
    store: &SampleStore,
    unlearn: &[usize],
    retain: &[usize],
    lr: f64,
    scope: TrainableScope,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, scope);
    let ce = |idx: &[usize], tape: &mut Tape| -> Result<_> {
        let xv = tape.constant(store.visual_matrix(idx)?);
        let xa = tape.constant(store.audio_matrix(idx)?);
        let logits = bound.classify(tape, xv, xa, Mode::All)?;
        cross_entropy(tape, logits, &store.labels(idx))
    };
    let forget = ce(unlearn, &mut tape)?;
    let keep = ce(retain, &mut tape)?;
    let loss = tape.sub(keep, forget)?;
    let value = tape.value(loss).item();
    check_finite(value, || "neggrad_plus step".into())?;
    let grads = tape.backward(loss)?;
    model.apply_gradients(&tape, &bound, &grads, lr, scope)?;
    Ok(value)
}

pub fn neggrad_plus(
    model: &Model,
    store: &SampleStore,
    split: &DatasetSplit,
    cfg: &UnlearnRunConfig,
) -> Result<(Model, UnlearnTrace)> {
    cfg.validate()?;
    let retain_batch = cfg.batch_size.min(split.retain.len());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut trace = UnlearnTrace::new(Method::NeggradPlus);
    trace.planned_steps = cfg.epochs * split.unlearn.len().div_ceil(cfg.batch_size);
    trace.snapshots.push(accuracy_table(&model, store, split)?);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for unlearn in unlearn_batches(split, cfg.batch_size, &mut rng) {
            let retain = draw_without_replacement(&split.retain, retain_batch, &mut rng);
            let loss = neggrad_step(&mut model, store, &unlearn, &retain, cfg.lr, cfg.scope).map_err(
                |e| match e {
                    Error::Diverged { value, .. } => Error::Diverged {
                        context: format!("neggrad_plus epoch {epoch}, step {step}"),
                        value,
                    },
                    other => other,
                },
            )?;
            trace.steps.push(StepRecord::plain(epoch, loss));
            step += 1;
        }
        if end_epoch(&mut trace, &model, store, split, cfg.early_stop)? {
            break;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}
