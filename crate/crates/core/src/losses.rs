//! Training and unlearning objectives.
//!
//! All contrastive losses take unit-norm embeddings and compare them by dot
//! product divided by a temperature. Softmax denominators are always
//! evaluated as log-sum-exp with max shift.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::AnchorSets;
use crate::error::{Error, Result};

/// Which index set forms the contrastive softmax denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// SVU visual: positives only; SVU audio: negatives only; DCS:
    /// different-class samples only.
    #[default]
    Printed,
    /// Every retain sample (SVU) or every `j != i` (DCS), InfoNCE style.
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_svu: f64,
    pub tau_ckr: f64,
    pub tau_dcs: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Retain batches contrasted with each unlearn batch.
    pub omega: usize,
    /// Final optimizer steps with the DCS term active. `None` means
    /// `ceil(dcs_fraction * planned steps)`.
    pub dcs_iterations: Option<usize>,
    pub dcs_fraction: f64,
    pub denominators: Denominator,
    /// Treat the retain-batch embeddings inside SVU as fixed reference
    /// points, so SVU moves only the unlearn anchors.
    pub svu_fixed_references: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_svu: 0.1,
            tau_ckr: 0.1,
            tau_dcs: 0.1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            omega: 4,
            dcs_iterations: None,
            dcs_fraction: 0.2,
            denominators: Denominator::Printed,
            svu_fixed_references: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("loss.tau_svu", self.tau_svu),
            ("loss.tau_ckr", self.tau_ckr),
            ("loss.tau_dcs", self.tau_dcs),
        ] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config(name, "temperature must be positive"));
            }
        }
        for (name, w) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.gamma", self.gamma),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, "weight must be non-negative"));
            }
        }
        if self.omega == 0 {
            return Err(Error::config("loss.omega", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.dcs_fraction) {
            return Err(Error::config("loss.dcs_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of final steps, out of `planned_steps`, with DCS active.
    pub fn dcs_window(&self, planned_steps: usize) -> usize {
        self.dcs_iterations
            .unwrap_or_else(|| (self.dcs_fraction * planned_steps as f64).ceil() as usize)
            .min(planned_steps)
    }
}

fn check_rows(op: &'static str, tape: &Tape, m: Var, labels: usize) -> Result<usize> {
    let shape = tape.shape(m);
    if shape.len() != 2 || shape[0] != labels {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![labels],
        });
    }
    Ok(shape[0])
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `a * b^T / tau` for row-embedding matrices.
fn similarity(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let bt = tape.transpose(b)?;
    let s = tape.matmul(a, bt)?;
    Ok(tape.scale(s, 1.0 / tau))
}

fn row_entries(row: usize, width: usize, cols: &[usize]) -> Vec<usize> {
    cols.iter().map(|&j| row * width + j).collect()
}

/// Mean softmax cross-entropy of `[B, K]` logits against class labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let b = check_rows("cross_entropy", tape, logits, labels.len())?;
    let k = tape.shape(logits)[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::IndexOutOfBounds {
            op: "cross_entropy",
            index: bad,
            len: k,
        });
    }
    let lse = tape.logsumexp(logits, Some(1))?;
    let picked: Vec<usize> = (0..b).map(|i| i * k + labels[i]).collect();
    let target = tape.gather(logits, &picked)?;
    let nll = tape.sub(lse, target)?;
    tape.mean(nll, None)
}

/// Embeddings entering the selective visual unlearning loss: anchors from
/// the unlearn batch and their retain-batch counterparts, all `[B, d]`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastEmbeddings {
    pub anchor_visual: Var,
    pub anchor_audio: Var,
    pub retain_visual: Var,
    pub retain_audio: Var,
}

/// Selective visual unlearning loss, summed over anchors.
///
/// Visual anchors are pulled toward other-class retain visuals and pushed
/// away from same-class ones:
/// `-(1/|N|) sum_{a in N} log(exp(m_i.m_a/t) / sum_{p in P} exp(m_i.m_p/t))`.
/// Audio anchors get the ordinary attract-positives form with the roles of
/// `P` and `N` swapped. Anchors missing a required set skip that term.
pub fn svu_loss(
    tape: &mut Tape,
    emb: &ContrastEmbeddings,
    sets: &[AnchorSets],
    tau: f64,
    denominators: Denominator,
) -> Result<Var> {
    check_rows("svu_loss", tape, emb.anchor_visual, sets.len())?;
    check_rows("svu_loss", tape, emb.anchor_audio, sets.len())?;
    let width = tape.shape(emb.retain_visual)[0];
    check_rows("svu_loss", tape, emb.retain_audio, width)?;
    let sv = similarity(tape, emb.anchor_visual, emb.retain_visual, tau)?;
    let sa = similarity(tape, emb.anchor_audio, emb.retain_audio, tau)?;
    let everyone: Vec<usize> = (0..width).collect();

    let mut terms = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let (pos, neg) = (&set.positives, &set.negatives);
        // visual: attract negatives, normalise over positives
        let visual_denominator = match denominators {
            Denominator::Printed => (!pos.is_empty()).then_some(pos),
            Denominator::Conventional => Some(&everyone),
        };
        if let (Some(den), false) = (visual_denominator, neg.is_empty()) {
            let d = tape.gather(sv, &row_entries(i, width, den))?;
            let lse = tape.logsumexp(d, None)?;
            let n = tape.gather(sv, &row_entries(i, width, neg))?;
            let attract = tape.mean(n, None)?;
            terms.push(tape.sub(lse, attract)?);
        }
        let audio_denominator = match denominators {
            Denominator::Printed => (!neg.is_empty()).then_some(neg),
            Denominator::Conventional => Some(&everyone),
        };
        if let (Some(den), false) = (audio_denominator, pos.is_empty()) {
            let d = tape.gather(sa, &row_entries(i, width, den))?;
            let lse = tape.logsumexp(d, None)?;
            let p = tape.gather(sa, &row_entries(i, width, pos))?;
            let attract = tape.mean(p, None)?;
            terms.push(tape.sub(lse, attract)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::DegenerateBatch(
            "no anchor has both positives and negatives in the retain batch".into(),
        ));
    }
    sum_scalars(tape, &terms)
}

/// Symmetric cross-modal retention loss on paired retain embeddings.
///
/// `S = A V^T / tau`; each audio row must pick its own visual partner and
/// each visual column its own audio partner.
pub fn ckr_loss(tape: &mut Tape, visual: Var, audio: Var, tau: f64) -> Result<Var> {
    let (vs, as_) = (tape.shape(visual).to_vec(), tape.shape(audio).to_vec());
    if vs.len() != 2 || vs != as_ {
        return Err(Error::ShapeMismatch {
            op: "ckr_loss",
            lhs: vs,
            rhs: as_,
        });
    }
    let b = vs[0];
    let s = similarity(tape, audio, visual, tau)?;
    let rows = tape.logsumexp(s, Some(1))?;
    let cols = tape.logsumexp(s, Some(0))?;
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = tape.gather(s, &diag_idx)?;
    let lse = tape.add(rows, cols)?;
    let lse = tape.sum(lse, None)?;
    let diag = tape.sum(diag, None)?;
    let twice = tape.scale(diag, 2.0);
    tape.sub(lse, twice)
}

/// Supervised contrastive separation of one modality's retain embeddings,
/// averaged over anchors that have a same-class peer and a different-class
/// sample.
pub fn dcs_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
    denominators: Denominator,
) -> Result<Var> {
    let n = check_rows("dcs_loss", tape, embeddings, labels.len())?;
    let s = similarity(tape, embeddings, embeddings, tau)?;
    let mut terms = Vec::new();
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let den: Vec<usize> = match denominators {
            Denominator::Printed => neg,
            Denominator::Conventional => (0..n).filter(|&j| j != i).collect(),
        };
        let p = tape.gather(s, &row_entries(i, n, &pos))?;
        let p = tape.logsumexp(p, None)?;
        let d = tape.gather(s, &row_entries(i, n, &den))?;
        let d = tape.logsumexp(d, None)?;
        terms.push(tape.sub(d, p)?);
    }
    if terms.is_empty() {
        return Err(Error::DegenerateRetainBatch(
            "no sample has both a same-class peer and a different-class sample".into(),
        ));
    }
    let count = terms.len() as f64;
    let total = sum_scalars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / count))
}

/// The individual objective values feeding [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub svu: Var,
    pub ckr: Var,
    /// Sum of the visual and audio DCS terms, when computed.
    pub dcs: Option<Var>,
}

/// `alpha * svu + beta * ckr (+ gamma * dcs while DCS is active)`.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    cfg: &LossConfig,
    dcs_active: bool,
) -> Result<Var> {
    let svu = tape.scale(terms.svu, cfg.alpha);
    let ckr = tape.scale(terms.ckr, cfg.beta);
    let mut total = tape.add(svu, ckr)?;
    if dcs_active {
        let dcs = terms.dcs.ok_or_else(|| {
            Error::config("dcs", "DCS term requested as active but not computed")
        })?;
        let dcs = tape.scale(dcs, cfg.gamma);
        total = tape.add(total, dcs)?;
    }
    Ok(total)
}

/// Convenience for tests and reports: a scalar constant on `tape`.
pub fn scalar(tape: &mut Tape, value: f64) -> Var {
    tape.constant(Tensor::scalar(value))
}
