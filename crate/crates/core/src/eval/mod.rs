//! Evaluation protocol: per-set, per-modality accuracy, the UPG and CMSG
//! gains relative to a retrained model, a membership-inference attack, and
//! report assembly.

mod mia;
mod report;

pub use mia::{attack_rates, confidence_features, mia_member_rate, MiaRates};
pub use report::{assemble_report, MetricsReport, ReportRow, RunMetrics};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{DatasetSplit, SampleStore};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};

/// The three evaluated index sets of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Test,
    Retain,
    Unlearn,
}

impl EvalSet {
    pub const ALL: [EvalSet; 3] = [EvalSet::Test, EvalSet::Retain, EvalSet::Unlearn];

    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Test => "test",
            EvalSet::Retain => "retain",
            EvalSet::Unlearn => "unlearn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|set| set.name() == s)
    }

    pub fn indices(self, split: &DatasetSplit) -> &[usize] {
        match self {
            EvalSet::Test => &split.test,
            EvalSet::Retain => &split.retain,
            EvalSet::Unlearn => &split.unlearn,
        }
    }
}

/// Row-wise argmax, ties resolved toward the smallest class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySet("evaluation set".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &Model, store: &SampleStore, indices: &[usize], mode: Mode) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptySet("evaluation set".into()));
    }
    let logits = model.logits(store, indices, mode)?;
    accuracy_from_logits(&logits, &store.labels(indices))
}

/// Accuracies indexed by [`EvalSet`] and by mode in all, audio, visual order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub values: [[f64; 3]; 3],
}

/// Column order of per-mode accuracies in tables and reports.
pub const MODE_COLUMNS: [Mode; 3] = [Mode::All, Mode::AudioOnly, Mode::VisualOnly];

fn mode_column(mode: Mode) -> usize {
    match mode {
        Mode::All => 0,
        Mode::AudioOnly => 1,
        Mode::VisualOnly => 2,
    }
}

impl AccuracyTable {
    pub fn get(&self, set: EvalSet, mode: Mode) -> f64 {
        self.values[set as usize][mode_column(mode)]
    }

    /// The early-stopping rule: visual accuracy on the unlearn set below
    /// visual accuracy on the test set.
    pub fn forgotten(&self) -> bool {
        self.get(EvalSet::Unlearn, Mode::VisualOnly) < self.get(EvalSet::Test, Mode::VisualOnly)
    }
}

pub fn accuracy_table(model: &Model, store: &SampleStore, split: &DatasetSplit) -> Result<AccuracyTable> {
    let mut values = [[0.0; 3]; 3];
    for set in EvalSet::ALL {
        for mode in MODE_COLUMNS {
            values[set as usize][mode_column(mode)] = accuracy(model, store, set.indices(split), mode)?;
        }
    }
    Ok(AccuracyTable { values })
}

fn relative_gain(op: &'static str, method: f64, retrain: f64) -> Result<f64> {
    if retrain == 0.0 {
        return Err(Error::ZeroDenominator(op));
    }
    Ok((method / retrain - 1.0) * 100.0)
}

/// Utility performance gain in percent: overall test accuracy of a method
/// relative to the retrained model.
pub fn upg(acc_all_method: f64, acc_all_retrain: f64) -> Result<f64> {
    relative_gain("upg", acc_all_method, acc_all_retrain)
}

/// Cross-modal stability gain in percent: audio-only test accuracy of a
/// method relative to the retrained model.
pub fn cmsg(acc_audio_method: f64, acc_audio_retrain: f64) -> Result<f64> {
    relative_gain("cmsg", acc_audio_method, acc_audio_retrain)
}
