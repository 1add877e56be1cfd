//! Per-method metric rows, median aggregation over seeds, and the CSV and
//! structured-text serializations of the report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{cmsg, upg, AccuracyTable, EvalSet, MiaRates};
use crate::error::{Error, Result};
use crate::model::Mode;

pub const BASELINE: &str = "retrain";

const CSV_HEADER: &str =
    "method,forget_ratio,seed,set,acc_all,acc_audio,acc_visual,upg_pct,cmsg_pct,mia_rate_pct,seconds";

/// Everything measured for one (method, forget ratio, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub forget_ratio: f64,
    pub seed: u64,
    pub accuracy: AccuracyTable,
    pub mia: MiaRates,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub method: String,
    pub forget_ratio: f64,
    /// `None` marks the median over seeds.
    pub seed: Option<u64>,
    pub set: EvalSet,
    pub acc_all: f64,
    pub acc_audio: f64,
    pub acc_visual: f64,
    /// Only filled on test-set rows.
    pub upg_pct: Option<f64>,
    pub cmsg_pct: Option<f64>,
    pub mia_rate_pct: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mia_for(mia: &MiaRates, set: EvalSet) -> f64 {
    match set {
        EvalSet::Test => mia.test,
        EvalSet::Retain => mia.retain_holdout,
        EvalSet::Unlearn => mia.unlearn,
    }
}

/// Per-set rows for one run; `baseline` is the retrain run's test
/// accuracies (all, audio) used for the gains.
fn rows_for(run: &RunMetrics, seed: Option<u64>, baseline: (f64, f64)) -> Result<Vec<ReportRow>> {
    EvalSet::ALL
        .into_iter()
        .map(|set| {
            let acc = |mode| run.accuracy.get(set, mode);
            let test = set == EvalSet::Test;
            Ok(ReportRow {
                method: run.method.clone(),
                forget_ratio: run.forget_ratio,
                seed,
                set,
                acc_all: acc(Mode::All),
                acc_audio: acc(Mode::AudioOnly),
                acc_visual: acc(Mode::VisualOnly),
                upg_pct: if test { Some(upg(acc(Mode::All), baseline.0)?) } else { None },
                cmsg_pct: if test { Some(cmsg(acc(Mode::AudioOnly), baseline.1)?) } else { None },
                mia_rate_pct: mia_for(&run.mia, set),
                seconds: run.seconds,
            })
        })
        .collect()
}

fn test_pair(table: &AccuracyTable) -> (f64, f64) {
    (
        table.get(EvalSet::Test, Mode::All),
        table.get(EvalSet::Test, Mode::AudioOnly),
    )
}

/// Collapses several runs of one method into a run of medians.
fn median_run(runs: &[&RunMetrics]) -> RunMetrics {
    let mut values = [[0.0; 3]; 3];
    for (s, row) in values.iter_mut().enumerate() {
        for (m, v) in row.iter_mut().enumerate() {
            *v = median(&mut runs.iter().map(|r| r.accuracy.values[s][m]).collect::<Vec<_>>());
        }
    }
    let pick = |f: fn(&RunMetrics) -> f64| median(&mut runs.iter().map(|r| f(r)).collect::<Vec<_>>());
    RunMetrics {
        method: runs[0].method.clone(),
        forget_ratio: runs[0].forget_ratio,
        seed: 0,
        accuracy: AccuracyTable { values },
        mia: MiaRates {
            unlearn: pick(|r| r.mia.unlearn),
            retain_holdout: pick(|r| r.mia.retain_holdout),
            test: pick(|r| r.mia.test),
        },
        seconds: pick(|r| r.seconds),
    }
}

/// Builds the report: per-seed rows for every run followed by a median row
/// set per (method, forget ratio). Gains are taken against the retrain run
/// with the same forget ratio and seed.
pub fn assemble_report(runs: &[RunMetrics]) -> Result<MetricsReport> {
    let mut groups: Vec<(String, f64, Vec<&RunMetrics>)> = Vec::new();
    for run in runs {
        match groups
            .iter_mut()
            .find(|(m, fr, _)| *m == run.method && *fr == run.forget_ratio)
        {
            Some((_, _, members)) => members.push(run),
            None => groups.push((run.method.clone(), run.forget_ratio, vec![run])),
        }
    }
    let baseline_for = |fr: f64, seed: u64| {
        runs.iter()
            .find(|r| r.method == BASELINE && r.forget_ratio == fr && r.seed == seed)
            .ok_or_else(|| Error::MissingBaseline(format!("{BASELINE} (forget ratio {fr}, seed {seed})")))
    };

    let mut rows = Vec::new();
    for (_, fr, members) in &mut groups {
        members.sort_by_key(|r| r.seed);
        let mut baselines = Vec::new();
        for run in members.iter() {
            let base = baseline_for(*fr, run.seed)?;
            rows.extend(rows_for(run, Some(run.seed), test_pair(&base.accuracy))?);
            baselines.push(base);
        }
        let base = median_run(&baselines);
        rows.extend(rows_for(&median_run(members), None, test_pair(&base.accuracy))?);
    }
    Ok(MetricsReport { rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.forget_ratio,
                seed,
                r.set.name(),
                r.acc_all,
                r.acc_audio,
                r.acc_visual,
                opt(r.upg_pct),
                opt(r.cmsg_pct),
                r.mia_rate_pct,
                r.seconds
            );
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => return Err(Error::parse(origin, 1, "unexpected header")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let err = |msg: String| Error::parse(origin, lineno, msg);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(err(format!("expected 11 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| err(format!("field {}: {e}", k + 1)));
            let opt_num = |k: usize| {
                if f[k].is_empty() {
                    Ok(None)
                } else {
                    num(k).map(Some)
                }
            };
            let seed = match f[2] {
                "median" => None,
                s => Some(s.parse().map_err(|e| err(format!("seed: {e}")))?),
            };
            rows.push(ReportRow {
                method: f[0].to_string(),
                forget_ratio: num(1)?,
                seed,
                set: EvalSet::parse(f[3]).ok_or_else(|| err(format!("unknown set `{}`", f[3])))?,
                acc_all: num(4)?,
                acc_audio: num(5)?,
                acc_visual: num(6)?,
                upg_pct: opt_num(7)?,
                cmsg_pct: opt_num(8)?,
                mia_rate_pct: num(9)?,
                seconds: num(10)?,
            });
        }
        Ok(Self { rows })
    }

    /// The same rows as a TOML document.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report rows are plain data")
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, 0, e.to_string()))
    }

    /// Largest gap between a stored gain and the gain recomputed from the
    /// stored test accuracies of the row and its retrain counterpart.
    pub fn gain_discrepancy(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for r in self.rows.iter().filter(|r| r.set == EvalSet::Test) {
            let base = self
                .rows
                .iter()
                .find(|b| {
                    b.method == BASELINE
                        && b.set == EvalSet::Test
                        && b.forget_ratio == r.forget_ratio
                        && b.seed == r.seed
                })
                .ok_or_else(|| Error::MissingBaseline(BASELINE.into()))?;
            if let Some(u) = r.upg_pct {
                worst = worst.max((u - upg(r.acc_all, base.acc_all)?).abs());
            }
            if let Some(c) = r.cmsg_pct {
                worst = worst.max((c - cmsg(r.acc_audio, base.acc_audio)?).abs());
            }
        }
        Ok(worst)
    }
}
