//! Synthetic paired visual/audio samples, dataset splits and contrast batches.
//!
//! Each class `k` owns a latent prototype `z_k`. Visual features are a fixed
//! random projection of `z_k` plus isotropic noise. Audio features project a
//! blend `coupling * z_k + (1 - coupling) * xi` where `xi` is a fresh
//! per-sample latent, so `coupling` sets how much class signal the audio
//! modality carries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Share of the class prototype in the audio latent, in `[0, 1]`.
    pub coupling: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Standard deviation of prototype and per-sample latent coordinates.
    #[serde(default = "default_prototype_scale")]
    pub prototype_scale: f64,
}

fn default_latent_dim() -> usize {
    4
}

fn default_prototype_scale() -> f64 {
    0.4
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            visual_dim: 20,
            audio_dim: 20,
            samples_per_class: 200,
            noise: 0.3,
            coupling: 0.7,
            latent_dim: default_latent_dim(),
            prototype_scale: default_prototype_scale(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if self.visual_dim < 2 {
            return Err(Error::config("data.visual_dim", "must be at least 2"));
        }
        if self.audio_dim < 2 {
            return Err(Error::config("data.audio_dim", "must be at least 2"));
        }
        if self.latent_dim < 1 {
            return Err(Error::config("data.latent_dim", "must be positive"));
        }
        if self.samples_per_class < 1 {
            return Err(Error::config("data.samples_per_class", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::config("data.coupling", "must lie in [0, 1]"));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(Error::config("data.prototype_scale", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub label: usize,
}

/// All generated samples plus their declared dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub samples: Vec<Sample>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn project(matrix: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    matrix
        .iter()
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates a class-major sample store. Deterministic in `seed`.
///
/// Noise scale 0 is accepted; it yields identical same-class visual vectors,
/// and identical audio vectors when `coupling == 1`.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<SampleStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = cfg.latent_dim;
    let proj_scale = 1.0 / (latent as f64).sqrt();

    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian(&mut rng, latent, cfg.prototype_scale))
        .collect();
    let visual_proj: Vec<Vec<f64>> = (0..cfg.visual_dim)
        .map(|_| gaussian(&mut rng, latent, proj_scale))
        .collect();
    let audio_proj: Vec<Vec<f64>> = (0..cfg.audio_dim)
        .map(|_| gaussian(&mut rng, latent, proj_scale))
        .collect();

    let mut samples = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for (label, z) in prototypes.iter().enumerate() {
        let visual_mean = project(&visual_proj, z);
        for _ in 0..cfg.samples_per_class {
            let mut visual = visual_mean.clone();
            for (v, n) in visual.iter_mut().zip(gaussian(&mut rng, cfg.visual_dim, cfg.noise)) {
                *v += n;
            }
            let xi = gaussian(&mut rng, latent, cfg.prototype_scale);
            let blended: Vec<f64> = z
                .iter()
                .zip(&xi)
                .map(|(zk, x)| cfg.coupling * zk + (1.0 - cfg.coupling) * x)
                .collect();
            let mut audio = project(&audio_proj, &blended);
            for (a, n) in audio.iter_mut().zip(gaussian(&mut rng, cfg.audio_dim, cfg.noise)) {
                *a += n;
            }
            samples.push(Sample {
                visual,
                audio,
                label,
            });
        }
    }
    Ok(SampleStore {
        classes: cfg.classes,
        visual_dim: cfg.visual_dim,
        audio_dim: cfg.audio_dim,
        samples,
    })
}

fn fmt_f64(out: &mut String, x: f64) {
    // 17 significant digits round-trip every finite f64 exactly
    let _ = write!(out, "{x:.16e}");
}

impl SampleStore {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// `[indices.len(), visual_dim]` matrix of visual features.
    pub fn visual_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| &self.samples[i].visual[..]).collect();
        Tensor::from_rows(&rows)
    }

    /// `[indices.len(), audio_dim]` matrix of audio features.
    pub fn audio_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| &self.samples[i].audio[..]).collect();
        Tensor::from_rows(&rows)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.visual.len() != self.visual_dim || s.audio.len() != self.audio_dim {
                return Err(Error::config(
                    format!("sample {i}"),
                    "feature length does not match the declared dimensions",
                ));
            }
            if s.label >= self.classes {
                return Err(Error::config(
                    format!("sample {i}"),
                    format!("label {} is not below {}", s.label, self.classes),
                ));
            }
        }
        Ok(())
    }

    /// Line-oriented text form: a `K d_v d_a` header, then one
    /// `label visual... audio...` line per sample.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.classes, self.visual_dim, self.audio_dim);
        for s in &self.samples {
            let _ = write!(out, "{}", s.label);
            for &x in s.visual.iter().chain(&s.audio) {
                out.push(' ');
                fmt_f64(&mut out, x);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing header line"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, 1, format!("bad header: {e}")))?;
        let [classes, visual_dim, audio_dim] = dims[..] else {
            return Err(Error::parse(origin, 1, "header needs `K d_v d_a`"));
        };
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut tokens = line.split_whitespace();
            let label: usize = tokens
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::parse(origin, lineno, format!("bad label: {e}")))?;
            let values: Vec<f64> = tokens
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(origin, lineno, format!("bad value: {e}")))?;
            if values.len() != visual_dim + audio_dim {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!(
                        "expected {} values, found {}",
                        visual_dim + audio_dim,
                        values.len()
                    ),
                ));
            }
            if label >= classes {
                return Err(Error::parse(origin, lineno, format!("label {label} >= {classes}")));
            }
            samples.push(Sample {
                visual: values[..visual_dim].to_vec(),
                audio: values[visual_dim..].to_vec(),
                label,
            });
        }
        Ok(Self {
            classes,
            visual_dim,
            audio_dim,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Index lists into a [`SampleStore`].
///
/// `unlearn` and `retain` partition `train`; `test` is disjoint from `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub unlearn: Vec<usize>,
    pub retain: Vec<usize>,
    pub forget_ratio: f64,
}

/// Default share of the store held out as the test set.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

fn check_fraction(field: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::config(field, format!("{x} is not in (0, 1)")));
    }
    Ok(())
}

/// Random train/test partition of `n` samples.
pub fn train_test(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction("train_fraction", train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config(
            "train_fraction",
            format!("{train_fraction} of {n} samples leaves train or test empty"),
        ));
    }
    let test = order.split_off(n_train);
    Ok((order, test))
}

impl DatasetSplit {
    /// Selects a uniformly random unlearn subset of `train`.
    pub fn with_forget(
        train: Vec<usize>,
        test: Vec<usize>,
        forget_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        check_fraction("forget_ratio", forget_ratio)?;
        let n_forget = (forget_ratio * train.len() as f64).round() as usize;
        if n_forget == 0 || n_forget >= train.len() {
            return Err(Error::config(
                "forget_ratio",
                format!(
                    "{forget_ratio} of {} training samples leaves unlearn or retain empty",
                    train.len()
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut picked = vec![false; train.len()];
        for i in index::sample(&mut rng, train.len(), n_forget) {
            picked[i] = true;
        }
        let (mut unlearn, mut retain) = (Vec::new(), Vec::new());
        for (pos, &idx) in train.iter().enumerate() {
            if picked[pos] {
                unlearn.push(idx);
            } else {
                retain.push(idx);
            }
        }
        unlearn.sort_unstable();
        retain.sort_unstable();
        Ok(Self {
            train,
            test,
            unlearn,
            retain,
            forget_ratio,
        })
    }
}

/// Splits `n` samples into train/test, then train into unlearn/retain.
pub fn split(n: usize, train_fraction: f64, forget_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let (train, test) = train_test(n, train_fraction, seed)?;
    DatasetSplit::with_forget(train, test, forget_ratio, seed)
}

/// Positive and negative positions (into the retain batch) for one anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Label-equality positives/negatives of every anchor against `retain_labels`.
pub fn contrast_sets(anchor_labels: &[usize], retain_labels: &[usize]) -> Vec<AnchorSets> {
    anchor_labels
        .iter()
        .map(|&y| {
            let (positives, negatives) = (0..retain_labels.len()).partition(|&j| retain_labels[j] == y);
            AnchorSets {
                positives,
                negatives,
            }
        })
        .collect()
}

/// One unlearn batch paired with one retain batch.
///
/// The audio positive/negative sets follow the same label rule as the
/// visual ones, so a single set per anchor serves both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub unlearn: Vec<usize>,
    pub retain: Vec<usize>,
    pub unlearn_labels: Vec<usize>,
    pub retain_labels: Vec<usize>,
    pub sets: Vec<AnchorSets>,
}

impl ContrastBatch {
    pub fn new(store: &SampleStore, unlearn: Vec<usize>, retain: Vec<usize>) -> Self {
        let unlearn_labels = store.labels(&unlearn);
        let retain_labels = store.labels(&retain);
        let sets = contrast_sets(&unlearn_labels, &retain_labels);
        Self {
            unlearn,
            retain,
            unlearn_labels,
            retain_labels,
            sets,
        }
    }

    pub fn visual_positives(&self, anchor: usize) -> &[usize] {
        &self.sets[anchor].positives
    }

    pub fn visual_negatives(&self, anchor: usize) -> &[usize] {
        &self.sets[anchor].negatives
    }

    pub fn audio_positives(&self, anchor: usize) -> &[usize] {
        &self.sets[anchor].positives
    }

    pub fn audio_negatives(&self, anchor: usize) -> &[usize] {
        &self.sets[anchor].negatives
    }
}

/// `size` distinct members of `pool`, in draw order.
pub fn draw_without_replacement<R: Rng>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, pool.len(), size)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Draws `X_u` from the unlearn set and `X_r` from the retain set, both of
/// size `batch` and without replacement.
pub fn sample_contrast_batch<R: Rng>(
    store: &SampleStore,
    split: &DatasetSplit,
    batch: usize,
    rng: &mut R,
) -> Result<ContrastBatch> {
    if batch == 0 || batch > split.unlearn.len() || batch > split.retain.len() {
        return Err(Error::config(
            "batch_size",
            format!(
                "{batch} must be in 1..={} (unlearn) and 1..={} (retain)",
                split.unlearn.len(),
                split.retain.len()
            ),
        ));
    }
    let unlearn = draw_without_replacement(&split.unlearn, batch, rng);
    let retain = draw_without_replacement(&split.retain, batch, rng);
    Ok(ContrastBatch::new(store, unlearn, retain))
}
