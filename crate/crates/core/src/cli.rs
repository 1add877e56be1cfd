//! Config-driven experiment commands behind the `ccu` binary.
//!
//! Artifact layout under the output directory:
//! `<dataset>.txt`, `original.ckpt`, `<method>_<fr>_<seed>.ckpt`,
//! `<method>_<fr>_<seed>.trace`, `<method>_<fr>_<seed>.eval`,
//! `report.csv`, `report.txt` and `config.effective.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::{generate, train_test, DataConfig, DatasetSplit, SampleStore, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::eval::{accuracy_table, assemble_report, mia_member_rate, MetricsReport, RunMetrics};
use crate::losses::LossConfig;
use crate::model::{train_original, Model, ModelDims, TrainConfig, TrainableScope};
use crate::unlearn::{ccu_unlearn, finetune, neggrad_plus, retrain, Method, UnlearnRunConfig, UnlearnTrace};

/// Name used for the model trained on the full training set.
pub const ORIGINAL: &str = "original";

#[derive(Debug, Parser)]
#[command(name = "ccu", version, about = "Visual-modality unlearning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(CommonArgs),
    /// Train the original model on the full training set.
    Train(CommonArgs),
    /// Run unlearning methods for every forget ratio and seed.
    Unlearn(CommonArgs),
    /// Evaluate checkpoints (accuracy, membership inference, timing).
    Eval(CommonArgs),
    /// Assemble report.csv from evaluations.
    Report(CommonArgs),
    /// gen-data, train, unlearn, eval and report in sequence.
    Pipeline(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the configured seed list with this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict to one method (`original` is accepted by eval).
    #[arg(long)]
    pub method: Option<String>,
    /// Replace the configured forget ratios with this ratio.
    #[arg(long)]
    pub forget_ratio: Option<f64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: ActivationName,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embed_dim: 16,
            activation: ActivationName::Silu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Silu,
    Tanh,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Silu => Activation::Silu,
            ActivationName::Tanh => Activation::Tanh,
        }
    }
}

/// Per-method schedule; unset fields take the method's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub early_stop: Option<bool>,
    pub scope: Option<TrainableScope>,
}

impl RunSettings {
    fn resolve(&mut self, method: Method) {
        let d = UnlearnRunConfig::new(method, 0);
        self.epochs.get_or_insert(d.epochs);
        self.lr.get_or_insert(d.lr);
        self.batch_size.get_or_insert(d.batch_size);
        self.early_stop.get_or_insert(d.early_stop);
        self.scope.get_or_insert(d.scope);
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Retrain, Method::Ccu, Method::Finetune, Method::NeggradPlus]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_dataset() -> String {
    "synthetic".into()
}

fn default_data_seed() -> u64 {
    1000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub forget_ratios: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Seeds dataset generation, the train/test split and original training.
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    /// Write measured wall-clock seconds into traces and reports. When off,
    /// seconds are written as 0 and repeated runs are byte-identical.
    #[serde(default = "yes")]
    pub record_timing: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub ccu: RunSettings,
    #[serde(default)]
    pub finetune: RunSettings,
    #[serde(default)]
    pub neggrad_plus: RunSettings,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            Error::config(format!("{origin}:{line}"), e.message().trim().to_string())
        })?;
        cfg.ccu.resolve(Method::Ccu);
        cfg.finetune.resolve(Method::Finetune);
        cfg.neggrad_plus.resolve(Method::NeggradPlus);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.forget_ratios.is_empty() {
            return Err(Error::config("forget_ratios", "must list at least one ratio"));
        }
        for &fr in &self.forget_ratios {
            if !(fr > 0.0 && fr < 1.0) {
                return Err(Error::config("forget_ratios", format!("{fr} is outside (0, 1)")));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must list at least one method"));
        }
        if self.dataset.is_empty() || self.dataset.contains(['/', '\\']) {
            return Err(Error::config("dataset", "must be a plain file stem"));
        }
        self.data.validate()?;
        self.dims().validate()?;
        self.train.validate()?;
        for m in [Method::Ccu, Method::Finetune, Method::NeggradPlus] {
            self.run_config(m, 0).validate()?;
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            visual_dim: self.data.visual_dim,
            audio_dim: self.data.audio_dim,
            hidden_dim: self.model.hidden_dim,
            embed_dim: self.model.embed_dim,
            classes: self.data.classes,
        }
    }

    pub fn run_config(&self, method: Method, seed: u64) -> UnlearnRunConfig {
        let s = match method {
            Method::Ccu => self.ccu,
            Method::Finetune => self.finetune,
            Method::NeggradPlus => self.neggrad_plus,
            Method::Retrain => RunSettings::default(),
        };
        let d = UnlearnRunConfig::new(method, seed);
        UnlearnRunConfig {
            epochs: s.epochs.unwrap_or(d.epochs),
            lr: s.lr.unwrap_or(d.lr),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            early_stop: s.early_stop.unwrap_or(d.early_stop),
            scope: s.scope.unwrap_or(d.scope),
            loss: self.loss,
            ..d
        }
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(mut self, args: &CommonArgs) -> Result<Self> {
        if let Some(seed) = args.seed {
            self.seeds = vec![seed];
        }
        if let Some(fr) = args.forget_ratio {
            self.forget_ratios = vec![fr];
        }
        if let Some(out) = &args.out {
            self.out = out.clone();
        }
        if let Some(m) = &args.method {
            if m != ORIGINAL {
                self.methods = vec![m.parse()?];
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join(format!("{}.txt", self.dataset))
    }

    pub fn original_path(&self) -> PathBuf {
        self.out.join(format!("{ORIGINAL}.ckpt"))
    }

    pub fn run_path(&self, method: &str, forget_ratio: f64, seed: u64, ext: &str) -> PathBuf {
        self.out.join(format!("{method}_{forget_ratio}_{seed}.{ext}"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.effective.toml"), cfg.to_toml())?;
    Ok(())
}

fn load_store(cfg: &ExperimentConfig) -> Result<SampleStore> {
    let store = SampleStore::load(&cfg.dataset_path())?;
    if store.visual_dim != cfg.data.visual_dim
        || store.audio_dim != cfg.data.audio_dim
        || store.classes != cfg.data.classes
    {
        return Err(Error::config(
            "data",
            format!("{} does not match the configured dimensions", cfg.dataset_path().display()),
        ));
    }
    Ok(store)
}

fn train_test_split(cfg: &ExperimentConfig, store: &SampleStore) -> Result<(Vec<usize>, Vec<usize>)> {
    train_test(store.len(), 1.0 - DEFAULT_TEST_FRACTION, cfg.data_seed)
}

fn split_for(cfg: &ExperimentConfig, store: &SampleStore, forget_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let (train, test) = train_test_split(cfg, store)?;
    DatasetSplit::with_forget(train, test, forget_ratio, seed)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    prepare_out(cfg)?;
    let store = generate(&cfg.data, cfg.data_seed)?;
    let path = cfg.dataset_path();
    store.save(&path)?;
    Ok(path)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    require(&cfg.dataset_path())?;
    prepare_out(cfg)?;
    let store = load_store(cfg)?;
    let (train, _) = train_test_split(cfg, &store)?;
    let model = Model::init(cfg.dims(), cfg.model.activation.into(), cfg.data_seed)?;
    let (model, _) = train_original(model, &store, &train, &cfg.train, cfg.data_seed)?;
    let path = cfg.original_path();
    model.save(&path)?;
    Ok(path)
}

/// Runs one method on one split; `original` is only needed by the methods
/// that start from the trained model.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    store: &SampleStore,
    split: &DatasetSplit,
    original: Option<&Model>,
    seed: u64,
) -> Result<(Model, UnlearnTrace)> {
    let run = cfg.run_config(method, seed);
    let start = || original.ok_or_else(|| Error::MissingArtifact(cfg.original_path()));
    match method {
        Method::Retrain => retrain(store, split, cfg.dims(), cfg.model.activation.into(), &cfg.train, seed),
        Method::Ccu => ccu_unlearn(start()?, store, split, &run),
        Method::Finetune => finetune(start()?, store, split, &run),
        Method::NeggradPlus => neggrad_plus(start()?, store, split, &run),
    }
}

pub fn cmd_unlearn(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    require(&cfg.dataset_path())?;
    let needs_original = cfg.methods.iter().any(|&m| m != Method::Retrain);
    if needs_original {
        require(&cfg.original_path())?;
    }
    prepare_out(cfg)?;
    let store = load_store(cfg)?;
    let original = if needs_original {
        Some(Model::load(&cfg.original_path())?)
    } else {
        None
    };
    let mut written = Vec::new();
    for &fr in &cfg.forget_ratios {
        for &seed in &cfg.seeds {
            let split = split_for(cfg, &store, fr, seed)?;
            for &method in &cfg.methods {
                let (model, trace) = run_method(cfg, method, &store, &split, original.as_ref(), seed)?;
                let ckpt = cfg.run_path(method.name(), fr, seed, "ckpt");
                model.save(&ckpt)?;
                trace.save(&cfg.run_path(method.name(), fr, seed, "trace"), cfg.record_timing)?;
                written.push(ckpt);
            }
        }
    }
    Ok(written)
}

fn eval_names(cfg: &ExperimentConfig, only: Option<&str>) -> Vec<String> {
    match only {
        Some(m) => vec![m.to_string()],
        None => std::iter::once(ORIGINAL.to_string())
            .chain(cfg.methods.iter().map(|m| m.name().to_string()))
            .collect(),
    }
}

/// Evaluates one checkpoint on the split of (forget ratio, seed).
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    store: &SampleStore,
    method: &str,
    forget_ratio: f64,
    seed: u64,
) -> Result<RunMetrics> {
    let (ckpt, seconds) = if method == ORIGINAL {
        (cfg.original_path(), 0.0)
    } else {
        let ckpt = cfg.run_path(method, forget_ratio, seed, "ckpt");
        require(&ckpt)?;
        let trace = UnlearnTrace::load(&cfg.run_path(method, forget_ratio, seed, "trace"))?;
        (ckpt, trace.seconds)
    };
    require(&ckpt)?;
    let model = Model::load(&ckpt)?;
    let split = split_for(cfg, store, forget_ratio, seed)?;
    Ok(RunMetrics {
        method: method.to_string(),
        forget_ratio,
        seed,
        accuracy: accuracy_table(&model, store, &split)?,
        mia: mia_member_rate(&model, store, &split, seed)?,
        seconds,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, only: Option<&str>) -> Result<Vec<PathBuf>> {
    require(&cfg.dataset_path())?;
    prepare_out(cfg)?;
    let store = load_store(cfg)?;
    let mut written = Vec::new();
    for name in eval_names(cfg, only) {
        for &fr in &cfg.forget_ratios {
            for &seed in &cfg.seeds {
                let metrics = evaluate_run(cfg, &store, &name, fr, seed)?;
                let path = cfg.run_path(&name, fr, seed, "eval");
                fs::write(&path, toml::to_string(&metrics).expect("metrics are plain data"))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn load_metrics(path: &Path) -> Result<RunMetrics> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), 0, e.message()))
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    prepare_out(cfg)?;
    let mut runs = Vec::new();
    for name in eval_names(cfg, None) {
        for &fr in &cfg.forget_ratios {
            for &seed in &cfg.seeds {
                runs.push(load_metrics(&cfg.run_path(&name, fr, seed, "eval"))?);
            }
        }
    }
    let report = assemble_report(&runs)?;
    fs::write(cfg.report_path(), report.to_csv())?;
    fs::write(cfg.out.join("report.txt"), report.to_text())?;
    Ok(report)
}

pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cmd_gen_data(cfg)?;
    cmd_train(cfg)?;
    cmd_unlearn(cfg)?;
    cmd_eval(cfg, None)?;
    cmd_report(cfg)
}

/// Process exit status for an error: 2 configuration, 3 missing artifact,
/// 4 numerical abort, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::Diverged { .. }
        | Error::NonFiniteGradient(_)
        | Error::DegenerateBatch(_)
        | Error::DegenerateRetainBatch(_)
        | Error::Domain { .. } => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<String> {
    let (args, cmd) = match &cli.command {
        Command::GenData(a) => (a, "gen-data"),
        Command::Train(a) => (a, "train"),
        Command::Unlearn(a) => (a, "unlearn"),
        Command::Eval(a) => (a, "eval"),
        Command::Report(a) => (a, "report"),
        Command::Pipeline(a) => (a, "pipeline"),
    };
    let cfg = ExperimentConfig::load(&args.config)?.with_overrides(args)?;
    let summary = match cmd {
        "gen-data" => format!("wrote {}", cmd_gen_data(&cfg)?.display()),
        "train" => format!("wrote {}", cmd_train(&cfg)?.display()),
        "unlearn" => format!("wrote {} checkpoints", cmd_unlearn(&cfg)?.len()),
        "eval" => format!("wrote {} evaluations", cmd_eval(&cfg, args.method.as_deref())?.len()),
        "report" => format!("wrote {} ({} rows)", cfg.report_path().display(), cmd_report(&cfg)?.rows.len()),
        _ => format!("wrote {} ({} rows)", cfg.report_path().display(), cmd_pipeline(&cfg)?.rows.len()),
    };
    Ok(summary)
}
