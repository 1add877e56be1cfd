//! Two MLP encoders into a shared unit-norm embedding space, followed by a
//! concatenation + linear fusion classifier.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Activation, Gradients, ParamSlot, Tape, Tensor, Var};
use crate::data::SampleStore;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model.visual_dim", self.visual_dim),
            ("model.audio_dim", self.audio_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.embed_dim", self.embed_dim),
            ("model.classes", self.classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config("activation", format!("unknown `{other}`"))),
        }
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Silu => "silu",
        Activation::Tanh => "tanh",
    }
}

/// Which modality embeddings reach the fusion classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    All,
    /// Audio embedding replaced by zeros.
    VisualOnly,
    /// Visual embedding replaced by zeros.
    AudioOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::All, Mode::AudioOnly, Mode::VisualOnly];
}

/// Parameters that receive updates during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    #[default]
    All,
    /// Audio encoder frozen.
    VisualFusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionClassifier {
    /// `[2 * embed_dim, classes]`, visual rows first.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub activation: Activation,
    pub visual: Encoder,
    pub audio: Encoder,
    pub fusion: FusionClassifier,
}

/// Parameter names in declaration (and checkpoint) order.
pub const PARAM_NAMES: [&str; 10] = [
    "visual.w1",
    "visual.b1",
    "visual.w2",
    "visual.b2",
    "audio.w1",
    "audio.b1",
    "audio.w2",
    "audio.b2",
    "fusion.w",
    "fusion.b",
];

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-s..=s))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

impl Encoder {
    fn init<R: Rng>(rng: &mut R, input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            w1: glorot(rng, input, hidden),
            b1: Tensor::zeros(vec![hidden]),
            w2: glorot(rng, hidden, embed),
            b2: Tensor::zeros(vec![embed]),
        }
    }
}

impl Model {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(dims: ModelDims, activation: Activation, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = Encoder::init(&mut rng, dims.visual_dim, dims.hidden_dim, dims.embed_dim);
        let audio = Encoder::init(&mut rng, dims.audio_dim, dims.hidden_dim, dims.embed_dim);
        let fusion = FusionClassifier {
            w: glorot(&mut rng, 2 * dims.embed_dim, dims.classes),
            b: Tensor::zeros(vec![dims.classes]),
        };
        Ok(Self {
            dims,
            activation,
            visual,
            audio,
            fusion,
        })
    }

    pub fn params(&self) -> [&Tensor; 10] {
        let (v, a, f) = (&self.visual, &self.audio, &self.fusion);
        [&v.w1, &v.b1, &v.w2, &v.b2, &a.w1, &a.b1, &a.w2, &a.b2, &f.w, &f.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 10] {
        let (v, a, f) = (&mut self.visual, &mut self.audio, &mut self.fusion);
        [
            &mut v.w1, &mut v.b1, &mut v.w2, &mut v.b2, &mut a.w1, &mut a.b1, &mut a.w2,
            &mut a.b2, &mut f.w, &mut f.b,
        ]
    }

    /// Registers parameters on `tape`; parameters outside `scope` become
    /// constants.
    pub fn bind(&self, tape: &mut Tape, scope: TrainableScope) -> BoundModel {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if is_trainable(i, scope) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            params,
            activation: self.activation,
            embed_dim: self.dims.embed_dim,
        }
    }

    /// Wraps variables already on `tape` as this model's parameters, in
    /// `params()` order.
    pub fn bind_vars(&self, params: &[Var]) -> Result<BoundModel> {
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::ShapeMismatch {
                op: "bind_vars",
                lhs: vec![params.len()],
                rhs: vec![PARAM_NAMES.len()],
            });
        }
        Ok(BoundModel {
            params: params.to_vec(),
            activation: self.activation,
            embed_dim: self.dims.embed_dim,
        })
    }

    /// SGD update of every parameter in `scope` from gradients of a bound
    /// forward pass.
    pub fn apply_gradients(
        &mut self,
        tape: &Tape,
        bound: &BoundModel,
        grads: &Gradients,
        lr: f64,
        scope: TrainableScope,
    ) -> Result<()> {
        let mut slots = Vec::new();
        let mut g = Vec::new();
        for (i, value) in self.params_mut().into_iter().enumerate() {
            if is_trainable(i, scope) {
                g.push(grads.get(tape, bound.params[i]));
                slots.push(ParamSlot {
                    name: PARAM_NAMES[i],
                    value,
                });
            }
        }
        sgd_step(&mut slots, &g, lr)
    }

    /// Unit-norm visual embeddings of the selected samples, `[n, embed_dim]`.
    pub fn embed_visual(&self, store: &SampleStore, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, TrainableScope::All);
        let x = tape.constant(store.visual_matrix(indices)?);
        let m = bound.embed_visual(&mut tape, x)?;
        Ok(tape.value(m).clone())
    }

    pub fn embed_audio(&self, store: &SampleStore, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, TrainableScope::All);
        let x = tape.constant(store.audio_matrix(indices)?);
        let n = bound.embed_audio(&mut tape, x)?;
        Ok(tape.value(n).clone())
    }

    /// Logits `[n, classes]` of the selected samples under `mode`.
    pub fn logits(&self, store: &SampleStore, indices: &[usize], mode: Mode) -> Result<Tensor> {
        let visual = store.visual_matrix(indices)?;
        let audio = store.audio_matrix(indices)?;
        self.classify(visual, audio, mode)
    }

    /// Logits for raw feature matrices (`[n, visual_dim]`, `[n, audio_dim]`).
    pub fn classify(&self, visual: Tensor, audio: Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, TrainableScope::All);
        let xv = tape.constant(visual);
        let xa = tape.constant(audio);
        let logits = bound.classify(&mut tape, xv, xa, mode)?;
        Ok(tape.value(logits).clone())
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut out = format!(
            "ccu-model visual_dim={} audio_dim={} hidden_dim={} embed_dim={} classes={} activation={}\n",
            d.visual_dim,
            d.audio_dim,
            d.hidden_dim,
            d.embed_dim,
            d.classes,
            activation_name(self.activation)
        );
        for (name, t) in PARAM_NAMES.iter().zip(self.params()) {
            let _ = writeln!(out, "# {name} {:?}", t.shape());
            for &x in t.data() {
                let _ = writeln!(out, "{x:.16e}");
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty checkpoint"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ccu-model") {
            return Err(Error::parse(origin, 1, "not a ccu-model checkpoint"));
        }
        let mut get = |key: &str| -> Result<String> {
            let tok = fields
                .next()
                .ok_or_else(|| Error::parse(origin, 1, format!("missing `{key}`")))?;
            tok.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::parse(origin, 1, format!("expected `{key}=`, found `{tok}`")))
        };
        let mut dim = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| Error::parse(origin, 1, format!("{key}: {e}")))
        };
        let dims = ModelDims {
            visual_dim: dim("visual_dim")?,
            audio_dim: dim("audio_dim")?,
            hidden_dim: dim("hidden_dim")?,
            embed_dim: dim("embed_dim")?,
            classes: dim("classes")?,
        };
        let activation: Activation = get("activation")?.parse()?;
        let mut model = Model::init(dims, activation, 0)?;

        let mut values = Vec::new();
        let mut last_line = 1;
        for (i, line) in lines {
            last_line = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            values.push(
                line.parse::<f64>()
                    .map_err(|e| Error::parse(origin, i + 1, format!("bad value: {e}")))?,
            );
        }
        let expected: usize = model.params().iter().map(|t| t.numel()).sum();
        if values.len() != expected {
            return Err(Error::parse(
                origin,
                last_line,
                format!("expected {expected} parameter values, found {}", values.len()),
            ));
        }
        let mut rest = &values[..];
        for p in model.params_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&rest[..n]);
            rest = &rest[n..];
        }
        Ok(model)
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

fn is_trainable(param: usize, scope: TrainableScope) -> bool {
    match scope {
        TrainableScope::All => true,
        TrainableScope::VisualFusion => !PARAM_NAMES[param].starts_with("audio."),
    }
}

/// A [`Model`]'s parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    params: Vec<Var>,
    activation: Activation,
    embed_dim: usize,
}

impl BoundModel {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn encode(&self, tape: &mut Tape, x: Var, offset: usize) -> Result<Var> {
        let p = &self.params[offset..offset + 4];
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.activation(h, self.activation);
        let e = tape.matmul(h, p[2])?;
        let e = tape.add_row(e, p[3])?;
        tape.l2_normalize(e, 1)
    }

    /// `[n, visual_dim]` features to `[n, embed_dim]` unit-norm embeddings.
    pub fn embed_visual(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encode(tape, x, 0)
    }

    pub fn embed_audio(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encode(tape, x, 4)
    }

    /// Fusion logits from embeddings; `None` stands for a zero embedding.
    pub fn fuse(&self, tape: &mut Tape, visual: Option<Var>, audio: Option<Var>) -> Result<Var> {
        let rows = visual
            .or(audio)
            .map(|v| tape.shape(v)[0])
            .ok_or(Error::EmptyAxis { op: "fuse" })?;
        let zeros = |tape: &mut Tape| tape.constant(Tensor::zeros(vec![rows, self.embed_dim]));
        let m = match visual {
            Some(v) => v,
            None => zeros(tape),
        };
        let n = match audio {
            Some(a) => a,
            None => zeros(tape),
        };
        let joint = tape.concat(&[m, n], 1)?;
        let logits = tape.matmul(joint, self.params[8])?;
        tape.add_row(logits, self.params[9])
    }

    pub fn classify(&self, tape: &mut Tape, visual: Var, audio: Var, mode: Mode) -> Result<Var> {
        let m = match mode {
            Mode::All | Mode::VisualOnly => Some(self.embed_visual(tape, visual)?),
            Mode::AudioOnly => None,
        };
        let n = match mode {
            Mode::All | Mode::AudioOnly => Some(self.embed_audio(tape, audio)?),
            Mode::VisualOnly => None,
        };
        self.fuse(tape, m, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.5,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One epoch of mode=all cross-entropy SGD over `indices` in a seeded
/// shuffled order. Returns the mean batch loss.
pub(crate) fn cross_entropy_epoch<R: Rng>(
    model: &mut Model,
    store: &SampleStore,
    indices: &[usize],
    cfg: &TrainConfig,
    scope: TrainableScope,
    rng: &mut R,
    context: &str,
) -> Result<f64> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for batch in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, scope);
        let xv = tape.constant(store.visual_matrix(batch)?);
        let xa = tape.constant(store.audio_matrix(batch)?);
        let logits = bound.classify(&mut tape, xv, xa, Mode::All)?;
        let loss = cross_entropy(&mut tape, logits, &store.labels(batch))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                context: format!("{context}, batch {batches}"),
                value,
            });
        }
        let grads = tape.backward(loss)?;
        model.apply_gradients(&tape, &bound, &grads, cfg.lr, scope)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Joint-training of the full model on `indices` by minibatch SGD on the
/// mode=all cross-entropy. Returns the trained model and per-epoch mean loss.
pub fn train_original(
    mut model: Model,
    store: &SampleStore,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptySet("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = cross_entropy_epoch(
            &mut model,
            store,
            indices,
            cfg,
            TrainableScope::All,
            &mut rng,
            &format!("training epoch {epoch}"),
        )?;
        trace.push(loss);
    }
    Ok((model, trace))
}
