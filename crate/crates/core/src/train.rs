//! Adam training of the prompt parameters on the base classes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::encoder::{ClassVocabulary, EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::objective::{contrastive_loss, kg_consistency_loss, total_loss, LossConfig};
use crate::prompt::{build_classifier, PromptState, SharedPrompt, TkeParams};
use crate::task::{generate_task, BatchSampler, Task};
use crate::tensor::Tensor;

/// Training aborts when the total loss exceeds this plus the largest value
/// the weighted consistency term can take (`4ω`).
pub const DIVERGENCE_LIMIT: f64 = 1e3;
pub const CHECKPOINT_FORMAT: &str = "tcp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which parameters exist and whether the consistency term is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "coop")]
    Coop,
    #[serde(rename = "kgcoop")]
    KgCoop,
    #[serde(rename = "tcp")]
    Tcp,
    #[serde(rename = "coop+tke")]
    CoopTke,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Coop, Mode::KgCoop, Mode::CoopTke, Mode::Tcp];

    pub fn has_tke(self) -> bool {
        matches!(self, Mode::Tcp | Mode::CoopTke)
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, Mode::Tcp | Mode::KgCoop)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Coop => "coop",
            Mode::KgCoop => "kgcoop",
            Mode::Tcp => "tcp",
            Mode::CoopTke => "coop+tke",
        }
    }

    /// Consistency weight actually applied.
    pub fn kg_weight(self, loss: &LossConfig) -> f64 {
        if self.uses_consistency() {
            loss.kg_weight
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("train.mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global max-norm clipping; off when absent.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub run_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tcp,
            learning_rate: 2e-3,
            batch_size: 32,
            epochs: 50,
            max_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            run_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, loss: &LossConfig) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("train.adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        if self.mode.uses_consistency() && !(loss.kg_weight > 0.0) {
            return Err(Error::config(
                "loss.kg_weight",
                format!("mode {} needs a positive consistency weight", self.mode),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let spe = train_len.div_ceil(self.batch_size.min(train_len).max(1));
        let steps = self.epochs * spe;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self {
            m: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Gradients are checked for NaN/Inf before
/// anything is modified.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::contract("parameter, gradient and state counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                param: names.get(i).copied().unwrap_or("?").to_string(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

/// One row of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub ce: f64,
    pub kg: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub step: usize,
    pub prompt: PromptState,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        self.config.train.mode
    }

    /// Refuse to continue a run under a different mode or encoder.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        if self.config.train.mode != config.train.mode {
            return Err(Error::Mismatch(format!(
                "checkpoint mode {} but run mode {}",
                self.config.train.mode, config.train.mode
            )));
        }
        check_encoder(&self.config.encoder, &config.encoder)?;
        if self.prompt.tke.is_some() != config.train.mode.has_tke() {
            return Err(Error::Mismatch("TKE presence differs from mode".into()));
        }
        let d = config.encoder.token_dim;
        if self.prompt.shared.tokens.shape() != [config.prompt.length, d] {
            return Err(Error::Mismatch(format!(
                "prompt tokens {:?} but config wants [{}, {d}]",
                self.prompt.shared.tokens.shape(),
                config.prompt.length
            )));
        }
        if let Some(tke) = &self.prompt.tke {
            let want_down = [config.encoder.output_dim, config.prompt.tke_mid_dim];
            let want_up = [config.prompt.tke_mid_dim, config.prompt.length * d];
            if tke.w_down.shape() != want_down || tke.w_up.shape() != want_up {
                return Err(Error::Mismatch("TKE shapes differ from config".into()));
            }
        }
        Ok(())
    }
}

fn check_encoder(saved: &EncoderConfig, wanted: &EncoderConfig) -> Result<()> {
    if saved != wanted {
        return Err(Error::Mismatch(format!(
            "checkpoint encoder {saved:?} differs from {wanted:?}"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(ckpt).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    ckpt.check_compatible(&ckpt.config)?;
    Ok(ckpt)
}

/// Frozen context shared by training and evaluation of one seed.
pub struct Experiment {
    pub config: RunConfig,
    pub encoder: FrozenEncoder,
    pub vocab: ClassVocabulary,
    pub task: Task,
    /// Zero-shot embeddings for all classes, current template length.
    pub w_clip: Tensor,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let encoder = FrozenEncoder::new(config.encoder.clone())?;
        Self::with_encoder(config, encoder)
    }

    /// Reuse an already built encoder (it must match `config.encoder`).
    /// Checksums of the encoder weights and of `W^clip`.
    pub fn frozen_checksums(&self) -> (u64, u64) {
        (self.encoder.checksum(), self.w_clip.checksum())
    }

    pub fn with_encoder(config: &RunConfig, encoder: FrozenEncoder) -> Result<Self> {
        config.validate()?;
        check_encoder(encoder.config(), &config.encoder)?;
        let vocab = ClassVocabulary::generate(
            config.task.num_classes,
            config.task.tokens_per_class,
            config.prompt.length,
            config.encoder.vocab_size,
            config.task.task_seed,
        )?;
        let task = generate_task(&config.task, &encoder, &vocab)?;
        let w_clip = encoder.encode_general_embeddings(&vocab)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            vocab,
            task,
            w_clip,
        })
    }

    pub fn base_vocab(&self) -> Result<ClassVocabulary> {
        self.vocab.subset(&self.task.base_classes)
    }

    pub fn new_vocab(&self) -> Result<ClassVocabulary> {
        self.vocab.subset(&self.task.new_classes)
    }

    pub fn w_clip_rows(&self, classes: &[usize]) -> Result<Tensor> {
        self.w_clip.select_rows(classes)
    }

    /// Initial prompt state for the configured mode.
    pub fn initial_prompt(&self) -> Result<PromptState> {
        let c = &self.config;
        let shared = SharedPrompt::init(c.prompt.init, c.prompt.length, &self.encoder, c.train.run_seed)?;
        let tke = if c.train.mode.has_tke() {
            Some(TkeParams::init(
                c.encoder.output_dim,
                c.prompt.tke_mid_dim,
                c.prompt.length,
                c.encoder.token_dim,
                c.prompt.tke_activation,
                c.prompt.tke_init_scale,
                c.train.run_seed,
            )?)
        } else {
            None
        };
        Ok(PromptState { shared, tke })
    }

    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        let prompt = self.initial_prompt()?;
        let adam = AdamState::new(&prompt.tensors());
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: 0,
            prompt,
            adam,
        })
    }
}

/// Per-step loss values on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub kg: f64,
    pub total: f64,
}

/// Build the training loss for `prompt` on a batch, returning the graph,
/// parameter vars and root so callers can differentiate.
pub fn training_loss(
    exp: &Experiment,
    prompt: &PromptState,
    features: &Tensor,
    labels: &[usize],
    trainable: bool,
) -> Result<(Graph, Vec<Var>, Var, StepLoss)> {
    let c = &exp.config;
    let base_vocab = exp.base_vocab()?;
    let mut g = Graph::new();
    let bound = exp.encoder.bind(&mut g);
    let vars = prompt.bind(&mut g, trainable);
    let w_clip = g.constant(exp.w_clip_rows(&exp.task.base_classes)?);
    let w = build_classifier(&mut g, &vars, &c.injection, w_clip, &bound, &base_vocab)?;
    let x = g.constant(features.clone());
    let ce = contrastive_loss(&mut g, x, labels, w, c.loss.temperature)?;
    let kg = kg_consistency_loss(&mut g, w_clip, w)?;
    let total = total_loss(&mut g, ce, kg, c.train.mode.kg_weight(&c.loss))?;
    let loss = StepLoss {
        ce: g.value(ce).item(),
        kg: g.value(kg).item(),
        total: g.value(total).item(),
    };
    Ok((g, vars.vars(), total, loss))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written at the end of the run, after every epoch when
    /// `checkpoint_every_epoch`, and with the last good state on divergence.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every_epoch: bool,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Continue `start` until the configured step budget is reached.
pub fn train_run(exp: &Experiment, start: Checkpoint, options: &TrainOptions) -> Result<TrainOutcome> {
    let c = &exp.config;
    start.check_compatible(c)?;
    let train = &exp.task.train_base;
    let sampler = BatchSampler::new(train.len(), c.train.batch_size, c.train.run_seed)?;
    let total_steps = c.train.total_steps(train.len());
    let spe = sampler.steps_per_epoch();
    let limit = divergence_limit(c.train.mode.kg_weight(&c.loss));
    let clock = Instant::now();

    let mut state = start;
    state.config = c.clone();
    let mut metrics = Vec::with_capacity(total_steps.saturating_sub(state.step));
    let names = state.prompt.names();

    while state.step < total_steps {
        let step = state.step;
        let (x, y) = train.gather(&sampler.batch(step));
        let (mut g, vars, root, loss) = training_loss(exp, &state.prompt, &x, &y, true)?;
        if !loss.total.is_finite() || loss.total > limit {
            if let Some(p) = &options.checkpoint_path {
                save_checkpoint(&state, p)?;
            }
            return Err(Error::Divergence { step, loss: loss.total });
        }
        g.backward(root)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        if let Some(max_norm) = c.train.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        let hyper = AdamHyper {
            lr: c.train.lr_at(step, total_steps),
            beta1: c.train.adam_beta1,
            beta2: c.train.adam_beta2,
            eps: c.train.adam_eps,
        };
        let mut params = state.prompt.tensors_mut();
        adam_step(&mut params, &grads, &names, &mut state.adam, hyper)?;
        state.step += 1;
        metrics.push(MetricRow {
            step,
            ce: loss.ce,
            kg: loss.kg,
            total: loss.total,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if options.checkpoint_every_epoch && state.step % spe == 0 {
            if let Some(p) = &options.checkpoint_path {
                save_checkpoint(&state, p)?;
            }
        }
    }
    if let Some(p) = &options.checkpoint_path {
        save_checkpoint(&state, p)?;
    }
    Ok(TrainOutcome {
        checkpoint: state,
        metrics,
    })
}

/// Divergence threshold for consistency weight `omega`. The consistency
/// loss between unit rows is at most 4, so only the contrastive part can
/// push the total past this.
pub fn divergence_limit(omega: f64) -> f64 {
    DIVERGENCE_LIMIT + 4.0 * omega
}

/// Metrics as CSV with columns `step,ce,kg,total`. Values use the shortest
/// round-trip representation so identical runs give identical bytes.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,ce,kg,total\n");
    for r in rows {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.ce, r.kg, r.total));
    }
    out
}

/// Wall-clock timings per step, kept apart from the deterministic metrics.
pub fn timing_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,wall_ms\n");
    for r in rows {
        out.push_str(&format!("{},{:.3}\n", r.step, r.wall_ms));
    }
    out
}
