//! Learnable prompts: the domain-shared context tokens, the textual knowledge
//! embedding (TKE) that turns frozen class embeddings into class-aware prompt
//! tokens, and their injection into an intermediate encoder layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{BoundEncoder, ClassVocabulary, FrozenEncoder, EOT_ID};
use crate::error::{Error, Result};
use crate::rng::{tags, SplitMix64};
use crate::tensor::Tensor;

/// Standard deviation of the random context-token initialisation.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    Random,
    TemplateEmbedding,
}

/// The `M × D` context tokens shared by every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedPrompt {
    pub tokens: Tensor,
    pub init: PromptInit,
}

impl SharedPrompt {
    pub fn init(init: PromptInit, len: usize, encoder: &FrozenEncoder, run_seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("prompt.length", "must be at least 1"));
        }
        let d = encoder.config().token_dim;
        let tokens = match init {
            PromptInit::Random => {
                let mut rng = SplitMix64::derive(run_seed, tags::PROMPT_INIT);
                Tensor::new(vec![len, d], rng.normal_vec(len * d, PROMPT_INIT_STD))?
            }
            PromptInit::TemplateEmbedding => {
                let ids: Vec<usize> = (1..=len).collect();
                encoder.embed_tokens(&ids)?
            }
        };
        Ok(Self { tokens, init })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TkeActivation {
    #[default]
    Relu,
    Linear,
}

/// Down/up projection bottleneck, `D_t -> D_mid -> M·D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TkeParams {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub prompt_len: usize,
    pub token_dim: usize,
    pub activation: TkeActivation,
}

impl TkeParams {
    /// `W_down ~ N(0, 1/D_t)`, `W_up ~ N(0, up_scale²/D_mid)`.
    pub fn init(
        output_dim: usize,
        mid_dim: usize,
        prompt_len: usize,
        token_dim: usize,
        activation: TkeActivation,
        up_scale: f64,
        run_seed: u64,
    ) -> Result<Self> {
        if mid_dim == 0 {
            return Err(Error::config("prompt.tke_mid_dim", "must be positive"));
        }
        let mut rng = SplitMix64::derive(run_seed, tags::TKE_INIT);
        let out = prompt_len * token_dim;
        let w_down = Tensor::new(
            vec![output_dim, mid_dim],
            rng.normal_vec(output_dim * mid_dim, 1.0 / (output_dim as f64).sqrt()),
        )?;
        let w_up = Tensor::new(
            vec![mid_dim, out],
            rng.normal_vec(mid_dim * out, up_scale / (mid_dim as f64).sqrt()),
        )?;
        let tke = Self {
            w_down,
            w_up,
            prompt_len,
            token_dim,
            activation,
        };
        tke.validate()?;
        Ok(tke)
    }

    pub fn mid_dim(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let up = self.w_up.shape();
        if self.w_down.rank() != 2 || up.len() != 2 || up[0] != self.w_down.shape()[1] {
            return Err(Error::Shape {
                op: "tke",
                lhs: self.w_down.shape().to_vec(),
                rhs: up.to_vec(),
            });
        }
        if up[1] != self.prompt_len * self.token_dim {
            return Err(Error::config(
                "prompt.tke",
                format!(
                    "up-projection width {} differs from M·D = {}·{}",
                    up[1], self.prompt_len, self.token_dim
                ),
            ));
        }
        Ok(())
    }
}

/// Where and how class-aware tokens enter the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    /// Layer `l` after which tokens are injected (1-based).
    pub insert_layer: usize,
    /// Multi-layer mode; empty means `[insert_layer]`.
    pub layers: Vec<usize>,
    /// Fusion weight: 1 replaces the first `M` slots, 0 leaves them alone.
    pub fusion_weight: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self::for_depth(6)
    }
}

impl InjectionConfig {
    /// Single-layer injection at `ceil(2L/3)`.
    pub fn for_depth(num_layers: usize) -> Self {
        Self {
            insert_layer: (2 * num_layers).div_ceil(3).max(1),
            layers: Vec::new(),
            fusion_weight: 1.0,
        }
    }

    pub fn injection_layers(&self) -> Vec<usize> {
        if self.layers.is_empty() {
            vec![self.insert_layer]
        } else {
            self.layers.clone()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let layers = self.injection_layers();
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
            let key = if self.layers.is_empty() {
                "injection.insert_layer"
            } else {
                "injection.layers"
            };
            return Err(Error::config(key, format!("layer {bad} outside [1, {num_layers}]")));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("injection.layers", "must be strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::config("injection.fusion_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Trainable state: context tokens plus an optional TKE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub shared: SharedPrompt,
    pub tke: Option<TkeParams>,
}

impl PromptState {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.shared.tokens];
        if let Some(t) = &self.tke {
            out.push(&t.w_down);
            out.push(&t.w_up);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.shared.tokens];
        if let Some(t) = &mut self.tke {
            out.push(&mut t.w_down);
            out.push(&mut t.w_up);
        }
        out
    }

    pub fn names(&self) -> Vec<&'static str> {
        if self.tke.is_some() {
            vec!["prompt.tokens", "tke.w_down", "tke.w_up"]
        } else {
            vec!["prompt.tokens"]
        }
    }

    pub fn checksum(&self) -> u64 {
        self.tensors().iter().fold(0u64, |h, t| h.rotate_left(11) ^ t.checksum())
    }

    /// Insert into `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PromptVars {
        let shared = g.leaf(self.shared.tokens.clone(), trainable);
        let tke = self.tke.as_ref().map(|t| TkeVars {
            w_down: g.leaf(t.w_down.clone(), trainable),
            w_up: g.leaf(t.w_up.clone(), trainable),
            prompt_len: t.prompt_len,
            token_dim: t.token_dim,
            activation: t.activation,
        });
        PromptVars { shared, tke }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TkeVars {
    pub w_down: Var,
    pub w_up: Var,
    pub prompt_len: usize,
    pub token_dim: usize,
    pub activation: TkeActivation,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub shared: Var,
    pub tke: Option<TkeVars>,
}

impl PromptVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.shared];
        if let Some(t) = self.tke {
            out.push(t.w_down);
            out.push(t.w_up);
        }
        out
    }
}

/// `reshape(act(W_clip · W_down) · W_up, [N_c, M, D])`.
pub fn tke_forward(g: &mut Graph, w_clip: Var, tke: &TkeVars) -> Result<Var> {
    let width = g.shape(tke.w_up).get(1).copied().unwrap_or(0);
    if width != tke.prompt_len * tke.token_dim {
        return Err(Error::config(
            "prompt.tke",
            format!("D' = {width} but M·D = {}", tke.prompt_len * tke.token_dim),
        ));
    }
    let n_c = g.shape(w_clip)[0];
    let low = g.matmul(w_clip, tke.w_down)?;
    let low = match tke.activation {
        TkeActivation::Relu => g.relu(low),
        TkeActivation::Linear => low,
    };
    let high = g.matmul(low, tke.w_up)?;
    g.reshape(high, &[n_c, tke.prompt_len, tke.token_dim])
}

/// `F_0`: per class, `[shared tokens; class-name embeddings; EOT]`.
pub fn assemble_input_tokens(
    g: &mut Graph,
    shared: Var,
    vocab: &ClassVocabulary,
    encoder: &FrozenEncoder,
) -> Result<Var> {
    let cfg = encoder.config();
    let m = g.shape(shared)[0];
    let k = vocab.tokens_per_class();
    if m + k + 1 != cfg.seq_len {
        return Err(Error::contract(format!(
            "M + K_c + 1 = {m} + {k} + 1 differs from seq_len {}",
            cfg.seq_len
        )));
    }
    let n_c = vocab.num_classes();
    let mut tail = Vec::with_capacity(n_c * (k + 1) * cfg.token_dim);
    for class in &vocab.class_tokens {
        let ids: Vec<usize> = class.iter().copied().chain(std::iter::once(EOT_ID)).collect();
        tail.extend(encoder.embed_tokens(&ids)?.into_data());
    }
    let tail = g.constant(Tensor::new(vec![n_c, k + 1, cfg.token_dim], tail)?);
    let head = g.broadcast(shared, n_c);
    g.concat(&[head, tail], 1)
}

/// Replace (or blend into) the first `M` positions of `f_l` with `t`.
pub fn inject_class_prompt(g: &mut Graph, f_l: Var, t: Var, fusion_weight: f64) -> Result<Var> {
    let (fs, ts) = (g.shape(f_l).to_vec(), g.shape(t).to_vec());
    if fs.len() != 3 || ts.len() != 3 || fs[0] != ts[0] || fs[2] != ts[2] {
        return Err(Error::Shape {
            op: "inject_class_prompt",
            lhs: fs,
            rhs: ts,
        });
    }
    let (m, n_t) = (ts[1], fs[1]);
    if m > n_t {
        return Err(Error::contract(format!("prompt length {m} exceeds sequence length {n_t}")));
    }
    if !(0.0..=1.0).contains(&fusion_weight) {
        return Err(Error::contract(format!("fusion weight {fusion_weight} outside [0, 1]")));
    }
    if fusion_weight == 0.0 {
        return Ok(f_l);
    }
    let rest = g.slice(f_l, 1, m, n_t)?;
    let head = if fusion_weight == 1.0 {
        t
    } else {
        let old = g.slice(f_l, 1, 0, m)?;
        let a = g.scale(t, fusion_weight);
        let b = g.scale(old, 1.0 - fusion_weight);
        g.add(a, b)?
    };
    g.concat(&[head, rest], 1)
}

/// Run the prompted encoder and read out one unit-norm embedding per class.
///
/// Without a TKE this is the plain context-prompt classifier and the
/// injection config is ignored.
pub fn build_classifier(
    g: &mut Graph,
    prompt: &PromptVars,
    injection: &InjectionConfig,
    w_clip: Var,
    encoder: &BoundEncoder<'_>,
    vocab: &ClassVocabulary,
) -> Result<Var> {
    let enc = encoder.encoder();
    let num_layers = enc.config().num_layers;
    if g.shape(w_clip)[0] != vocab.num_classes() {
        return Err(Error::contract(format!(
            "{} W_clip rows for {} classes",
            g.shape(w_clip)[0],
            vocab.num_classes()
        )));
    }
    let mut x = assemble_input_tokens(g, prompt.shared, vocab, enc)?;
    let mut done = 0;
    if let Some(tke) = &prompt.tke {
        injection.validate(num_layers)?;
        let t = tke_forward(g, w_clip, tke)?;
        for layer in injection.injection_layers() {
            x = encoder.forward_range(g, x, done + 1, layer)?;
            x = inject_class_prompt(g, x, t, injection.fusion_weight)?;
            done = layer;
        }
    }
    x = encoder.forward_range(g, x, done + 1, num_layers)?;
    encoder.readout_class_embedding(g, x)
}

/// [`build_classifier`] on a fresh graph, no gradients.
pub fn classifier_value(
    prompt: &PromptState,
    injection: &InjectionConfig,
    w_clip: &Tensor,
    encoder: &FrozenEncoder,
    vocab: &ClassVocabulary,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g);
    let vars = prompt.bind(&mut g, false);
    let w = g.constant(w_clip.clone());
    let out = build_classifier(&mut g, &vars, injection, w, &bound, vocab)?;
    Ok(g.value(out).clone())
}
