//! Fixed-weight transformer text encoder.
//!
//! Weights are drawn once from the `weight_seed` stream in this order, every
//! entry `N(0, 1) / sqrt(D)`:
//!
//! 1. token table, `vocab_size × D`
//! 2. for each layer: `W_q, W_k, W_v, W_o` (`D × D`), `W_1` (`D × rD`),
//!    `W_2` (`rD × D`)
//! 3. readout projection, `D × D_t`
//!
//! Layer-norm gains are one and biases zero. Linear maps carry no bias.
//! Blocks are pre-norm with bidirectional attention, and there are no
//! positional embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{tags, SplitMix64};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Id of the end-of-text token.
pub const EOT_ID: usize = 0;
/// Template ids are `1..=M`; ids up to this bound are reserved for them.
pub const MAX_PROMPT_LEN: usize = 16;
/// First id available for class-name tokens.
pub const FIRST_CLASS_ID: usize = 1 + MAX_PROMPT_LEN;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub output_dim: usize,
    pub vocab_size: usize,
    /// Sequence length `M + K_c + 1`.
    pub seq_len: usize,
    pub weight_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            token_dim: 32,
            num_heads: 4,
            mlp_ratio: 4,
            output_dim: 32,
            vocab_size: 256,
            seq_len: 8,
            weight_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.num_layers", self.num_layers),
            ("encoder.token_dim", self.token_dim),
            ("encoder.num_heads", self.num_heads),
            ("encoder.mlp_ratio", self.mlp_ratio),
            ("encoder.output_dim", self.output_dim),
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.seq_len", self.seq_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.token_dim % self.num_heads != 0 {
            return Err(Error::config(
                "encoder.num_heads",
                format!("{} does not divide token_dim {}", self.num_heads, self.token_dim),
            ));
        }
        if self.vocab_size <= FIRST_CLASS_ID {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("must exceed the {FIRST_CLASS_ID} reserved ids"),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerWeights {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w1: Tensor,
    w2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.w2,
        ]
    }
}

/// The frozen text encoder. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    token_table: Tensor,
    layers: Vec<LayerWeights>,
    readout: Tensor,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let hidden = d * config.mlp_ratio;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::derive(config.weight_seed, tags::ENCODER_WEIGHTS);
        let mut draw = |rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, std)).expect("sized")
        };
        let token_table = draw(config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: draw(d, hidden),
                w2: draw(hidden, d),
            })
            .collect();
        let readout = draw(d, config.output_dim);
        Ok(Self {
            config,
            token_table,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_table(&self) -> &Tensor {
        &self.token_table
    }

    /// Fingerprint over every weight tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = self.token_table.checksum();
        for layer in &self.layers {
            for t in layer.tensors() {
                h = h.rotate_left(7) ^ t.checksum();
            }
        }
        h.rotate_left(7) ^ self.readout.checksum()
    }

    /// Rows of the token table, `[ids.len() × D]`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let vocab_size = self.config.vocab_size;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size });
        }
        self.token_table.select_rows(ids)
    }

    /// Load the frozen weights into `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundEncoder<'_> {
        let layers = self
            .layers
            .iter()
            .map(|w| LayerVars {
                ln1_gain: g.constant(w.ln1_gain.clone()),
                ln1_bias: g.constant(w.ln1_bias.clone()),
                wq: g.constant(w.wq.clone()),
                wk: g.constant(w.wk.clone()),
                wv: g.constant(w.wv.clone()),
                wo: g.constant(w.wo.clone()),
                ln2_gain: g.constant(w.ln2_gain.clone()),
                ln2_bias: g.constant(w.ln2_bias.clone()),
                w1: g.constant(w.w1.clone()),
                w2: g.constant(w.w2.clone()),
            })
            .collect();
        let readout = g.constant(self.readout.clone());
        BoundEncoder {
            encoder: self,
            layers,
            readout,
        }
    }

    /// Value-level `forward_range` on a fresh graph.
    pub fn forward_range_value(&self, tokens: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(tokens.clone());
        let y = bound.forward_range(&mut g, x, from, to)?;
        Ok(g.value(y).clone())
    }

    /// Full forward plus readout, without gradients.
    pub fn encode_value(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(tokens.clone());
        let y = bound.forward_range(&mut g, x, 1, self.config.num_layers)?;
        let out = bound.readout_class_embedding(&mut g, y)?;
        Ok(g.value(out).clone())
    }

    /// Zero-shot class embeddings from `[template; class tokens; EOT]`.
    /// Returned unit-normalized and detached.
    pub fn encode_general_embeddings(&self, vocab: &ClassVocabulary) -> Result<Tensor> {
        let nt = vocab.template_ids.len() + vocab.tokens_per_class() + 1;
        if nt != self.config.seq_len {
            return Err(Error::contract(format!(
                "template sequence length {nt} differs from encoder seq_len {}",
                self.config.seq_len
            )));
        }
        self.encode_templated(vocab)
    }

    /// Like [`Self::encode_general_embeddings`] for any template length.
    pub fn encode_templated(&self, vocab: &ClassVocabulary) -> Result<Tensor> {
        let nt = vocab.template_ids.len() + vocab.tokens_per_class() + 1;
        let mut data = Vec::with_capacity(vocab.num_classes() * nt * self.config.token_dim);
        for class in &vocab.class_tokens {
            let ids: Vec<usize> = vocab
                .template_ids
                .iter()
                .chain(class)
                .copied()
                .chain(std::iter::once(EOT_ID))
                .collect();
            data.extend(self.embed_tokens(&ids)?.into_data());
        }
        let tokens = Tensor::new(vec![vocab.num_classes(), nt, self.config.token_dim], data)?;
        self.encode_value(&tokens)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    w2: Var,
}

/// Encoder weights resident in one [`Graph`].
pub struct BoundEncoder<'a> {
    encoder: &'a FrozenEncoder,
    layers: Vec<LayerVars>,
    readout: Var,
}

impl BoundEncoder<'_> {
    pub fn encoder(&self) -> &FrozenEncoder {
        self.encoder
    }

    pub fn weight_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.w1, l.w2,
            ]);
        }
        out.push(self.readout);
        out
    }

    /// Block `layer` (1-based) on `[N_c × N_t × D]`; attention stays within
    /// each class's sequence.
    pub fn layer_forward(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let cfg = &self.encoder.config;
        if layer == 0 || layer > cfg.num_layers {
            return Err(Error::contract(format!(
                "layer {layer} outside [1, {}]",
                cfg.num_layers
            )));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.token_dim {
            return Err(Error::Shape {
                op: "encoder_layer",
                lhs: shape,
                rhs: vec![0, 0, cfg.token_dim],
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (cfg.num_heads, cfg.head_dim());
        let w = self.layers[layer - 1];

        let normed = g.layer_norm(x, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;
        let heads = |g: &mut Graph, proj: Var| -> Result<Var> {
            let p = g.matmul(normed, proj)?;
            let p = g.reshape(p, &[b, n, h, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[b * h, n, dh])
        };
        let q = heads(g, w.wq)?;
        let k = heads(g, w.wk)?;
        let v = heads(g, w.wv)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        let attn_out = g.matmul(ctx, w.wo)?;
        let x = g.add(x, attn_out)?;

        let normed = g.layer_norm(x, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)?;
        let hidden = g.matmul(normed, w.w1)?;
        let hidden = g.gelu(hidden);
        let mlp_out = g.matmul(hidden, w.w2)?;
        g.add(x, mlp_out)
    }

    /// Layers `from..=to`; `from == to + 1` is the empty range.
    pub fn forward_range(&self, g: &mut Graph, x: Var, from: usize, to: usize) -> Result<Var> {
        let l = self.encoder.config.num_layers;
        if from < 1 || from > to + 1 || to > l {
            return Err(Error::contract(format!(
                "layer range [{from}, {to}] invalid for {l} layers"
            )));
        }
        (from..=to).try_fold(x, |acc, i| self.layer_forward(g, i, acc))
    }

    /// EOT position, projected to `D_t`, rows unit-normalized.
    pub fn readout_class_embedding(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(Error::contract(format!("readout expects [N_c × N_t × D], got {shape:?}")));
        }
        let eot = g.slice(tokens, 1, shape[1] - 1, shape[1])?;
        let eot = g.reshape(eot, &[shape[0], shape[2]])?;
        let projected = g.matmul(eot, self.readout)?;
        g.l2_normalize(projected)
    }
}

/// Class-name token ids plus the hand-crafted template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub class_tokens: Vec<Vec<usize>>,
    pub template_ids: Vec<usize>,
}

impl ClassVocabulary {
    /// Template ids `1..=prompt_len`; class tokens drawn without replacement
    /// from `[FIRST_CLASS_ID, vocab_size)` by the task seed.
    pub fn generate(
        num_classes: usize,
        tokens_per_class: usize,
        prompt_len: usize,
        vocab_size: usize,
        task_seed: u64,
    ) -> Result<Self> {
        if prompt_len == 0 || prompt_len > MAX_PROMPT_LEN {
            return Err(Error::config(
                "prompt.length",
                format!("must be in [1, {MAX_PROMPT_LEN}]"),
            ));
        }
        if tokens_per_class == 0 {
            return Err(Error::config("task.tokens_per_class", "must be positive"));
        }
        let needed = num_classes * tokens_per_class;
        let available = vocab_size.saturating_sub(FIRST_CLASS_ID);
        if needed > available {
            return Err(Error::config(
                "task.num_classes",
                format!("{needed} class tokens needed but only {available} ids available"),
            ));
        }
        let mut pool: Vec<usize> = (FIRST_CLASS_ID..vocab_size).collect();
        SplitMix64::derive(task_seed, tags::VOCABULARY).shuffle(&mut pool);
        let class_tokens = pool[..needed]
            .chunks(tokens_per_class)
            .map(<[usize]>::to_vec)
            .collect();
        Ok(Self {
            class_tokens,
            template_ids: (1..=prompt_len).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn tokens_per_class(&self) -> usize {
        self.class_tokens.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, classes: &[usize]) -> Result<Self> {
        let class_tokens = classes
            .iter()
            .map(|&c| {
                self.class_tokens
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("class {c} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            class_tokens,
            template_ids: self.template_ids.clone(),
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let k = self.tokens_per_class();
        for (i, c) in self.class_tokens.iter().enumerate() {
            if c.len() != k {
                return Err(Error::contract(format!("class {i} has {} tokens, expected {k}", c.len())));
            }
            if let Some(&id) = c.iter().chain(&self.template_ids).find(|&&id| id >= vocab_size) {
                return Err(Error::Vocabulary { id, vocab_size });
            }
        }
        let mut sorted = self.class_tokens.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("class token sequences are not distinct"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig {
            num_layers: 3,
            token_dim: 8,
            num_heads: 2,
            output_dim: 6,
            seq_len: 5,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            num_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn embed_lookup() {
        let enc = small();
        let e = enc.embed_tokens(&[7, 7]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(0), enc.token_table().row(7));
        assert_eq!(enc.embed_tokens(&[]).unwrap().shape(), &[0, 8]);
        assert!(matches!(enc.embed_tokens(&[256]), Err(Error::Vocabulary { id: 256, .. })));
    }

    #[test]
    fn same_config_same_weights() {
        assert_eq!(small().checksum(), small().checksum());
        let other = FrozenEncoder::new(EncoderConfig {
            weight_seed: 1,
            ..small().config().clone()
        })
        .unwrap();
        assert_ne!(small().checksum(), other.checksum());
    }

    #[test]
    fn layer_index_checked() {
        let enc = small();
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 5, 8]));
        assert!(b.layer_forward(&mut g, 0, x).is_err());
        assert!(b.layer_forward(&mut g, 4, x).is_err());
        assert!(b.forward_range(&mut g, x, 3, 1).is_err());
        let same = b.forward_range(&mut g, x, 2, 1).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn vocabulary_generation() {
        let v = ClassVocabulary::generate(20, 3, 4, 256, 9).unwrap();
        assert_eq!(v.num_classes(), 20);
        assert_eq!(v.template_ids, vec![1, 2, 3, 4]);
        v.validate(256).unwrap();
        let all: Vec<usize> = v.class_tokens.concat();
        assert!(all.iter().all(|&id| id >= FIRST_CLASS_ID));
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
        assert_eq!(v, ClassVocabulary::generate(20, 3, 4, 256, 9).unwrap());
        assert!(ClassVocabulary::generate(100, 3, 4, 256, 9).is_err());
        assert!(ClassVocabulary::generate(2, 3, 17, 256, 9).is_err());
    }

    #[test]
    fn readout_zero_row_is_degenerate() {
        let enc = small();
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 5, 8]));
        assert!(matches!(
            b.readout_class_embedding(&mut g, x),
            Err(Error::Degenerate { .. })
        ));
    }
}
