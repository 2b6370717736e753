//! Bidirectional transformer encoder over layout token sequences.
//!
//! Token and learned absolute position embeddings feed `num_layers` pre-norm
//! blocks (norm, attention, residual, norm, feed-forward, residual) with full
//! self-attention: every non-PAD position attends to every non-PAD position.
//! A final norm and an untied projection produce per-position vocabulary
//! logits.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutSchema, TokenSequence, PAD_ID};
use crate::numerics::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const TENSORS_PER_LAYER: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 4 layers, 8 heads, 512-wide embeddings, 2048-wide feed-forward.
    pub fn full_size(schema: &LayoutSchema) -> Self {
        ModelConfig {
            num_layers: 4,
            num_heads: 8,
            embed_dim: 512,
            ffn_dim: 2048,
            max_seq_len: schema.max_seq_len(),
            vocab_size: schema.vocab().size(),
            dropout: 0.1,
        }
    }

    /// Desk-scale configuration: 2 layers, 4 heads, width 64, feed-forward 128.
    pub fn desk(schema: &LayoutSchema) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            embed_dim: 64,
            ffn_dim: 128,
            max_seq_len: schema.max_seq_len(),
            vocab_size: schema.vocab().size(),
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("model config: {m}")));
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("layer count, head count and widths must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 7 {
            return bad(format!("max_seq_len {} is below 7", self.max_seq_len));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, s, d, f) = (self.vocab_size, self.max_seq_len, self.embed_dim, self.ffn_dim);
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![s, d]),
        ];
        for l in 0..self.num_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_string(), vec![d]),
            ("final_ln.bias".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }
}

/// All learnable tensors, in the fixed order of [`ModelConfig::tensor_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (names, tensors) = config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::truncated_normal(&shape, INIT_STD, &mut rng)
            };
            (name, t)
        })
        .unzip();
    Ok(ModelParams {
        config: config.clone(),
        names,
        tensors,
    })
}

impl ModelParams {
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {n} with shape {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape` and returns their handles in order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if requires_grad { tape.param(t) } else { tape.constant(t) })
            .collect()
    }

    /// Logits `[batch, seq, vocab]` with dropout disabled.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let h = encode(&mut tape, &vars, &self.config, batch, None, None)?;
        let logits = project_logits(&mut tape, &vars, &self.config, h)?;
        let shape = vec![batch.batch, batch.seq, self.config.vocab_size];
        Tensor::new(shape, tape.value(logits).to_vec())
    }

    /// Attention weights `[num_layers, num_heads, seq, seq]` for one sequence.
    pub fn export_attention(&self, ids: &[u32]) -> Result<Tensor> {
        let batch = TokenBatch::from_ids(&[ids.to_vec()])?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let mut attn = Vec::new();
        encode(&mut tape, &vars, &self.config, &batch, None, Some(&mut attn))?;
        let s = batch.seq;
        let mut data = Vec::with_capacity(self.config.num_layers * self.config.num_heads * s * s);
        for v in attn {
            data.extend_from_slice(tape.value(v));
        }
        Tensor::new(vec![self.config.num_layers, self.config.num_heads, s, s], data)
    }

    /// Checks that this model can consume sequences built from `schema`.
    pub fn check_schema(&self, schema: &LayoutSchema) -> Result<()> {
        let v = schema.vocab().size();
        if self.config.vocab_size != v {
            return Err(Error::Contract(format!(
                "model vocabulary has {} tokens but the schema needs {v}",
                self.config.vocab_size
            )));
        }
        if self.config.max_seq_len < schema.max_seq_len() {
            return Err(Error::Contract(format!(
                "model handles {} positions but the schema needs {}",
                self.config.max_seq_len,
                schema.max_seq_len()
            )));
        }
        Ok(())
    }
}

/// A `[batch, seq]` matrix of token ids with per-position validity (non-PAD).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Pads rows to the longest one; PAD positions are invalid.
    pub fn from_ids(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::InvalidInput("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD_ID, seq - r.len()));
        }
        let valid = ids.iter().map(|&t| t != PAD_ID).collect();
        Ok(TokenBatch {
            ids,
            valid,
            batch: rows.len(),
            seq,
        })
    }

    /// Trims to the longest unpadded sequence; PAD positions are invalid.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<Self> {
        let rows: Vec<Vec<u32>> = seqs.into_iter().map(|s| s.ids[..s.unpadded_len()].to_vec()).collect();
        Self::from_ids(&rows)
    }
}

struct DropoutCtx {
    rate: f64,
    seed: u64,
    calls: u64,
}

impl DropoutCtx {
    fn apply(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.calls += 1;
        tape.dropout(v, self.rate, self.seed, self.calls)
    }
}

/// Training-time dropout settings for [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

fn layer_var(vars: &[Var], layer: usize, j: usize) -> Var {
    vars[2 + layer * TENSORS_PER_LAYER + j]
}

/// Runs the encoder trunk; returns final-normed hidden states `[batch * seq, dim]`.
/// When `attention` is given, each layer's attention probabilities are pushed to it.
pub fn encode(
    tape: &mut Tape,
    vars: &[Var],
    config: &ModelConfig,
    batch: &TokenBatch,
    dropout: Option<Dropout>,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (b, s, h) = (batch.batch, batch.seq, config.num_heads);
    if s > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence length {s} exceeds the model maximum {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let mut drop = dropout.filter(|d| d.rate > 0.0).map(|d| DropoutCtx {
        rate: d.rate,
        seed: d.seed,
        calls: 0,
    });

    let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = tape.embedding(vars[0], &ids)?;
    let pos = tape.embedding(vars[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(dc) = drop.as_mut() {
        x = dc.apply(tape, x)?;
    }

    // key mask, broadcast over heads and query rows: [b, h, s, s]
    let mut key_mask = Vec::with_capacity(b * h * s * s);
    for bi in 0..b {
        let row = &batch.valid[bi * s..(bi + 1) * s];
        for _ in 0..h * s {
            key_mask.extend_from_slice(row);
        }
    }
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    for l in 0..config.num_layers {
        let p = |j| layer_var(vars, l, j);
        let hn = tape.layer_norm(x, p(0), p(1), LAYER_NORM_EPS)?;
        let q = tape.matmul(hn, p(2))?;
        let q = tape.add_bias(q, p(3))?;
        // no key bias: it shifts every score of a query row equally
        let k = tape.matmul(hn, p(4))?;
        let v = tape.matmul(hn, p(5))?;
        let v = tape.add_bias(v, p(6))?;
        let q = tape.split_heads(q, b, s, h)?;
        let k = tape.split_heads(k, b, s, h)?;
        let v = tape.split_heads(v, b, s, h)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let mut probs = tape.softmax(scores, Some(&key_mask))?;
        if let Some(out) = attention.as_deref_mut() {
            out.push(probs);
        }
        if let Some(dc) = drop.as_mut() {
            probs = dc.apply(tape, probs)?;
        }
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.merge_heads(ctx)?;
        let a = tape.matmul(ctx, p(7))?;
        let mut a = tape.add_bias(a, p(8))?;
        if let Some(dc) = drop.as_mut() {
            a = dc.apply(tape, a)?;
        }
        x = tape.add(x, a)?;

        let hn = tape.layer_norm(x, p(9), p(10), LAYER_NORM_EPS)?;
        let f = tape.matmul(hn, p(11))?;
        let f = tape.add_bias(f, p(12))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p(13))?;
        let mut f = tape.add_bias(f, p(14))?;
        if let Some(dc) = drop.as_mut() {
            f = dc.apply(tape, f)?;
        }
        x = tape.add(x, f)?;
    }
    let base = 2 + config.num_layers * TENSORS_PER_LAYER;
    tape.layer_norm(x, vars[base], vars[base + 1], LAYER_NORM_EPS)
}

/// Output head: `[batch * seq, dim]` to `[batch * seq, vocab]`.
pub fn project_logits(tape: &mut Tape, vars: &[Var], config: &ModelConfig, hidden: Var) -> Result<Var> {
    let base = 2 + config.num_layers * TENSORS_PER_LAYER;
    let y = tape.matmul(hidden, vars[base + 2])?;
    tape.add_bias(y, vars[base + 3])
}
