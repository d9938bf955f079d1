//! BERT-style encoder, Transformer decoder with cross-attention, and the MLM
//! and classification heads.
//!
//! Parameters live in a [`ParamStore`] keyed by name. A forward pass runs in a
//! [`Session`], which binds the parameters it touches into a fresh autodiff
//! [`Graph`] and can return their gradients after the loss is built.
//!
//! Layout (post-layer-norm, as in BERT):
//!
//! ```text
//! ids ─► word + position + segment ─► LN ─► [self-attn ─► add&LN ─► FFN ─► add&LN] × L ─► hidden
//! target ─► word + position ─► LN ─► [causal self-attn ─► add&LN ─► cross-attn ─► add&LN ─► FFN ─► add&LN] × D ─► vocab logits
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Additive attention bias for disallowed positions.
const MASKED_SCORE: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder layers.
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_segments: usize,
    pub dropout_rate: f64,
    /// 0 = encoder only.
    #[serde(default)]
    pub decoder_layers: usize,
    /// 0 = no classification head.
    #[serde(default)]
    pub num_classes: usize,
}

impl ModelConfig {
    /// BERT-base: 12 layers, hidden 768, 12 heads, FFN 3072, 512 positions.
    pub fn bert_base(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ff_size: 3072,
            vocab_size,
            max_positions: 512,
            num_segments: 2,
            dropout_rate: 0.1,
            decoder_layers: 0,
            num_classes: 0,
        }
    }

    /// Desk-scale model: 2 layers, hidden 64, 4 heads, FFN 4×hidden.
    pub fn toy(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 256,
            vocab_size,
            max_positions,
            num_segments: 2,
            dropout_rate: 0.0,
            decoder_layers: 0,
            num_classes: 0,
        }
    }

    pub fn with_decoder(mut self, layers: usize) -> Self {
        self.decoder_layers = layers;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_size == 0 || self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden_size {} must be a positive multiple of num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.num_layers == 0
            || self.ff_size == 0
            || self.vocab_size == 0
            || self.num_segments == 0
        {
            return bad("num_layers, ff_size, vocab_size and num_segments must be positive".into());
        }
        if self.max_positions < 3 {
            return bad(format!(
                "max_positions {} must be at least 3",
                self.max_positions
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        if self.num_classes == 1 {
            return bad("a classifier needs at least 2 classes".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form parameter count of embeddings plus encoder stack.
    pub fn encoder_param_count(&self) -> usize {
        let (v, h, f) = (self.vocab_size, self.hidden_size, self.ff_size);
        let embeddings = v * h + self.max_positions * h + self.num_segments * h + 2 * h;
        let attention = 4 * h * h + 4 * h;
        let ffn = 2 * h * f + f + h;
        let norms = 4 * h;
        embeddings + self.num_layers * (attention + ffn + norms)
    }

    /// Every parameter this architecture owns, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h, f) = (self.vocab_size, self.hidden_size, self.ff_size);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
            push(format!("{p}.weight"), vec![i, o]);
            push(format!("{p}.bias"), vec![o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gamma"), vec![h]);
            push(format!("{p}.beta"), vec![h]);
        };
        let attention = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for part in ["query", "key", "value", "output"] {
                linear(push, &format!("{p}.{part}"), h, h);
            }
            norm(push, &format!("{p}.ln"));
        };
        let ffn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            linear(push, &format!("{p}.inner"), h, f);
            linear(push, &format!("{p}.outer"), f, h);
            norm(push, &format!("{p}.ln"));
        };

        push("embeddings.word".into(), vec![v, h]);
        push("embeddings.position".into(), vec![self.max_positions, h]);
        push("embeddings.segment".into(), vec![self.num_segments, h]);
        norm(&mut push, "embeddings.ln");
        for l in 0..self.num_layers {
            attention(&mut push, &format!("encoder.{l}.attn"));
            ffn(&mut push, &format!("encoder.{l}.ffn"));
        }
        linear(&mut push, "mlm.dense", h, h);
        norm(&mut push, "mlm.ln");
        push("mlm.bias".into(), vec![v]);
        if self.num_classes > 0 {
            linear(&mut push, "cls", h, self.num_classes);
        }
        if self.decoder_layers > 0 {
            push("decoder.embeddings.word".into(), vec![v, h]);
            push(
                "decoder.embeddings.position".into(),
                vec![self.max_positions, h],
            );
            norm(&mut push, "decoder.embeddings.ln");
            for l in 0..self.decoder_layers {
                attention(&mut push, &format!("decoder.{l}.self_attn"));
                attention(&mut push, &format!("decoder.{l}.cross_attn"));
                ffn(&mut push, &format!("decoder.{l}.ffn"));
            }
            linear(&mut push, "decoder.output", h, v);
        }
        out
    }

    /// True if `name` belongs to the pretrained body (embeddings, encoder, MLM head).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("embeddings.") || name.starts_with("encoder.") || name.starts_with("mlm.")
    }
}

/// Named parameter tensors in a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub(crate) fn shared(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.params.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<T = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new() -> Self {
        ParamGrads {
            grads: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = T::from_f64_lossy(max_norm / norm);
            for t in self.grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Initial value for a parameter by naming convention: layer-norm gains are
/// one, biases and layer-norm shifts zero, everything else truncated normal.
pub(crate) fn init_param<T: Scalar>(
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    if name.ends_with(".gamma") {
        Tensor::full(shape, T::one())
    } else if name.ends_with("bias") || name.ends_with(".beta") {
        Tensor::zeros(shape)
    } else {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
        Tensor::from_f64(shape, &data).expect("shape matches data")
    }
}

/// Freshly initialized parameters for `config`, deterministic in `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let t = init_param(&name, &shape, &mut rng);
        store.insert(name, t);
    }
    Ok(store)
}

/// Padded token ids for a batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    /// 1 = real token, 0 = padding.
    pub mask: Vec<u8>,
    pub segments: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads every row to the longest row with `pad`.
    pub fn from_rows(rows: &[Vec<u32>], pad: u32) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        Self::from_rows_to(rows, pad, len)
    }

    /// Pads every row to exactly `len` (rows longer than `len` are cut).
    pub fn from_rows_to(rows: &[Vec<u32>], pad: u32, len: usize) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for row in rows {
            let n = row.len().min(len);
            ids.extend_from_slice(&row[..n]);
            mask.extend(std::iter::repeat_n(1u8, n));
            ids.extend(std::iter::repeat_n(pad, len - n));
            mask.extend(std::iter::repeat_n(0u8, len - n));
        }
        TokenBatch {
            segments: vec![0; ids.len()],
            ids,
            mask,
            batch: rows.len(),
            len,
        }
    }

    pub fn new(
        ids: Vec<u32>,
        mask: Vec<u8>,
        segments: Option<Vec<u32>>,
        batch: usize,
        len: usize,
    ) -> Result<Self> {
        if ids.len() != batch * len
            || mask.len() != ids.len()
            || segments.as_ref().is_some_and(|s| s.len() != ids.len())
        {
            return Err(Error::Dimension {
                op: "token_batch",
                lhs: vec![batch, len],
                rhs: vec![ids.len(), mask.len()],
            });
        }
        Ok(TokenBatch {
            segments: segments.unwrap_or_else(|| vec![0; ids.len()]),
            ids,
            mask,
            batch,
            len,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train {
        seed: u64,
    },
}

/// Encoder result inside a session: hidden states as `[batch*len, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
}

/// One forward (and optionally backward) pass over a parameter store.
pub struct Session<'a, T: Scalar = f32> {
    pub graph: Graph<T>,
    config: &'a ModelConfig,
    params: &'a ParamStore<T>,
    bound: IndexMap<String, Var>,
    frozen: Vec<String>,
    dropout: Option<(T, ChaCha8Rng)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<T>, mode: Mode) -> Self {
        let dropout = match mode {
            Mode::Train { seed } if config.dropout_rate > 0.0 => Some((
                T::from_f64_lossy(config.dropout_rate),
                ChaCha8Rng::seed_from_u64(seed),
            )),
            _ => None,
        };
        Session {
            graph: Graph::new(),
            config,
            params,
            bound: IndexMap::new(),
            frozen: Vec::new(),
            dropout,
        }
    }

    /// Parameters whose name starts with any of `prefixes` are bound as
    /// constants and receive no gradient.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Uses `var` (already in `self.graph`) wherever parameter `name` is read.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .shared(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.graph.constant(value.as_ref().clone())
        } else {
            self.graph.param_shared(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        self.graph.value(var)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.graph
            .layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = T::one() - *rate;
        let scale = keep.recip();
        let p = rate.to_f64_lossy();
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let mask = Tensor::new(shape, data)?;
        self.graph.mul_const(x, mask)
    }

    /// `[batch*heads, q_len, k_len]` bias: masked keys (and future keys when
    /// `causal`) get a large negative score.
    fn attention_bias(
        &self,
        key_mask: &[u8],
        batch: usize,
        q_len: usize,
        k_len: usize,
        causal: bool,
    ) -> Tensor<T> {
        let heads = self.config.num_heads;
        let neg = T::from_f64_lossy(MASKED_SCORE);
        let mut data = vec![T::zero(); batch * heads * q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let row = ((b * heads + h) * q_len + i) * k_len;
                    for j in 0..k_len {
                        if key_mask[b * k_len + j] == 0 || (causal && j > i) {
                            data[row + j] = neg;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch * heads, q_len, k_len], data).expect("sizes agree")
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        query_in: Var,
        kv_in: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        bias: &Tensor<T>,
    ) -> Result<Var> {
        let heads = self.config.num_heads;
        let q = self.linear(query_in, &format!("{prefix}.query"))?;
        let k = self.linear(kv_in, &format!("{prefix}.key"))?;
        let v = self.linear(kv_in, &format!("{prefix}.value"))?;
        let q = self.graph.split_heads(q, batch, q_len, heads)?;
        let k = self.graph.split_heads(k, batch, k_len, heads)?;
        let v = self.graph.split_heads(v, batch, k_len, heads)?;
        let scores = self.graph.batch_matmul(q, k, true)?;
        let scale = T::from_f64_lossy((self.config.head_dim() as f64).sqrt().recip());
        let scores = self.graph.scale(scores, scale);
        let scores = self.graph.add_const(scores, bias)?;
        let probs = self.graph.softmax(scores, 2)?;
        let probs = self.dropout(probs)?;
        let ctx = self.graph.batch_matmul(probs, v, false)?;
        let ctx = self.graph.merge_heads(ctx, batch, q_len, heads)?;
        self.linear(ctx, &format!("{prefix}.output"))
    }

    /// `LN(x + dropout(sublayer))`.
    fn residual(&mut self, x: Var, sub: Var, norm: &str) -> Result<Var> {
        let sub = self.dropout(sub)?;
        let sum = self.graph.add(x, sub)?;
        self.norm(sum, norm)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.inner"))?;
        let h = self.graph.gelu(h);
        let out = self.linear(h, &format!("{prefix}.outer"))?;
        self.residual(x, out, &format!("{prefix}.ln"))
    }

    fn check_ids(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.config.max_positions,
            });
        }
        let size = self.config.vocab_size;
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= size) {
            return Err(Error::IdRange { id, size });
        }
        Ok(())
    }

    fn positions(batch: usize, len: usize) -> Vec<usize> {
        (0..batch).flat_map(|_| 0..len).collect()
    }

    pub fn encode(&mut self, input: &TokenBatch) -> Result<EncodedVars> {
        self.check_ids(input)?;
        if input
            .segments
            .iter()
            .any(|&s| s as usize >= self.config.num_segments)
        {
            return Err(Error::Config("segment id out of range".into()));
        }
        let (batch, len) = (input.batch, input.len);
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = input.segments.iter().map(|&i| i as usize).collect();

        let word = self.param("embeddings.word")?;
        let pos = self.param("embeddings.position")?;
        let seg = self.param("embeddings.segment")?;
        let w = self.graph.gather(word, &ids)?;
        let p = self.graph.gather(pos, &Self::positions(batch, len))?;
        let s = self.graph.gather(seg, &segs)?;
        let x = self.graph.add(w, p)?;
        let x = self.graph.add(x, s)?;
        let x = self.norm(x, "embeddings.ln")?;
        let mut x = self.dropout(x)?;

        let bias = self.attention_bias(&input.mask, batch, len, len, false);
        for l in 0..self.config.num_layers {
            let prefix = format!("encoder.{l}");
            let a = self.attention(&format!("{prefix}.attn"), x, x, batch, len, len, &bias)?;
            let y = self.residual(x, a, &format!("{prefix}.attn.ln"))?;
            x = self.feed_forward(y, &format!("{prefix}.ffn"))?;
        }
        Ok(EncodedVars {
            hidden: x,
            batch,
            len,
        })
    }

    /// Vocabulary logits `[rows, vocab]` for hidden states `[rows, hidden]`;
    /// the output projection is tied to the word embeddings.
    pub fn mlm_logits(&mut self, hidden: Var) -> Result<Var> {
        let h = self.linear(hidden, "mlm.dense")?;
        let h = self.graph.gelu(h);
        let h = self.norm(h, "mlm.ln")?;
        let word = self.param("embeddings.word")?;
        let logits = self.graph.matmul_nt(h, word)?;
        let bias = self.param("mlm.bias")?;
        self.graph.add_bias(logits, bias)
    }

    /// Position-0 ([CLS]) hidden state of each row: `[batch, hidden]`.
    pub fn pooled(&mut self, enc: &EncodedVars) -> Result<Var> {
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.len).collect();
        self.graph.gather(enc.hidden, &rows)
    }

    pub fn cls_logits(&mut self, pooled: Var) -> Result<Var> {
        if self.config.num_classes == 0 {
            return Err(Error::NoClassifier);
        }
        let x = self.dropout(pooled)?;
        self.linear(x, "cls")
    }

    /// Vocabulary logits `[batch*target_len, vocab]` for teacher-forced
    /// decoder inputs attending over `memory` (`[batch*src_len, hidden]`).
    pub fn decode(
        &mut self,
        target: &TokenBatch,
        memory: Var,
        source_mask: &[u8],
        source_len: usize,
    ) -> Result<Var> {
        if self.config.decoder_layers == 0 {
            return Err(Error::NoDecoder);
        }
        self.check_ids(target)?;
        let (batch, len) = (target.batch, target.len);
        if source_mask.len() != batch * source_len
            || self.graph.shape(memory)[0] != batch * source_len
        {
            return Err(Error::Dimension {
                op: "decode",
                lhs: self.graph.shape(memory).to_vec(),
                rhs: vec![batch, source_len],
            });
        }
        let ids: Vec<usize> = target.ids.iter().map(|&i| i as usize).collect();
        let word = self.param("decoder.embeddings.word")?;
        let pos = self.param("decoder.embeddings.position")?;
        let w = self.graph.gather(word, &ids)?;
        let p = self.graph.gather(pos, &Self::positions(batch, len))?;
        let x = self.graph.add(w, p)?;
        let x = self.norm(x, "decoder.embeddings.ln")?;
        let mut x = self.dropout(x)?;

        let self_bias = self.attention_bias(&target.mask, batch, len, len, true);
        let cross_bias = self.attention_bias(source_mask, batch, len, source_len, false);
        for l in 0..self.config.decoder_layers {
            let prefix = format!("decoder.{l}");
            let a = self.attention(
                &format!("{prefix}.self_attn"),
                x,
                x,
                batch,
                len,
                len,
                &self_bias,
            )?;
            let y = self.residual(x, a, &format!("{prefix}.self_attn.ln"))?;
            let c = self.attention(
                &format!("{prefix}.cross_attn"),
                y,
                memory,
                batch,
                len,
                source_len,
                &cross_bias,
            )?;
            let z = self.residual(y, c, &format!("{prefix}.cross_attn.ln"))?;
            x = self.feed_forward(z, &format!("{prefix}.ffn"))?;
        }
        self.linear(x, "decoder.output")
    }

    /// Gradients of `loss` for every bound, non-frozen parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = ParamGrads::new();
        for (name, &var) in &self.bound {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}

/// Encoder hidden states `[batch, len, hidden]` and pooled [CLS] vectors `[batch, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T = f32> {
    pub hidden: Tensor<T>,
    pub pooled: Tensor<T>,
    pub mask: Vec<u8>,
}

pub fn encoder_forward<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    input: &TokenBatch,
) -> Result<EncoderOutput<T>> {
    let mut s = Session::new(config, params, Mode::Eval);
    let enc = s.encode(input)?;
    let pooled = s.pooled(&enc)?;
    let h = config.hidden_size;
    Ok(EncoderOutput {
        hidden: s
            .value(enc.hidden)
            .clone()
            .reshape(&[enc.batch, enc.len, h])?,
        pooled: s.value(pooled).clone(),
        mask: input.mask.clone(),
    })
}

/// Teacher-forced decoder logits `[batch, target_len, vocab]`.
pub fn decoder_forward<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    target: &TokenBatch,
    encoded: &EncoderOutput<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::new(config, params, Mode::Eval);
    let shape = encoded.hidden.shape().to_vec();
    let (batch, src_len) = (shape[0], shape[1]);
    let memory = s.graph.constant(
        encoded
            .hidden
            .clone()
            .reshape(&[batch * src_len, shape[2]])?,
    );
    let logits = s.decode(target, memory, &encoded.mask, src_len)?;
    s.value(logits)
        .clone()
        .reshape(&[target.batch, target.len, config.vocab_size])
}

/// MLM vocabulary logits for hidden states of shape `[batch, len, hidden]`.
pub fn mlm_head<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    hidden: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::new(config, params, Mode::Eval);
    let h = config.hidden_size;
    let rows = hidden.numel() / h;
    let x = s.graph.constant(hidden.clone().reshape(&[rows, h])?);
    let logits = s.mlm_logits(x)?;
    let mut shape = hidden.shape().to_vec();
    *shape.last_mut().unwrap() = config.vocab_size;
    s.value(logits).clone().reshape(&shape)
}

pub fn cls_head<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    pooled: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut s = Session::new(config, params, mode);
    let x = s.graph.constant(pooled.clone());
    let logits = s.cls_logits(x)?;
    Ok(s.value(logits).clone())
}

/// Parameter names grouped by top-level component, for reporting.
pub fn component_counts<T: Scalar>(params: &ParamStore<T>) -> HashMap<&'static str, usize> {
    let mut out = HashMap::new();
    for (name, t) in params.iter() {
        let key = if name.starts_with("decoder.") {
            "decoder"
        } else if name.starts_with("mlm.") {
            "mlm_head"
        } else if name.starts_with("cls.") {
            "classifier"
        } else {
            "encoder"
        };
        *out.entry(key).or_insert(0) += t.numel();
    }
    out
}
