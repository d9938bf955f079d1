//! Masked-language-model corruption and the (continued) pre-training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{init_params, Mode, ModelConfig, ParamStore, Session, TokenBatch};
use crate::optim::{adam_step, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_masked, Tensor};
use crate::tokenizer::{encode_unpadded, tokenize, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "masking fractions {fracs:?} must be in [0, 1] and sum to 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.select_prob) {
            return Err(Error::Config(format!(
                "select_prob {} must lie in [0, 1]",
                self.select_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<u32>,
    /// `(position, original id)` for every selected position, ascending.
    pub labels: Vec<(usize, u32)>,
    pub attention_mask: Vec<u8>,
}

/// Selects each non-special position with `select_prob`; a selected position
/// becomes [MASK], a uniformly random non-special id, or stays unchanged.
pub fn apply_mlm_mask(
    ids: &[u32],
    vocab: &Vocab,
    cfg: &MaskingConfig,
    rng: &mut impl Rng,
) -> MaskedBatch {
    let s = vocab.specials();
    let replacements = vocab.non_special_ids();
    let mut input_ids = ids.to_vec();
    let mut labels = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if vocab.is_special(id) || rng.random::<f64>() >= cfg.select_prob {
            continue;
        }
        labels.push((pos, id));
        let u: f64 = rng.random();
        if u < cfg.mask_frac {
            input_ids[pos] = s.mask;
        } else if u < cfg.mask_frac + cfg.random_frac && !replacements.is_empty() {
            input_ids[pos] = replacements[rng.random_range(0..replacements.len())];
        }
    }
    MaskedBatch {
        input_ids,
        labels,
        attention_mask: ids.iter().map(|&id| u8::from(id != s.pad)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub max_len: usize,
    pub seed: u64,
    /// 0 = only the final checkpoint.
    pub checkpoint_every: u64,
    pub masking: MaskingConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 15,
            max_steps: 250_000,
            max_len: 512,
            seed: 0,
            checkpoint_every: 0,
            masking: MaskingConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.masking.validate()?;
        if self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.max_steps == 0
        {
            return Err(Error::Config(
                "learning_rate, batch_size and max_steps must be positive".into(),
            ));
        }
        if self.max_len < 3 || self.max_len > model.max_positions {
            return Err(Error::Config(format!(
                "max_len {} must lie in [3, max_positions = {}]",
                self.max_len, model.max_positions
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Tokenizes every document and cuts it into `[CLS] chunk [SEP]` pieces of
/// at most `max_len` ids.
pub fn chunk_corpus<S: AsRef<str>>(docs: &[S], vocab: &Vocab, max_len: usize) -> Vec<Vec<u32>> {
    let body = max_len.saturating_sub(2).max(1);
    let mut out = Vec::new();
    for doc in docs {
        let seq = tokenize(doc.as_ref());
        for piece in seq.tokens.chunks(body) {
            let piece = crate::tokenizer::TokenSequence::from_tokens(piece.iter().cloned());
            out.push(encode_unpadded(&piece, vocab, max_len));
        }
    }
    out
}

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-step training record; `Display` gives the tab-separated log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u128,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.3e}\t{}",
            self.step, self.loss, self.lr, self.elapsed_ms
        )
    }
}

/// Where a training run reports progress.
#[derive(Default)]
pub struct RunOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Periodic checkpoints are written here as `step-<n>.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T = f32> {
    pub checkpoint: Checkpoint<T>,
    /// Training loss of every step run, in order.
    pub losses: Vec<f64>,
}

/// Batch order over `n` sequences: a fresh seeded shuffle per pass.
pub(crate) struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            cursor: n,
            rng: stream_rng(seed, u64::MAX),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

fn mlm_loss<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    rows: &[Vec<u32>],
    vocab: &Vocab,
    masking: &MaskingConfig,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> Result<(f64, crate::model::ParamGrads<T>)> {
    let pad = vocab.specials().pad;
    let batch = TokenBatch::from_rows(rows, pad);
    let mut masked = apply_mlm_mask(&batch.ids, vocab, masking, rng);
    // A tiny batch can come out with nothing selected; redraw from the same stream.
    let mut tries = 0;
    while masked.labels.is_empty() && masking.select_prob > 0.0 && tries < 1000 {
        masked = apply_mlm_mask(&batch.ids, vocab, masking, rng);
        tries += 1;
    }
    if masked.labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let input = TokenBatch::new(
        masked.input_ids,
        masked.attention_mask,
        None,
        batch.batch,
        batch.len,
    )?;
    let labels: Vec<(usize, usize)> = masked
        .labels
        .iter()
        .map(|&(p, id)| (p, id as usize))
        .collect();
    let mut s = Session::new(config, params, mode);
    let enc = s.encode(&input)?;
    let logits = s.mlm_logits(enc.hidden)?;
    let loss = s.graph.cross_entropy(logits, &labels)?;
    let value = s.value(loss).item().to_f64_lossy();
    Ok((value, s.backward(loss)?))
}

/// Pre-trains (or continues pre-training) an encoder with the MLM objective.
///
/// With `init`, parameters, step counter and optimizer moments continue from
/// that checkpoint; its encoder dimensions must match `model_cfg`.
pub fn pretrain<T: Scalar, S: AsRef<str>>(
    corpus: &[S],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    init: Option<&Checkpoint<T>>,
    out: RunOutputs<'_>,
) -> Result<PretrainOutcome<T>> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let sequences = chunk_corpus(corpus, vocab, cfg.max_len);
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut ckpt = match init {
        Some(base) => {
            let adopted = base.adopt_encoder(model_cfg, cfg.seed)?;
            Checkpoint {
                step: base.step,
                optimizer: base.optimizer.clone(),
                ..adopted
            }
        }
        None => Checkpoint {
            config: model_cfg.clone(),
            params: init_params(model_cfg, cfg.seed)?,
            step: 0,
            optimizer: None,
        },
    };
    let mut state = ckpt.optimizer.take().unwrap_or_default();
    let adam = cfg.adam();
    let mut batcher = Batcher::new(sequences.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.max_steps as usize);
    let RunOutputs {
        mut log,
        checkpoint_dir,
    } = out;
    let started = Instant::now();

    for _ in 0..cfg.max_steps {
        let step = ckpt.step + 1;
        let rows: Vec<Vec<u32>> = batcher
            .next(cfg.batch_size)
            .into_iter()
            .map(|i| sequences[i].clone())
            .collect();
        let mut rng = stream_rng(cfg.seed, step);
        let mode = Mode::Train { seed: rng.random() };
        let (loss, grads) = mlm_loss(
            &ckpt.config,
            &ckpt.params,
            &rows,
            vocab,
            &cfg.masking,
            &mut rng,
            mode,
        )?;
        adam_step(&mut ckpt.params, &grads, &mut state, &adam)?;
        ckpt.step = step;
        losses.push(loss);

        if let Some(w) = log.as_deref_mut() {
            let rec = StepLog {
                step,
                loss,
                lr: cfg.learning_rate,
                elapsed_ms: started.elapsed().as_millis(),
            };
            writeln!(w, "{rec}").map_err(|e| Error::io(Path::new("<training log>"), e))?;
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                ckpt.optimizer = Some(state.clone());
                save_checkpoint(&ckpt, &dir.join(format!("step-{step}.ckpt")))?;
                ckpt.optimizer = None;
            }
        }
    }
    ckpt.optimizer = Some(state);
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmEval {
    /// Fraction of masked positions whose argmax prediction is the original id.
    pub accuracy: f64,
    /// `exp(mean masked cross entropy)`.
    pub perplexity: f64,
    pub masked_positions: usize,
}

/// Masked-token accuracy and perplexity on held-out text, with a mask
/// pattern fixed by `seed`.
pub fn eval_mlm<T: Scalar, S: AsRef<str>>(
    ckpt: &Checkpoint<T>,
    heldout: &[S],
    vocab: &Vocab,
    masking: &MaskingConfig,
    max_len: usize,
    seed: u64,
) -> Result<MlmEval> {
    masking.validate()?;
    let sequences = chunk_corpus(heldout, vocab, max_len.min(ckpt.config.max_positions));
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = stream_rng(seed, 0);
    let (mut correct, mut total, mut nll) = (0usize, 0usize, 0.0f64);
    for rows in sequences.chunks(16) {
        let batch = TokenBatch::from_rows(rows, vocab.specials().pad);
        let masked = apply_mlm_mask(&batch.ids, vocab, masking, &mut rng);
        if masked.labels.is_empty() {
            continue;
        }
        let input = TokenBatch::new(
            masked.input_ids,
            masked.attention_mask,
            None,
            batch.batch,
            batch.len,
        )?;
        let mut s = Session::new(&ckpt.config, &ckpt.params, Mode::Eval);
        let enc = s.encode(&input)?;
        let logits = s.mlm_logits(enc.hidden)?;
        let logits: &Tensor<T> = s.value(logits);
        let v = ckpt.config.vocab_size;
        for &(pos, id) in &masked.labels {
            let row = &logits.data()[pos * v..(pos + 1) * v];
            if argmax(row) == id as usize {
                correct += 1;
            }
        }
        let labels: Vec<(usize, usize)> = masked
            .labels
            .iter()
            .map(|&(p, id)| (p, id as usize))
            .collect();
        nll += cross_entropy_masked(logits, &labels)?.to_f64_lossy() * labels.len() as f64;
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(MlmEval {
        accuracy: correct as f64 / total as f64,
        perplexity: (nll / total as f64).exp(),
        masked_positions: total,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
