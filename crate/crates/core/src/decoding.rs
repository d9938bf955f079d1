//! Greedy and beam-search generation.
//!
//! Search runs against any [`NextTokenScorer`]; [`Seq2SeqScorer`] adapts a
//! checkpoint with a decoder. [CLS] starts every hypothesis and [SEP] ends it.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{encoder_forward, EncoderOutput, Mode, Session, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{decode, encode_unpadded, tokenize, SpecialIds, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// α in `score = log p / len^α`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 4,
            max_decode_len: 64,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_decode_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 1,
            max_decode_len,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_decode_len == 0 {
            return Err(Error::DecodeConfig(
                "beam_size and max_decode_len must be at least 1".into(),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::DecodeConfig("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

/// Next-token log-probabilities for a set of prefixes (BOS implied).
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// End-of-sequence id and ids that may never be generated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputTokens {
    pub eos: u32,
    pub banned: Vec<u32>,
}

impl OutputTokens {
    pub fn from_specials(s: SpecialIds) -> Self {
        OutputTokens {
            eos: s.sep,
            banned: vec![s.pad, s.unk, s.cls, s.mask],
        }
    }

    fn allowed(&self, vocab: usize) -> Vec<u32> {
        (0..vocab as u32)
            .filter(|t| !self.banned.contains(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without BOS/EOS.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities (EOS included when finished).
    pub log_prob: f64,
    /// `log_prob / len^α`, len counting EOS.
    pub score: f64,
    pub finished: bool,
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Argmax continuation until EOS or `max_len` steps; lowest id wins ties.
pub fn greedy_search(
    scorer: &mut dyn NextTokenScorer,
    out: &OutputTokens,
    max_len: usize,
) -> Result<Hypothesis> {
    let allowed = out.allowed(scorer.vocab_size());
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let mut best = allowed[0];
        for &t in &allowed[1..] {
            if lp[t as usize] > lp[best as usize] {
                best = t;
            }
        }
        log_prob += lp[best as usize];
        if best == out.eos {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score: log_prob,
                finished: true,
            });
        }
        tokens.push(best);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob,
        finished: false,
    })
}

/// Length-normalized beam search. Each step expands every live hypothesis
/// by every allowed token and keeps the `beam_size` best; those ending in
/// EOS retire to the finished pool. Ties rank by (parent, token id).
pub fn beam_search_with(
    scorer: &mut dyn NextTokenScorer,
    out: &OutputTokens,
    beam_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::DecodeConfig(
            "beam_size and max_decode_len must be at least 1".into(),
        ));
    }
    let allowed = out.allowed(scorer.vocab_size());
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(t, _)| t.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * allowed.len());
        for (pi, (_, base)) in live.iter().enumerate() {
            for &t in &allowed {
                cands.push((base + lps[pi][t as usize], pi, t));
            }
        }
        // Every candidate has length step+1, so raw log-prob ranks them.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (lp, pi, t) in cands {
            let tokens = live[pi].0.clone();
            if t == out.eos {
                finished.push(Hypothesis {
                    score: normalized(lp, step + 1, alpha),
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                let mut tokens = tokens;
                tokens.push(t);
                next.push((tokens, lp));
            }
        }
        live = next;
    }

    let pick = |hyps: Vec<Hypothesis>| {
        hyps.into_iter()
            .reduce(|best, h| if h.score > best.score { h } else { best })
    };
    if let Some(best) = pick(finished) {
        return Ok(best);
    }
    let unfinished = live
        .into_iter()
        .map(|(tokens, lp)| Hypothesis {
            score: normalized(lp, tokens.len(), alpha),
            tokens,
            log_prob: lp,
            finished: false,
        })
        .collect();
    Ok(pick(unfinished).expect("beam is never empty without a finished hypothesis"))
}

/// Scores decoder continuations for one encoded source.
pub struct Seq2SeqScorer<'a, T: Scalar = f32> {
    ckpt: &'a Checkpoint<T>,
    bos: u32,
    pad: u32,
    encoded: EncoderOutput<T>,
}

impl<'a, T: Scalar> Seq2SeqScorer<'a, T> {
    /// `source` is the full encoder input, `[CLS] … [SEP]`.
    pub fn new(ckpt: &'a Checkpoint<T>, specials: SpecialIds, source: &[u32]) -> Result<Self> {
        if ckpt.config.decoder_layers == 0 {
            return Err(Error::NoDecoder);
        }
        if source.is_empty() {
            return Err(Error::EmptyInput);
        }
        let batch = TokenBatch::from_rows(&[source.to_vec()], specials.pad);
        let encoded = encoder_forward(&ckpt.config, &ckpt.params, &batch)?;
        Ok(Seq2SeqScorer {
            ckpt,
            bos: specials.cls,
            pad: specials.pad,
            encoded,
        })
    }
}

impl<T: Scalar> NextTokenScorer for Seq2SeqScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.ckpt.config.vocab_size
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let rows: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(self.bos).chain(p.iter().copied()).collect())
            .collect();
        let target = TokenBatch::from_rows(&rows, self.pad);
        let shape = self.encoded.hidden.shape();
        let (src_len, h) = (shape[1], shape[2]);
        let mut memory = Vec::with_capacity(n * src_len * h);
        let mut mask = Vec::with_capacity(n * src_len);
        for _ in 0..n {
            memory.extend_from_slice(self.encoded.hidden.data());
            mask.extend_from_slice(&self.encoded.mask);
        }
        let mut s = Session::new(&self.ckpt.config, &self.ckpt.params, Mode::Eval);
        let mem = s.graph.constant(Tensor::new(vec![n * src_len, h], memory)?);
        let logits = s.decode(&target, mem, &mask, src_len)?;
        let logits = s.value(logits);
        let v = self.ckpt.config.vocab_size;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(b, row)| {
                let at = b * target.len + row.len() - 1;
                log_softmax(&logits.data()[at * v..(at + 1) * v])
            })
            .collect())
    }
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

pub fn greedy_decode<T: Scalar>(
    ckpt: &Checkpoint<T>,
    specials: SpecialIds,
    source: &[u32],
    max_decode_len: usize,
) -> Result<Vec<u32>> {
    let mut scorer = Seq2SeqScorer::new(ckpt, specials, source)?;
    Ok(greedy_search(
        &mut scorer,
        &OutputTokens::from_specials(specials),
        max_decode_len.max(1),
    )?
    .tokens)
}

pub fn beam_search<T: Scalar>(
    ckpt: &Checkpoint<T>,
    specials: SpecialIds,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut scorer = Seq2SeqScorer::new(ckpt, specials, source)?;
    beam_search_with(
        &mut scorer,
        &OutputTokens::from_specials(specials),
        cfg.beam_size,
        cfg.max_decode_len,
        cfg.length_penalty,
    )
}

/// Generates with the configured strategy.
pub fn generate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    specials: SpecialIds,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(ckpt, specials, source, cfg.max_decode_len),
        Strategy::Beam => Ok(beam_search(ckpt, specials, source, cfg)?.tokens),
    }
}

/// One generation per source line, order preserved.
pub fn decode_lines<T: Scalar, S: AsRef<str>>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    sources: &[S],
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    let max_len = ckpt.config.max_positions;
    sources
        .iter()
        .map(|line| {
            let ids = encode_unpadded(&tokenize(line.as_ref()), vocab, max_len);
            let out = generate(ckpt, vocab.specials(), &ids, cfg)?;
            decode(&out, vocab)
        })
        .collect()
}
