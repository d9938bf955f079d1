//! Task fine-tuning: [CLS] classification and encoder-decoder generation.
//!
//! Both trainers start from an encoder checkpoint, attach a freshly
//! initialized head (classifier or decoder), train the whole model, and keep
//! the epoch with the best dev metric (later epochs win ties).

use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Task;
use crate::decoding::{generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, bleu};
use crate::model::{Mode, ModelConfig, Session, TokenBatch};
use crate::optim::{adam_step, noam_lr, AdamConfig, AdamState};
use crate::pretrain::{argmax, stream_rng, Batcher};
use crate::scalar::Scalar;
use crate::tokenizer::{encode_unpadded, tokenize, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsTaskConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    /// 0 = infer from the training labels.
    pub num_classes: usize,
    pub weight_decay: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ClsTaskConfig {
    fn default() -> Self {
        ClsTaskConfig {
            batch_size: 24,
            learning_rate: 5e-5,
            epochs: 5,
            dropout: 0.1,
            num_classes: 0,
            weight_decay: 0.01,
            max_len: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqTaskConfig {
    pub task: Task,
    pub batch_size: usize,
    pub decoder_layers: usize,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Multiplies the Noam learning rate.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    /// BLEU order used for dev selection.
    pub bleu_n: usize,
    pub freeze_encoder: bool,
    pub dev_decode: DecodeConfig,
    pub seed: u64,
}

impl Default for Seq2SeqTaskConfig {
    fn default() -> Self {
        Self::for_task(Task::Amct)
    }
}

impl Seq2SeqTaskConfig {
    /// AMCT: batch 30, 4 decoder layers; CPG: 80, 2; CCG: 80, 4 (scored with BLEU-2).
    pub fn for_task(task: Task) -> Self {
        let (batch_size, decoder_layers, bleu_n, epochs) = match task {
            Task::Cpg22 | Task::Cpg13 => (80, 2, 4, 30),
            Task::Ccg => (80, 4, 2, 60),
            _ => (30, 4, 4, 30),
        };
        Seq2SeqTaskConfig {
            task,
            batch_size,
            decoder_layers,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            dropout: 0.1,
            epochs,
            lr_scale: 1.0,
            weight_decay: 0.0,
            max_len: 512,
            bleu_n,
            freeze_encoder: false,
            dev_decode: DecodeConfig::greedy(64),
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decoder_layers == 0 || self.bleu_n == 0
        {
            return Err(Error::Config(
                "batch_size, epochs, decoder_layers and bleu_n must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.lr_scale <= 0.0 || self.max_len < 3 {
            return Err(Error::Config(
                "dropout must lie in [0, 1), lr_scale be positive, max_len ≥ 3".into(),
            ));
        }
        self.dev_decode.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy in [0, 1] for classification, BLEU in [0, 100] for generation.
    pub dev_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T = f32> {
    /// Parameters from the selected epoch.
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl<T> FinetuneOutcome<T> {
    /// TSV of epoch, train loss, dev metric.
    pub fn report_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_metric\n");
        for r in &self.history {
            writeln!(s, "{}\t{:.6}\t{:.6}", r.epoch, r.train_loss, r.dev_metric).unwrap();
        }
        writeln!(s, "# best_epoch\t{}", self.best_epoch).unwrap();
        s
    }
}

fn encode_text(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    let seq = tokenize(text);
    if seq.tokens.len() + 2 > max_len {
        return Err(Error::SequenceTooLong {
            len: seq.tokens.len() + 2,
            max: max_len,
        });
    }
    Ok(encode_unpadded(&seq, vocab, max_len))
}

fn select_best<T: Clone>(best: &mut Option<(f64, usize, T)>, metric: f64, epoch: usize, value: &T) {
    if best.as_ref().is_none_or(|(m, _, _)| metric >= *m) {
        *best = Some((metric, epoch, value.clone()));
    }
}

/// Fine-tunes encoder + linear classifier on `(text, label)` pairs.
pub fn finetune_classifier<T: Scalar>(
    encoder: &Checkpoint<T>,
    train: &[(String, usize)],
    dev: &[(String, usize)],
    vocab: &Vocab,
    cfg: &ClsTaskConfig,
) -> Result<FinetuneOutcome<T>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if dev.is_empty() {
        return Err(Error::EmptySplit("dev"));
    }
    let num_classes = if cfg.num_classes == 0 {
        train.iter().map(|&(_, l)| l).max().unwrap() + 1
    } else {
        cfg.num_classes
    };
    if num_classes < 2 {
        return Err(Error::Config(
            "a classifier needs at least 2 classes".into(),
        ));
    }
    if let Some(&(_, l)) = train.iter().chain(dev).find(|&&(_, l)| l >= num_classes) {
        return Err(Error::ClassLabel {
            label: l,
            classes: num_classes,
        });
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch_size, epochs and learning_rate must be positive".into(),
        ));
    }
    let target = ModelConfig {
        num_classes,
        decoder_layers: 0,
        dropout_rate: cfg.dropout,
        ..encoder.config.clone()
    };
    let mut ckpt = encoder.adopt_encoder(&target, cfg.seed)?;
    let max_len = cfg.max_len.min(target.max_positions);
    let enc = |set: &[(String, usize)]| -> Vec<Vec<u32>> {
        set.iter()
            .map(|(t, _)| encode_unpadded(&tokenize(t), vocab, max_len))
            .collect()
    };
    let (train_ids, dev_ids) = (enc(train), enc(dev));
    let dev_gold: Vec<usize> = dev.iter().map(|&(_, l)| l).collect();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut batcher = Batcher::new(train.len(), cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let pad = vocab.specials().pad;
    let mut history = Vec::new();
    let mut best = None;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = batcher.next(cfg.batch_size);
            let rows: Vec<Vec<u32>> = idx.iter().map(|&i| train_ids[i].clone()).collect();
            let labels: Vec<(usize, usize)> = idx
                .iter()
                .enumerate()
                .map(|(b, &i)| (b, train[i].1))
                .collect();
            ckpt.step += 1;
            let mode = Mode::Train {
                seed: stream_rng(cfg.seed, ckpt.step).next_u64(),
            };
            let mut s = Session::new(&ckpt.config, &ckpt.params, mode);
            let e = s.encode(&TokenBatch::from_rows(&rows, pad))?;
            let pooled = s.pooled(&e)?;
            let logits = s.cls_logits(pooled)?;
            let loss = s.graph.cross_entropy(logits, &labels)?;
            total += s.value(loss).item().to_f64_lossy();
            let grads = s.backward(loss)?;
            drop(s);
            adam_step(&mut ckpt.params, &grads, &mut state, &adam)?;
        }
        let predicted = predict_classes(&ckpt, &dev_ids, pad)?;
        let acc = accuracy(&predicted, &dev_gold)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / steps_per_epoch as f64,
            dev_metric: acc,
        });
        select_best(&mut best, acc, epoch, &ckpt);
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        checkpoint,
        history,
        best_epoch,
    })
}

/// Argmax class for each encoded sequence.
pub fn predict_classes<T: Scalar>(
    ckpt: &Checkpoint<T>,
    rows: &[Vec<u32>],
    pad: u32,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(32) {
        let mut s = Session::new(&ckpt.config, &ckpt.params, Mode::Eval);
        let e = s.encode(&TokenBatch::from_rows(chunk, pad))?;
        let pooled = s.pooled(&e)?;
        let logits = s.cls_logits(pooled)?;
        let logits = s.value(logits);
        let c = ckpt.config.num_classes;
        out.extend((0..chunk.len()).map(|b| argmax(&logits.data()[b * c..(b + 1) * c])));
    }
    Ok(out)
}

/// A source/target pair as encoder input, decoder input and decoder labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    /// `[CLS] source [SEP]`.
    pub source: Vec<u32>,
    /// Target ids without specials.
    pub target: Vec<u32>,
}

impl EncodedPair {
    pub fn new(source: &str, target: &str, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let source = encode_text(source, vocab, max_len)?;
        let t = encode_text(target, vocab, max_len)?;
        if source.len() <= 2 || t.len() <= 2 {
            return Err(Error::EmptyInput);
        }
        Ok(EncodedPair {
            source,
            target: t[1..t.len() - 1].to_vec(),
        })
    }
}

/// Mean teacher-forced token NLL of a batch, with gradients.
/// Decoder input is `[CLS] + target`, labels are `target + [SEP]`.
pub fn seq2seq_loss<T: Scalar>(
    ckpt: &Checkpoint<T>,
    pairs: &[&EncodedPair],
    vocab: &Vocab,
    mode: Mode,
    frozen: &[&str],
) -> Result<(f64, crate::model::ParamGrads<T>)> {
    let sp = vocab.specials();
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let inputs: Vec<Vec<u32>> = pairs
        .iter()
        .map(|p| {
            std::iter::once(sp.cls)
                .chain(p.target.iter().copied())
                .collect()
        })
        .collect();
    let src = TokenBatch::from_rows(&sources, sp.pad);
    let tgt = TokenBatch::from_rows(&inputs, sp.pad);
    let mut labels = Vec::new();
    for (b, p) in pairs.iter().enumerate() {
        for (i, &id) in p.target.iter().chain(std::iter::once(&sp.sep)).enumerate() {
            labels.push((b * tgt.len + i, id as usize));
        }
    }
    let mut s = Session::new(&ckpt.config, &ckpt.params, mode).freeze(frozen);
    let enc = s.encode(&src)?;
    let logits = s.decode(&tgt, enc.hidden, &src.mask, src.len)?;
    let loss = s.graph.cross_entropy(logits, &labels)?;
    let value = s.value(loss).item().to_f64_lossy();
    Ok((value, s.backward(loss)?))
}

const ENCODER_PREFIXES: [&str; 3] = ["embeddings.", "encoder.", "mlm."];

/// Fine-tunes encoder + fresh decoder on `(source, target)` pairs with the
/// Noam schedule; dev BLEU picks the epoch.
pub fn finetune_seq2seq<T: Scalar>(
    encoder: &Checkpoint<T>,
    train: &[(String, String)],
    dev: &[(String, String)],
    vocab: &Vocab,
    cfg: &Seq2SeqTaskConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if dev.is_empty() {
        return Err(Error::EmptySplit("dev"));
    }
    let target = ModelConfig {
        decoder_layers: cfg.decoder_layers,
        dropout_rate: cfg.dropout,
        num_classes: 0,
        ..encoder.config.clone()
    };
    let mut ckpt = encoder.adopt_encoder(&target, cfg.seed)?;
    let max_len = cfg.max_len.min(target.max_positions);
    let encode = |set: &[(String, String)]| -> Result<Vec<EncodedPair>> {
        set.iter()
            .map(|(s, t)| EncodedPair::new(s, t, vocab, max_len))
            .collect()
    };
    let (train_pairs, dev_pairs) = (encode(train)?, encode(dev)?);
    let frozen: &[&str] = if cfg.freeze_encoder {
        &ENCODER_PREFIXES
    } else {
        &[]
    };
    let mut adam = AdamConfig {
        lr: 0.0,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        exclude_bias_and_norm: true,
    };
    let mut state = AdamState::new();
    let mut batcher = Batcher::new(train_pairs.len(), cfg.seed);
    let steps_per_epoch = train_pairs.len().div_ceil(cfg.batch_size);
    let mut history = Vec::new();
    let mut best = None;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch: Vec<&EncodedPair> = batcher
                .next(cfg.batch_size)
                .into_iter()
                .map(|i| &train_pairs[i])
                .collect();
            ckpt.step += 1;
            adam.lr = cfg.lr_scale * noam_lr(ckpt.step, cfg.warmup_steps, target.hidden_size)?;
            let mode = Mode::Train {
                seed: stream_rng(cfg.seed, ckpt.step).next_u64(),
            };
            let (loss, grads) = seq2seq_loss(&ckpt, &batch, vocab, mode, frozen)?;
            total += loss;
            adam_step(&mut ckpt.params, &grads, &mut state, &adam)?;
        }
        let dev_bleu = corpus_bleu(&ckpt, &dev_pairs, vocab, &cfg.dev_decode, cfg.bleu_n)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / steps_per_epoch as f64,
            dev_metric: dev_bleu,
        });
        select_best(&mut best, dev_bleu, epoch, &ckpt);
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        checkpoint,
        history,
        best_epoch,
    })
}

/// BLEU-`n` of decoded sources against targets, over token ids.
pub fn corpus_bleu<T: Scalar>(
    ckpt: &Checkpoint<T>,
    pairs: &[EncodedPair],
    vocab: &Vocab,
    decode: &DecodeConfig,
    n: usize,
) -> Result<f64> {
    let mut cands = Vec::with_capacity(pairs.len());
    for p in pairs {
        cands.push(generate(ckpt, vocab.specials(), &p.source, decode)?);
    }
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok(bleu(&cands, &refs, n)?.score)
}

/// Per-task configuration: one of the two trainer configs.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskConfig {
    Classification(ClsTaskConfig),
    Generation(Seq2SeqTaskConfig),
}

impl TaskConfig {
    pub fn defaults(task: Task) -> Self {
        if task.is_generation() {
            TaskConfig::Generation(Seq2SeqTaskConfig::for_task(task))
        } else {
            TaskConfig::Classification(ClsTaskConfig::default())
        }
    }

    /// Task defaults overlaid with the keys present in `text` (TOML).
    pub fn from_toml(task: Task, text: &str) -> Result<Self> {
        let overrides: toml::Table =
            toml::from_str(text).map_err(|e| Error::parse("task config", e.to_string()))?;
        fn overlay<C: Serialize + for<'de> Deserialize<'de>>(
            base: &C,
            over: toml::Table,
        ) -> Result<C> {
            let mut table = toml::Table::try_from(base)
                .map_err(|e| Error::parse("task config", e.to_string()))?;
            for (k, v) in over {
                match (table.get_mut(&k), v) {
                    (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
                    (_, v) => {
                        table.insert(k, v);
                    }
                }
            }
            table
                .try_into()
                .map_err(|e: toml::de::Error| Error::parse("task config", e.to_string()))
        }
        Ok(match Self::defaults(task) {
            TaskConfig::Classification(c) => TaskConfig::Classification(overlay(&c, overrides)?),
            TaskConfig::Generation(c) => {
                let mut c: Seq2SeqTaskConfig = overlay(&c, overrides)?;
                c.task = task;
                TaskConfig::Generation(c)
            }
        })
    }

    pub fn to_toml(&self) -> String {
        match self {
            TaskConfig::Classification(c) => toml::to_string(c),
            TaskConfig::Generation(c) => toml::to_string(c),
        }
        .expect("task configs serialize")
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            TaskConfig::Classification(c) => c.seed = seed,
            TaskConfig::Generation(c) => c.seed = seed,
        }
    }
}

/// Training and dev data for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Labeled {
        train: Vec<(String, usize)>,
        dev: Vec<(String, usize)>,
    },
    Parallel {
        train: Vec<(String, String)>,
        dev: Vec<(String, String)>,
    },
}

/// Dispatches `task` to the matching trainer.
pub fn run_task<T: Scalar>(
    task: Task,
    data: &TaskData,
    encoder: &Checkpoint<T>,
    vocab: &Vocab,
    cfg: &TaskConfig,
) -> Result<FinetuneOutcome<T>> {
    match (cfg, data) {
        (TaskConfig::Classification(c), TaskData::Labeled { train, dev })
            if !task.is_generation() =>
        {
            finetune_classifier(encoder, train, dev, vocab, c)
        }
        (TaskConfig::Generation(c), TaskData::Parallel { train, dev }) if task.is_generation() => {
            finetune_seq2seq(
                encoder,
                train,
                dev,
                vocab,
                &Seq2SeqTaskConfig { task, ..c.clone() },
            )
        }
        _ => Err(Error::Config(format!(
            "task {task} does not match the supplied config or data"
        ))),
    }
}
