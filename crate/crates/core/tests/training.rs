use guwen_core::checkpoint::build_model;
use guwen_core::corpus::Task;
use guwen_core::decoding::DecodeConfig;
use guwen_core::error::Error;
use guwen_core::finetune::{finetune_seq2seq, EncodedPair, Seq2SeqTaskConfig};
use guwen_core::model::{Mode, ModelConfig, ParamStore, Session, TokenBatch};
use guwen_core::optim::{adam_step, AdamConfig, AdamState};
use guwen_core::pretrain::{
    apply_mlm_mask, argmax, eval_mlm, pretrain, MaskingConfig, PretrainConfig, RunOutputs,
};
use guwen_core::synth::{alphabet, random_strings, Domain};
use guwen_core::tokenizer::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab(n: usize) -> Vocab {
    let chars: String = alphabet(n, 0).into_iter().collect();
    Vocab::build([chars.as_str()])
}

/// MLM loss and gradients for a fixed corrupted batch padded to `len`.
fn fixed_batch_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    input: &[Vec<u32>],
    labels: &[(usize, u32)],
    row_len: usize,
    len: usize,
) -> (f64, guwen_core::model::ParamGrads<f32>) {
    let batch = TokenBatch::from_rows_to(input, 0, len);
    let labels: Vec<(usize, usize)> = labels
        .iter()
        .map(|&(p, id)| ((p / row_len) * len + p % row_len, id as usize))
        .collect();
    let mut s = Session::new(cfg, params, Mode::Eval);
    let enc = s.encode(&batch).unwrap();
    let logits = s.mlm_logits(enc.hidden).unwrap();
    let loss = s.graph.cross_entropy(logits, &labels).unwrap();
    let value = s.value(loss).item() as f64;
    (value, s.backward(loss).unwrap())
}

fn masked_rows(
    v: &Vocab,
    rows: usize,
    len: usize,
    seed: u64,
) -> (Vec<Vec<u32>>, Vec<(usize, u32)>) {
    let ordinary = v.non_special_ids();
    let sp = v.specials();
    let ids: Vec<u32> = (0..rows * len)
        .map(|i| match i % len {
            0 => sp.cls,
            x if x == len - 1 => sp.sep,
            x => ordinary[(i * 7 + x * 3) % ordinary.len()],
        })
        .collect();
    let cfg = MaskingConfig {
        select_prob: 0.3,
        ..Default::default()
    };
    let m = apply_mlm_mask(&ids, v, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    assert!(!m.labels.is_empty());
    (
        m.input_ids.chunks(len).map(<[u32]>::to_vec).collect(),
        m.labels,
    )
}

#[test]
fn one_step_descends_on_a_frozen_batch() {
    let v = vocab(40);
    let cfg = ModelConfig::toy(v.len(), 32);
    let mut ckpt = build_model::<f32>(&cfg, 1).unwrap();
    let (rows, labels) = masked_rows(&v, 4, 12, 2);
    let (before, grads) = fixed_batch_loss(&cfg, &ckpt.params, &rows, &labels, 12, 12);
    let adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    adam_step(&mut ckpt.params, &grads, &mut AdamState::new(), &adam).unwrap();
    let (after, _) = fixed_batch_loss(&cfg, &ckpt.params, &rows, &labels, 12, 12);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn unlabeled_padding_leaves_the_loss_unchanged() {
    let v = vocab(40);
    let cfg = ModelConfig::toy(v.len(), 32);
    let ckpt = build_model::<f32>(&cfg, 3).unwrap();
    let (rows, labels) = masked_rows(&v, 3, 10, 4);
    let (a, _) = fixed_batch_loss(&cfg, &ckpt.params, &rows, &labels, 10, 10);
    let (b, _) = fixed_batch_loss(&cfg, &ckpt.params, &rows, &labels, 10, 17);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

fn small_run(seed: u64) -> PretrainConfig {
    PretrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_steps: 5,
        max_len: 16,
        seed,
        ..Default::default()
    }
}

#[test]
fn pretraining_is_deterministic_per_seed() {
    let v = vocab(30);
    let corpus = Domain::new(&alphabet(30, 0), 10, 3, 1).corpus(12, 4, 2);
    let cfg = ModelConfig::toy(v.len(), 16);
    let run = |seed| {
        pretrain::<f32, _>(
            &corpus,
            &v,
            &cfg,
            &small_run(seed),
            None,
            RunOutputs::default(),
        )
        .unwrap()
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert_eq!(a.losses, b.losses);
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );
    assert_ne!(a.losses, c.losses);
    assert_eq!(a.checkpoint.step, 5);

    // Continuing from a checkpoint keeps counting steps.
    let cont = pretrain::<f32, _>(
        &corpus,
        &v,
        &cfg,
        &small_run(7),
        Some(&a.checkpoint),
        RunOutputs::default(),
    )
    .unwrap();
    assert_eq!(cont.checkpoint.step, 10);
}

#[test]
fn mismatched_init_is_rejected() {
    let v = vocab(30);
    let corpus = ["一二三四五六"];
    let base = build_model::<f32>(&ModelConfig::toy(v.len(), 16), 1).unwrap();
    let wider = ModelConfig {
        hidden_size: 32,
        num_heads: 2,
        ff_size: 128,
        ..ModelConfig::toy(v.len(), 16)
    };
    let err = pretrain::<f32, _>(
        &corpus,
        &v,
        &wider,
        &small_run(1),
        Some(&base),
        RunOutputs::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::IncompatibleInit(_)), "{err}");
}

#[test]
fn untrained_perplexity_is_near_vocabulary_size() {
    let v = vocab(95);
    let text = Domain::new(&alphabet(95, 0), 30, 4, 5).corpus(40, 4, 6);
    let ckpt = build_model::<f32>(&ModelConfig::toy(v.len(), 32), 11).unwrap();
    let e = eval_mlm(&ckpt, &text, &v, &MaskingConfig::default(), 32, 1).unwrap();
    let size = v.len() as f64;
    assert!(
        e.perplexity > size / 2.0 && e.perplexity < size * 2.0,
        "{}",
        e.perplexity
    );
    assert!(e.masked_positions > 0);
}

#[test]
fn teacher_forcing_reproduces_memorized_targets() {
    let alpha = alphabet(12, 0);
    let v = vocab(12);
    let sources = random_strings(&alpha, 6, 3, 5, 1);
    let pairs: Vec<(String, String)> = sources
        .iter()
        .map(|s| (s.clone(), s.chars().rev().collect()))
        .collect();
    let encoder = build_model::<f32>(&ModelConfig::toy(v.len(), 16), 2).unwrap();
    let cfg = Seq2SeqTaskConfig {
        batch_size: 6,
        decoder_layers: 1,
        warmup_steps: 50,
        lr_scale: 0.5,
        epochs: 120,
        dropout: 0.0,
        max_len: 16,
        dev_decode: DecodeConfig::greedy(8),
        seed: 3,
        ..Seq2SeqTaskConfig::for_task(Task::Amct)
    };
    let ckpt = finetune_seq2seq(&encoder, &pairs, &pairs, &v, &cfg)
        .unwrap()
        .checkpoint;
    let sp = v.specials();
    for (s, t) in &pairs {
        let p = EncodedPair::new(s, t, &v, 16).unwrap();
        let src = TokenBatch::from_rows(std::slice::from_ref(&p.source), sp.pad);
        let input: Vec<u32> = std::iter::once(sp.cls)
            .chain(p.target.iter().copied())
            .collect();
        let tgt = TokenBatch::from_rows(std::slice::from_ref(&input), sp.pad);
        let mut sess = Session::new(&ckpt.config, &ckpt.params, Mode::Eval);
        let enc = sess.encode(&src).unwrap();
        let logits = sess.decode(&tgt, enc.hidden, &src.mask, src.len).unwrap();
        let logits = sess.value(logits).data().to_vec();
        let n = ckpt.config.vocab_size;
        let predicted: Vec<u32> = logits.chunks(n).map(|row| argmax(row) as u32).collect();
        let expected: Vec<u32> = p
            .target
            .iter()
            .copied()
            .chain(std::iter::once(sp.sep))
            .collect();
        assert_eq!(predicted, expected, "{s} -> {t}");
    }
}

#[test]
fn swapping_encoders_changes_no_shapes() {
    let cfg = ModelConfig::toy(20, 16);
    let target = cfg.clone().with_decoder(2);
    let a = build_model::<f32>(&cfg, 1)
        .unwrap()
        .adopt_encoder(&target, 5)
        .unwrap();
    let b = build_model::<f32>(&cfg, 2)
        .unwrap()
        .adopt_encoder(&target, 5)
        .unwrap();
    let shapes = |c: &guwen_core::Checkpoint32| {
        c.params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shapes(&a), shapes(&b));
    assert_eq!(
        a.params.get("decoder.output.weight"),
        b.params.get("decoder.output.weight")
    );
    assert_ne!(
        a.params.get("embeddings.word"),
        b.params.get("embeddings.word")
    );
}
