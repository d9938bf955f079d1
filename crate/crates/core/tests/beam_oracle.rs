use guwen_core::checkpoint::build_model;
use guwen_core::decoding::{
    beam_search_with, greedy_search, Hypothesis, NextTokenScorer, OutputTokens, Seq2SeqScorer,
};
use guwen_core::model::ModelConfig;
use guwen_core::tokenizer::{encode_unpadded, tokenize, Vocab};
use guwen_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random next-token distributions, a pure function of (instance, prefix).
struct TableScorer {
    seed: u64,
    vocab: usize,
}

impl NextTokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let key = p.iter().fold(p.len() as u64, |k, &t| k * 8 + t as u64 + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1_000_003) ^ key);
                let w: Vec<f64> = (0..self.vocab)
                    .map(|_| rng.random::<f64>() + 1e-3)
                    .collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| (x / z).ln()).collect()
            })
            .collect())
    }
}

/// Best finished sequence by exhaustive enumeration of every allowed
/// continuation up to `max_len` tokens (EOS included).
fn enumerate_best(
    scorer: &mut dyn NextTokenScorer,
    out: &OutputTokens,
    max_len: usize,
    alpha: f64,
) -> (Vec<u32>, f64) {
    let allowed: Vec<u32> = (0..scorer.vocab_size() as u32)
        .filter(|t| !out.banned.contains(t) && *t != out.eos)
        .collect();
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut best: Option<(Vec<u32>, f64)> = None;
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = frontier.iter().map(|f| f.0.clone()).collect();
        let lps = scorer.log_probs(&prefixes).unwrap();
        let mut next = Vec::new();
        for ((prefix, lp), dist) in frontier.iter().zip(&lps) {
            let total = lp + dist[out.eos as usize];
            let score = if alpha == 0.0 {
                total
            } else {
                total / ((step + 1) as f64).powf(alpha)
            };
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((prefix.clone(), score));
            }
            for &t in &allowed {
                let mut p = prefix.clone();
                p.push(t);
                next.push((p, lp + dist[t as usize]));
            }
        }
        frontier = next;
    }
    best.unwrap()
}

fn check_instance(
    scorer: &mut dyn NextTokenScorer,
    out: &OutputTokens,
    max_len: usize,
    alpha: f64,
) {
    let outputs = scorer.vocab_size() - out.banned.len();
    let exhaustive = outputs.pow(max_len as u32);
    let beam = beam_search_with(scorer, out, exhaustive, max_len, alpha).unwrap();
    let (tokens, score) = enumerate_best(scorer, out, max_len, alpha);
    assert!(beam.finished);
    assert_eq!(beam.tokens, tokens, "alpha {alpha} max_len {max_len}");
    assert!((beam.score - score).abs() < 1e-9);
    assert!(!beam.tokens.contains(&out.eos) && beam.tokens.iter().all(|t| !out.banned.contains(t)));

    let one: Hypothesis = beam_search_with(scorer, out, 1, max_len, 0.0).unwrap();
    let greedy = greedy_search(scorer, out, max_len).unwrap();
    assert_eq!(one.tokens, greedy.tokens);
    assert_eq!(one.finished, greedy.finished);
    assert!((one.log_prob - greedy.log_prob).abs() < 1e-12);
}

#[test]
fn exhaustive_beam_matches_enumeration_on_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for instance in 0..100u64 {
        let vocab = rng.random_range(2..=3);
        let eos = rng.random_range(0..vocab as u32);
        let out = OutputTokens {
            eos,
            banned: vec![],
        };
        let max_len = rng.random_range(1..=3);
        let alpha = [0.0, 0.6, 1.0][instance as usize % 3];
        check_instance(
            &mut TableScorer {
                seed: instance,
                vocab,
            },
            &out,
            max_len,
            alpha,
        );
    }
}

#[test]
fn exhaustive_beam_matches_enumeration_on_tiny_models() {
    // Two characters plus [SEP]: three generable tokens.
    let vocab = Vocab::build(["甲乙"]);
    let out = OutputTokens::from_specials(vocab.specials());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for instance in 0..100u64 {
        let cfg = ModelConfig::toy(vocab.len(), 16).with_decoder(1);
        let mut ckpt = build_model::<f32>(&cfg, instance).unwrap();
        // Sharpen the output layer so ranking is not decided by rounding noise.
        let w = ckpt.params.get_mut("decoder.output.weight").unwrap();
        *w = w.map(|x| x * 40.0);
        let len = rng.random_range(1..=3);
        let text: String = (0..len)
            .map(|_| if rng.random::<bool>() { '甲' } else { '乙' })
            .collect();
        let source = encode_unpadded(&tokenize(&text), &vocab, 16);
        let mut scorer = Seq2SeqScorer::new(&ckpt, vocab.specials(), &source).unwrap();
        let max_len = rng.random_range(1..=3);
        let alpha = [0.0, 0.6, 1.0][instance as usize % 3];
        check_instance(&mut scorer, &out, max_len, alpha);
    }
}
