use guwen_core::eval::{bleu, bleu_text};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Occurrences of `gram` in `seq` by linear scan.
fn occurrences(seq: &[u8], gram: &[u8]) -> usize {
    if seq.len() < gram.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

/// Corpus BLEU from first principles: clipped counts per distinct candidate
/// n-gram, add-one on empty orders above unigrams, exponential brevity penalty.
fn brute_force_bleu(
    cands: &[Vec<u8>],
    refs: &[Vec<u8>],
    max_n: usize,
) -> (Vec<usize>, Vec<usize>, f64) {
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (c, r) in cands.iter().zip(refs) {
        for n in 1..=max_n {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<&[u8]> = Vec::new();
            for i in 0..=c.len() - n {
                totals[n - 1] += 1;
                let g = &c[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matches[n - 1] += occurrences(c, g).min(occurrences(r, g));
            }
        }
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if matches[0] == 0 || c_len == 0 {
        return (matches, totals, 0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    (
        matches,
        totals,
        (100.0 * bp * (log_sum / max_n as f64).exp()).min(100.0),
    )
}

fn random_seq(rng: &mut impl Rng, vocab: u8) -> Vec<u8> {
    let len = rng.random_range(0..=12);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn matches_brute_force_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let vocab = rng.random_range(1..=10u8);
        let pairs = rng.random_range(1..=4);
        let max_n = rng.random_range(1..=4);
        let cands: Vec<Vec<u8>> = (0..pairs).map(|_| random_seq(&mut rng, vocab)).collect();
        let refs: Vec<Vec<u8>> = (0..pairs).map(|_| random_seq(&mut rng, vocab)).collect();
        let got = bleu(&cands, &refs, max_n).unwrap();
        let (m, t, score) = brute_force_bleu(&cands, &refs, max_n);
        assert_eq!(got.matches, m, "case {case}");
        assert_eq!(got.totals, t, "case {case}");
        assert!((0.0..=100.0).contains(&got.score));
        worst = worst.max((got.score - score).abs());
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn hand_case_bleu2() {
    let r = bleu_text(&["a b c d"], &["a b c e"], 2).unwrap();
    // p1 = 3/4, p2 = 2/3, BP = 1: sqrt(1/2) * 100.
    assert!((r.score - 70.71).abs() < 0.01, "{}", r.score);
    assert!((r.score - 100.0 * 0.5f64.sqrt()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn permutation_invariant(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..6, 0..10), proptest::collection::vec(0u8..6, 0..10)),
            1..6,
        ),
        rotate in 0usize..6,
        max_n in 1usize..5,
    ) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        let (c2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let a = bleu(&c, &r, max_n).unwrap();
        let b = bleu(&c2, &r2, max_n).unwrap();
        prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    #[test]
    fn identity_scores_one_hundred(seqs in proptest::collection::vec(proptest::collection::vec(0u8..10, 1..12), 1..5)) {
        let r = bleu(&seqs, &seqs, 4).unwrap();
        prop_assert_eq!(r.score, 100.0);
    }
}
