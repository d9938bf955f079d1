use guwen_core::pretrain::{apply_mlm_mask, MaskingConfig};
use guwen_core::synth::alphabet;
use guwen_core::tokenizer::Vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn big_vocab() -> Vocab {
    let chars: String = alphabet(1000, 0).into_iter().collect();
    Vocab::build([chars.as_str()])
}

#[test]
fn monte_carlo_fractions() {
    let vocab = big_vocab();
    let s = vocab.specials();
    let ordinary = vocab.non_special_ids();
    let n = ordinary.len() as f64;
    let cfg = MaskingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut eligible, mut selected, mut masked, mut replaced, mut kept) =
        (0usize, 0usize, 0usize, 0usize, 0usize);
    while selected < 100_000 {
        let mut ids = vec![s.cls];
        ids.extend((0..126).map(|_| ordinary[rng.random_range(0..ordinary.len())]));
        ids.push(s.sep);
        let out = apply_mlm_mask(&ids, &vocab, &cfg, &mut rng);
        eligible += 126;
        selected += out.labels.len();
        for &(pos, orig) in &out.labels {
            let now = out.input_ids[pos];
            if now == s.mask {
                masked += 1;
            } else if now == orig {
                kept += 1;
            } else {
                replaced += 1;
            }
        }
    }
    let pct = |a: usize, b: usize| 100.0 * a as f64 / b as f64;
    // A random draw hits the original id with probability 1/n.
    let expect_replaced = 10.0 * (1.0 - 1.0 / n);
    let expect_kept = 10.0 + 10.0 / n;
    assert!(
        (pct(selected, eligible) - 15.0).abs() <= 0.5,
        "selection {}",
        pct(selected, eligible)
    );
    assert!(
        (pct(masked, selected) - 80.0).abs() <= 1.0,
        "mask {}",
        pct(masked, selected)
    );
    assert!(
        (pct(replaced, selected) - expect_replaced).abs() <= 1.0,
        "random {}",
        pct(replaced, selected)
    );
    assert!(
        (pct(kept, selected) - expect_kept).abs() <= 1.0,
        "keep {}",
        pct(kept, selected)
    );
}

fn sequence(vocab: &Vocab) -> impl Strategy<Value = Vec<u32>> {
    let len = vocab.len() as u32;
    proptest::collection::vec(0..len, 0..64)
}

proptest! {
    #[test]
    fn labels_hold_original_ids_and_specials_are_never_selected(
        ids in sequence(&Vocab::build(["甲乙丙丁戊己庚辛"])),
        seed in any::<u64>(),
        select in 0.0f64..=1.0,
    ) {
        let vocab = Vocab::build(["甲乙丙丁戊己庚辛"]);
        let cfg = MaskingConfig { select_prob: select, ..Default::default() };
        let out = apply_mlm_mask(&ids, &vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.input_ids.len(), ids.len());
        let mut last = None;
        for &(pos, orig) in &out.labels {
            prop_assert_eq!(orig, ids[pos]);
            prop_assert!(!vocab.is_special(orig));
            prop_assert!(last.is_none_or(|l| l < pos));
            last = Some(pos);
            let now = out.input_ids[pos];
            prop_assert!(now == vocab.specials().mask || !vocab.is_special(now));
        }
        for (pos, (&a, &b)) in ids.iter().zip(&out.input_ids).enumerate() {
            if !out.labels.iter().any(|l| l.0 == pos) {
                prop_assert_eq!(a, b);
            }
        }
        let pad = vocab.specials().pad;
        let mask: Vec<u8> = ids.iter().map(|&i| u8::from(i != pad)).collect();
        prop_assert_eq!(out.attention_mask, mask);
    }

    #[test]
    fn keep_positions_reconstruct_labels(ids in sequence(&Vocab::build(["甲乙丙丁"])), seed in any::<u64>()) {
        let vocab = Vocab::build(["甲乙丙丁"]);
        let cfg = MaskingConfig { select_prob: 1.0, mask_frac: 0.0, random_frac: 0.0, keep_frac: 1.0 };
        let out = apply_mlm_mask(&ids, &vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        for &(pos, orig) in &out.labels {
            prop_assert_eq!(out.input_ids[pos], orig);
        }
        prop_assert_eq!(out.labels.len(), ids.iter().filter(|&&i| !vocab.is_special(i)).count());
    }
}
