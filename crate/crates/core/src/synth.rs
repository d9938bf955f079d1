//! Seeded synthetic text for desk-scale experiments.
//!
//! A [`Domain`] is an inventory of fixed character phrases; sentences are
//! random phrase sequences, so a masked character is recoverable from its
//! neighbours once the phrases are learned.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// First code point used for synthetic characters (CJK Unified Ideographs).
const BASE: u32 = 0x4E00;

/// `n` distinct CJK characters starting `offset` code points into the block.
pub fn alphabet(n: usize, offset: u32) -> Vec<char> {
    (0..n as u32)
        .map(|i| char::from_u32(BASE + offset + i).expect("valid CJK code point"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub phrases: Vec<String>,
}

impl Domain {
    /// `count` random phrases of `len` characters drawn from `alphabet`.
    pub fn new(alphabet: &[char], count: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phrases = (0..count)
            .map(|_| {
                (0..len)
                    .map(|_| *alphabet.choose(&mut rng).unwrap())
                    .collect()
            })
            .collect();
        Domain { phrases }
    }

    /// A sentence of `phrases` phrases drawn uniformly from the inventory.
    pub fn sentence(&self, phrases: usize, rng: &mut impl Rng) -> String {
        (0..phrases)
            .map(|_| self.phrases.choose(rng).unwrap().as_str())
            .collect()
    }

    pub fn corpus(&self, sentences: usize, phrases: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sentences)
            .map(|_| self.sentence(phrases, &mut rng))
            .collect()
    }

    /// Sentences drawn only from phrase subset `topic` of `topics` equal slices,
    /// labeled with the topic index.
    pub fn topic_corpus(
        &self,
        topics: usize,
        sentences: usize,
        phrases: usize,
        seed: u64,
    ) -> Vec<(String, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = self.phrases.len() / topics;
        (0..sentences)
            .map(|_| {
                let t = rng.random_range(0..topics);
                let pool = &self.phrases[t * per..(t + 1) * per];
                let s: String = (0..phrases)
                    .map(|_| pool.choose(&mut rng).unwrap().as_str())
                    .collect();
                (s, t)
            })
            .collect()
    }
}

/// Random strings over `alphabet` with lengths in `min_len..=max_len`.
pub fn random_strings(
    alphabet: &[char],
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(min_len..=max_len);
            (0..n)
                .map(|_| *alphabet.choose(&mut rng).unwrap())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domains_are_seeded() {
        let a = alphabet(20, 0);
        assert_eq!(a.len(), 20);
        assert_eq!(a[0], '一');
        assert_eq!(Domain::new(&a, 5, 3, 1), Domain::new(&a, 5, 3, 1));
        let d = Domain::new(&a, 6, 3, 1);
        let c = d.corpus(4, 2, 9);
        assert!(c.iter().all(|s| s.chars().count() == 6));
        assert_eq!(c, d.corpus(4, 2, 9));
        let t = d.topic_corpus(2, 10, 2, 3);
        for (s, topic) in t {
            let chunk: String = s.chars().take(3).collect();
            assert!(d.phrases[topic * 3..topic * 3 + 3].contains(&chunk));
        }
    }
}
