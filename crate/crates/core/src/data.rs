//! Synthetic parallel corpora with exactly known alignments.
//!
//! Source content tokens are `s0 .. s{V-1}` and target tokens `t0 .. t{V-1}`;
//! the lexical translation is `f(sN) = tN`. The content vocabulary is split
//! into three classes:
//!
//! * *verbs* (the last `max(1, V/8)` tokens) only ever appear sentence-final.
//!   With probability `long_range_prob` the sentence ends in a verb and the
//!   verb's translation is moved to target position 2 (position 1 for
//!   two-token sentences), mirroring verb-final to verb-second reordering.
//! * *particles* (the `max(1, V/8)` tokens before the verbs) are planted with
//!   probability `swap_prob` at the end of a three-token block; the target
//!   emits the particle first: `x_j x_{j+1} x_{j+2} -> f(x_{j+2}) f(x_j) f(x_{j+1})`.
//! * everything else is a plain token, translated in place.
//!
//! Both perturbations are deterministic functions of the source, so a
//! full-sentence model can learn them, while a Wait-1 model is forced to
//! anticipate. Every random draw happens regardless of the outcome, which
//! couples corpora generated with the same seed but different probabilities.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::types::{AlignmentSet, ParallelSample, TokenId, TokenSeq, Vocabulary};

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SynthSpec {
    /// Number of content tokens per language.
    pub vocab_size: usize,
    /// Inclusive source length range.
    pub length_range: (usize, usize),
    pub corpus_size: usize,
    pub swap_prob: f64,
    pub long_range_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 32,
            length_range: (6, 12),
            corpus_size: 1000,
            swap_prob: 0.0,
            long_range_prob: 0.5,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.swap_prob) {
            return Err(invalid(format!("swap_prob = {} outside [0, 1]", self.swap_prob)));
        }
        if !prob_ok(self.long_range_prob) {
            return Err(invalid(format!(
                "long_range_prob = {} outside [0, 1]",
                self.long_range_prob
            )));
        }
        let (lo, hi) = self.length_range;
        if lo < 2 || hi < lo {
            return Err(invalid(format!("length_range = ({lo}, {hi}) needs 2 <= min <= max")));
        }
        if self.vocab_size < 4 {
            return Err(invalid(format!("vocab_size = {} must be >= 4", self.vocab_size)));
        }
        Ok(())
    }
}

/// A list of samples with their source and target vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<ParallelSample>,
    pub vocab_src: Vocabulary,
    pub vocab_tgt: Vocabulary,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True when every sample only uses ids of its vocabularies.
    pub fn is_valid(&self) -> bool {
        self.samples
            .iter()
            .all(|s| self.vocab_src.validates(&s.source) && self.vocab_tgt.validates(&s.target))
    }

    /// Longest source or target sentence.
    pub fn max_len(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.source.len().max(s.target.len()))
            .max()
            .unwrap_or(0)
    }

    fn with_samples(&self, samples: Vec<ParallelSample>) -> Corpus {
        Corpus {
            samples,
            vocab_src: self.vocab_src.clone(),
            vocab_tgt: self.vocab_tgt.clone(),
        }
    }
}

/// Token classes of the synthetic language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Plain,
    Particle,
    Verb,
}

/// Class boundaries for a content vocabulary of size `vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthClasses {
    pub vocab_size: usize,
    pub n_particles: usize,
    pub n_verbs: usize,
}

impl SynthClasses {
    pub fn new(vocab_size: usize) -> Self {
        let n = (vocab_size / 8).max(1);
        SynthClasses {
            vocab_size,
            n_particles: n,
            n_verbs: n,
        }
    }

    pub fn n_plain(&self) -> usize {
        self.vocab_size - self.n_particles - self.n_verbs
    }

    /// Class of a content index (0-based, reserved ids excluded).
    pub fn class_of(&self, content: usize) -> TokenClass {
        if content >= self.vocab_size - self.n_verbs {
            TokenClass::Verb
        } else if content >= self.n_plain() {
            TokenClass::Particle
        } else {
            TokenClass::Plain
        }
    }
}

pub fn synthetic_vocabularies(vocab_size: usize) -> (Vocabulary, Vocabulary) {
    let src = Vocabulary::new((0..vocab_size).map(|n| format!("s{n}")));
    let tgt = Vocabulary::new((0..vocab_size).map(|n| format!("t{n}")));
    (src, tgt)
}

fn content_id(content: usize) -> TokenId {
    (content + Vocabulary::NUM_RESERVED) as TokenId
}

/// Generates a corpus; a pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let classes = SynthClasses::new(spec.vocab_size);
    let (vocab_src, vocab_tgt) = synthetic_vocabularies(spec.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.length_range;
    let plain = classes.n_plain();
    let particle_base = plain;
    let verb_base = spec.vocab_size - classes.n_verbs;

    let mut samples = Vec::with_capacity(spec.corpus_size);
    for _ in 0..spec.corpus_size {
        let len = rng.random_range(lo..=hi);
        let mut src: Vec<usize> = (0..len).map(|_| rng.random_range(0..plain)).collect();

        let u_final: f64 = rng.random();
        let verb = verb_base + rng.random_range(0..classes.n_verbs);
        let verb_final = u_final < spec.long_range_prob;
        if verb_final {
            src[len - 1] = verb;
        }

        // Block starts, 0-based; a block occupies j, j+1, j+2 inside the body.
        let mut blocks = Vec::new();
        let mut next_free = 0;
        for j in 0..hi {
            let u: f64 = rng.random();
            let particle = particle_base + rng.random_range(0..classes.n_particles);
            if j + 2 < len - 1 && j >= next_free && u < spec.swap_prob {
                src[j + 2] = particle;
                blocks.push(j);
                next_free = j + 3;
            }
        }

        let mut order: Vec<usize> = (0..len).collect();
        for &j in &blocks {
            order[j] = j + 2;
            order[j + 1] = j;
            order[j + 2] = j + 1;
        }
        if verb_final {
            order.retain(|&p| p != len - 1);
            let at = if len >= 3 { 1 } else { 0 };
            order.insert(at, len - 1);
        }

        let source = TokenSeq(src.iter().map(|&c| content_id(c)).collect());
        let target = TokenSeq(order.iter().map(|&p| content_id(src[p])).collect());
        let alignment = AlignmentSet::from_pairs(order.iter().enumerate().map(|(i, &p)| (p + 1, i + 1)), len, len)?;
        samples.push(ParallelSample::new(source, target, Some(alignment))?);
    }
    Ok(Corpus {
        samples,
        vocab_src,
        vocab_tgt,
    })
}

/// Word-level translation table `source id -> target id`, used to align
/// hypotheses against sources when the synthetic mapping is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    map: Vec<Option<TokenId>>,
}

impl Lexicon {
    /// Pairs `sN` with `tN` by surface; tokens without a partner stay unmapped.
    pub fn from_synthetic_surfaces(src: &Vocabulary, tgt: &Vocabulary) -> Self {
        let map = src
            .tokens()
            .iter()
            .enumerate()
            .map(|(id, surface)| {
                if Vocabulary::is_reserved(id as TokenId) {
                    return None;
                }
                surface.strip_prefix('s').and_then(|n| tgt.id(&format!("t{n}")))
            })
            .collect();
        Lexicon { map }
    }

    pub fn translate(&self, src: TokenId) -> Option<TokenId> {
        self.map.get(src as usize).copied().flatten()
    }

    /// One-to-one alignment between `source` and `hypothesis`: the k-th
    /// occurrence of a target token is linked to the k-th unused source
    /// position translating to it.
    pub fn align(&self, source: &TokenSeq, hypothesis: &TokenSeq) -> AlignmentSet {
        let mut used = alloc::vec![false; source.len()];
        let mut h = AlignmentSet::new();
        for (i, &t) in hypothesis.iter().enumerate() {
            let hit = source
                .iter()
                .enumerate()
                .find(|&(j, &s)| !used[j] && self.translate(s) == Some(t));
            if let Some((j, _)) = hit {
                used[j] = true;
                h.insert(j + 1, i + 1);
            }
        }
        h
    }
}

/// Deterministic shuffled partition into train / valid / test.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions ({a}, {b}, {c}) must be positive and sum to 1"
        )));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::round(a * n as f64) as usize;
    let n_valid = (libm::round(b * n as f64) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let take = |r: &[usize]| corpus.with_samples(r.iter().map(|&i| corpus.samples[i].clone()).collect());
    Ok((
        take(&idx[..n_train]),
        take(&idx[n_train..n_train + n_valid]),
        take(&idx[n_train + n_valid..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::anticipation_rate;
    use crate::types::waitk_policy;
    use proptest::prelude::*;

    fn spec(swap: f64, long: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            vocab_size: 16,
            length_range: (6, 10),
            corpus_size: 60,
            swap_prob: swap,
            long_range_prob: long,
            seed,
        }
    }

    fn corpus_ar(c: &Corpus) -> f64 {
        let mut anticipated = 0.0;
        let mut total = 0.0;
        for s in &c.samples {
            let g = waitk_policy(1, s.target.len(), s.source.len()).unwrap();
            let ar = anticipation_rate(s.target.len(), s.alignment.as_ref().unwrap(), &g).unwrap();
            anticipated += ar * s.target.len() as f64;
            total += s.target.len() as f64;
        }
        anticipated / total
    }

    #[test]
    fn monotone_spec_has_zero_ar() {
        let c = generate_synthetic(&spec(0.0, 0.0, 3)).unwrap();
        assert!(c.is_valid());
        for s in &c.samples {
            assert_eq!(s.source.len(), s.target.len());
            for k in 1..4 {
                let g = waitk_policy(k, s.target.len(), s.source.len()).unwrap();
                let ar = anticipation_rate(s.target.len(), s.alignment.as_ref().unwrap(), &g).unwrap();
                assert_eq!(ar, 0.0);
            }
        }
    }

    #[test]
    fn long_range_always_anticipates() {
        let mut sp = spec(0.0, 1.0, 5);
        sp.length_range = (6, 6);
        let c = generate_synthetic(&sp).unwrap();
        for s in &c.samples {
            let h = s.alignment.as_ref().unwrap();
            assert!(h.iter().any(|(j, i)| j > i));
            let g = waitk_policy(1, 6, 6).unwrap();
            assert!(anticipation_rate(6, h, &g).unwrap() > 0.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&spec(0.3, 0.5, 11)).unwrap();
        let b = generate_synthetic(&spec(0.3, 0.5, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec(0.3, 0.5, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic(&spec(1.5, 0.0, 1)).is_err());
        assert!(generate_synthetic(&spec(0.0, -0.1, 1)).is_err());
        let mut s = spec(0.0, 0.0, 1);
        s.vocab_size = 3;
        assert!(generate_synthetic(&s).is_err());
        s.vocab_size = 8;
        s.length_range = (1, 4);
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn alignment_is_a_bijection_and_lexicon_recovers_it() {
        let c = generate_synthetic(&spec(0.4, 0.5, 7)).unwrap();
        let lex = Lexicon::from_synthetic_surfaces(&c.vocab_src, &c.vocab_tgt);
        for s in &c.samples {
            let h = s.alignment.as_ref().unwrap();
            assert_eq!(h.len(), s.source.len());
            for i in 1..=s.target.len() {
                assert_eq!(h.iter().filter(|&(_, ti)| ti == i).count(), 1);
            }
            for (j, i) in h.iter() {
                assert_eq!(lex.translate(s.source.ids()[j - 1]), Some(s.target.ids()[i - 1]));
            }
            let hr = crate::metrics::hallucination_rate(s.target.len(), &lex.align(&s.source, &s.target)).unwrap();
            assert_eq!(hr, 0.0);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = generate_synthetic(&SynthSpec {
            corpus_size: 10,
            ..spec(0.0, 0.5, 2)
        })
        .unwrap();
        let (tr, va, te) = split(&c, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let again = split(&c, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(again.0, tr);
        assert_eq!(again.2, te);
        assert!(split(&c, (0.5, 0.5, 0.5), 9).is_err());
        assert!(split(&c, (1.0, 0.0, 0.0), 9).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let c = generate_synthetic(&SynthSpec {
            corpus_size: 37,
            ..spec(0.2, 0.5, 4)
        })
        .unwrap();
        let (tr, va, te) = split(&c, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 37);
        let mut all: Vec<_> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .cloned()
            .collect();
        let mut orig = c.samples.clone();
        let key = |s: &ParallelSample| (s.source.clone(), s.target.clone());
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn more_long_range_never_lowers_ar(seed in 0u64..1000, swap in 0.0f64..0.6, p in 0.0f64..1.0, dp in 0.0f64..1.0) {
            let lo = generate_synthetic(&spec(swap, p, seed)).unwrap();
            let hi = generate_synthetic(&spec(swap, (p + dp).min(1.0), seed)).unwrap();
            prop_assert!(corpus_ar(&hi) >= corpus_ar(&lo));
        }
    }
}
