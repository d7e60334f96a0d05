//! Vocabulary, token sequences, alignments and read policies.
//!
//! Positions inside [`AlignmentSet`] and [`ReadPolicy`] are 1-based: `g[i-1]`
//! is the number of source tokens read before writing target token `i`, and
//! the alignment pair `(j, i)` links source token `j` to target token `i`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, Result};

pub type TokenId = u32;

/// Bidirectional surface ↔ id mapping with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const BLANK: TokenId = 3;
    pub const UNK: TokenId = 4;
    pub const NUM_RESERVED: usize = 5;
    pub const RESERVED: [&'static str; 5] = ["<pad>", "<s>", "</s>", "<blank>", "<unk>"];

    /// Builds a vocabulary from content tokens; reserved ids are prepended and
    /// duplicates (or surfaces colliding with reserved ones) are dropped.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for r in Self::RESERVED {
            vocab.push(r);
        }
        for tok in content {
            vocab.push(tok.as_ref());
        }
        vocab
    }

    fn push(&mut self, surface: &str) {
        if self.index.contains_key(surface) {
            return;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
    }

    /// Rebuilds the reverse index (needed after deserialization).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::NUM_RESERVED
            || tokens[..Self::NUM_RESERVED]
                .iter()
                .zip(Self::RESERVED)
                .any(|(a, b)| a != b)
        {
            return Err(invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - Self::NUM_RESERVED
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Id of `surface`, or [`Vocabulary::UNK`].
    pub fn id_or_unk(&self, surface: &str) -> TokenId {
        self.id(surface).unwrap_or(Self::UNK)
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < Self::NUM_RESERVED
    }

    /// Maps a whitespace-separated sentence to ids.
    pub fn encode(&self, sentence: &str) -> TokenSeq {
        TokenSeq(sentence.split_whitespace().map(|t| self.id_or_unk(t)).collect())
    }

    /// Joins surfaces with single spaces.
    pub fn decode(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for (n, &id) in seq.iter().enumerate() {
            if n > 0 {
                out.push(' ');
            }
            out.push_str(self.surface(id).unwrap_or("<unk>"));
        }
        out
    }

    /// True when every id is valid and none is PAD.
    pub fn validates(&self, seq: &TokenSeq) -> bool {
        seq.iter().all(|&id| (id as usize) < self.len() && id != Self::PAD)
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn iter(&self) -> core::slice::Iter<'_, TokenId> {
        self.0.iter()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.0.contains(&id)
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a TokenId;
    type IntoIter = core::slice::Iter<'a, TokenId>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, id) in self.0.iter().enumerate() {
            if n > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

/// Set of 1-based `(source j, target i)` alignment links.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlignmentSet {
    pairs: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set after checking `1 ≤ j ≤ source_len` and `1 ≤ i ≤ target_len`.
    pub fn from_pairs<I>(pairs: I, source_len: usize, target_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = Self::new();
        for (j, i) in pairs {
            if j == 0 || j > source_len || i == 0 || i > target_len {
                return Err(invalid(format!(
                    "alignment pair ({j}, {i}) outside {source_len}x{target_len}"
                )));
            }
            set.pairs.insert((j, i));
        }
        Ok(set)
    }

    /// Inserts without range checks; returns false if already present.
    pub fn insert(&mut self, j: usize, i: usize) -> bool {
        self.pairs.insert((j, i))
    }

    pub fn contains(&self, j: usize, i: usize) -> bool {
        self.pairs.contains(&(j, i))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    /// Largest source / target index mentioned (0 when empty).
    pub fn max_indices(&self) -> (usize, usize) {
        self.pairs
            .iter()
            .fold((0, 0), |(mj, mi), &(j, i)| (mj.max(j), mi.max(i)))
    }
}

/// A source sentence, its translation and (optionally) their word alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParallelSample {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub alignment: Option<AlignmentSet>,
}

impl ParallelSample {
    pub fn new(source: TokenSeq, target: TokenSeq, alignment: Option<AlignmentSet>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(invalid("parallel samples need non-empty source and target"));
        }
        if let Some(h) = &alignment {
            let (mj, mi) = h.max_indices();
            if mj > source.len() || mi > target.len() {
                return Err(invalid("alignment exceeds sentence lengths"));
            }
        }
        Ok(ParallelSample {
            source,
            target,
            alignment,
        })
    }
}

/// Number of source tokens read before each target token (`g`, 1-based values).
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReadPolicy(pub Vec<usize>);

impl ReadPolicy {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `g_i` for a 1-based target position.
    pub fn at(&self, i: usize) -> usize {
        self.0[i - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Wait-k schedule: `g_i = min(k + i - 1, J)` for `i = 1..=I`.
pub fn waitk_policy(k: usize, target_len: usize, source_len: usize) -> Result<ReadPolicy> {
    if k == 0 || target_len == 0 || source_len == 0 {
        return Err(invalid(format!(
            "waitk_policy needs positive arguments (k={k}, I={target_len}, J={source_len})"
        )));
    }
    Ok(ReadPolicy(
        (1..=target_len).map(|i| (k + i - 1).min(source_len)).collect(),
    ))
}

/// Read schedule row for one (0-based) decoder step; also used for the EOS step.
#[inline]
pub(crate) fn waitk_read(k: usize, step: usize, source_len: usize) -> usize {
    (k + step).min(source_len)
}

/// True iff `g` has length `I`, is non-decreasing and stays within `[1, J]`.
pub fn validate_policy(g: &ReadPolicy, target_len: usize, source_len: usize) -> bool {
    g.len() == target_len && g.0.iter().all(|&v| v >= 1 && v <= source_len) && g.0.windows(2).all(|w| w[0] <= w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn waitk_examples() {
        assert_eq!(waitk_policy(3, 5, 4).unwrap().0, vec![3, 4, 4, 4, 4]);
        assert_eq!(waitk_policy(1, 3, 3).unwrap().0, vec![1, 2, 3]);
        assert_eq!(waitk_policy(9, 2, 4).unwrap().0, vec![4, 4]);
    }

    #[test]
    fn waitk_rejects_zero() {
        assert!(waitk_policy(0, 3, 3).is_err());
        assert!(waitk_policy(1, 0, 3).is_err());
        assert!(waitk_policy(1, 3, 0).is_err());
    }

    #[test]
    fn validate_examples() {
        assert!(validate_policy(&ReadPolicy(vec![1, 2, 3]), 3, 3));
        assert!(!validate_policy(&ReadPolicy(vec![2, 1]), 2, 3));
        assert!(!validate_policy(&ReadPolicy(vec![1, 4]), 2, 3));
        assert!(!validate_policy(&ReadPolicy(vec![1, 2]), 3, 3));
        assert!(!validate_policy(&ReadPolicy(vec![0, 2]), 2, 3));
    }

    #[test]
    fn vocabulary_is_bijective_with_reserved_prefix() {
        let v = Vocabulary::new(["a", "b", "a", "<s>"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<blank>"), Some(Vocabulary::BLANK));
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.surface(id).unwrap()), Some(id));
        }
        assert_eq!(v.encode("b zz a").0, vec![6, Vocabulary::UNK, 5]);
        assert_eq!(v.decode(&TokenSeq(vec![5, 6])), "a b");
        let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(rebuilt, v);
    }

    #[test]
    fn alignment_range_checked() {
        assert!(AlignmentSet::from_pairs([(1, 1), (2, 2)], 2, 2).is_ok());
        assert!(AlignmentSet::from_pairs([(3, 1)], 2, 2).is_err());
        assert!(AlignmentSet::from_pairs([(0, 1)], 2, 2).is_err());
        let h = AlignmentSet::from_pairs([(1, 1), (1, 1)], 2, 2).unwrap();
        assert_eq!(h.len(), 1);
    }

    proptest! {
        #[test]
        fn waitk_always_valid(k in 1usize..20, i in 1usize..30, j in 1usize..30) {
            let g = waitk_policy(k, i, j).unwrap();
            prop_assert!(validate_policy(&g, i, j));
        }

        #[test]
        fn waitk_monotone_in_k(k in 1usize..20, dk in 1usize..5, i in 1usize..30, j in 1usize..30) {
            let g = waitk_policy(k, i, j).unwrap();
            let g2 = waitk_policy(k + dk, i, j).unwrap();
            prop_assert!(g.0.iter().zip(&g2.0).all(|(a, b)| b >= a));
        }

        #[test]
        fn waitk_saturates_to_full_sentence(extra in 0usize..5, i in 1usize..30, j in 1usize..30) {
            let g = waitk_policy(j + extra, i, j).unwrap();
            prop_assert!(g.0.iter().all(|&v| v == j));
        }
    }
}
