//! Translation quality and latency metrics: BLEU, Average Lagging,
//! anticipation rate (AR) and hallucination rate (HR).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math::{exp, ln};
use crate::types::{validate_policy, waitk_policy, AlignmentSet, ReadPolicy, TokenId, TokenSeq};

/// How zero n-gram matches are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Smoothing {
    None,
    /// `(matches + 1) / (candidates + 1)` at every order.
    AddOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_ngram_order: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::sentence()
    }
}

impl BleuConfig {
    /// Smoothed sentence-level BLEU used for rewards.
    pub fn sentence() -> Self {
        BleuConfig {
            max_ngram_order: 4,
            smoothing: Smoothing::AddOne,
        }
    }

    /// Unsmoothed BLEU over pooled statistics, as used for reporting.
    pub fn corpus() -> Self {
        BleuConfig {
            max_ngram_order: 4,
            smoothing: Smoothing::None,
        }
    }

    fn check(&self) -> Result<()> {
        if !(1..=4).contains(&self.max_ngram_order) {
            return Err(invalid(format!(
                "max_ngram_order = {} outside 1..=4",
                self.max_ngram_order
            )));
        }
        Ok(())
    }
}

/// Clipped n-gram matches and candidate counts per order, plus lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub candidates: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(hypothesis: &TokenSeq, reference: &TokenSeq, max_order: usize) -> Self {
        let mut stats = BleuStats {
            hyp_len: hypothesis.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=max_order {
            let hyp = ngram_counts(hypothesis.ids(), n);
            let refc = ngram_counts(reference.ids(), n);
            stats.candidates[n - 1] = hypothesis.len().saturating_sub(n - 1);
            stats.matches[n - 1] = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.candidates[n] += other.candidates[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU on a 0–100 scale.
    pub fn score(&self, cfg: &BleuConfig) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_prec = 0.0;
        for n in 0..cfg.max_ngram_order {
            let (m, c) = (self.matches[n] as f64, self.candidates[n] as f64);
            let p = match cfg.smoothing {
                Smoothing::AddOne => (m + 1.0) / (c + 1.0),
                Smoothing::None => {
                    if m == 0.0 {
                        return 0.0;
                    }
                    m / c
                }
            };
            log_prec += ln(p);
        }
        log_prec /= cfg.max_ngram_order as f64;
        let bp = if self.hyp_len >= self.ref_len {
            0.0
        } else {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        };
        100.0 * exp(log_prec + bp)
    }
}

fn ngram_counts(ids: &[TokenId], n: usize) -> BTreeMap<&[TokenId], usize> {
    let mut counts = BTreeMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU of `hypothesis` against a single non-empty `reference`.
pub fn bleu(hypothesis: &TokenSeq, reference: &TokenSeq, cfg: &BleuConfig) -> Result<f64> {
    cfg.check()?;
    if reference.is_empty() {
        return Err(invalid("BLEU reference must be non-empty"));
    }
    Ok(BleuStats::collect(hypothesis, reference, cfg.max_ngram_order).score(cfg))
}

/// BLEU over pooled statistics of all `(hypothesis, reference)` pairs.
pub fn corpus_bleu(pairs: &[(TokenSeq, TokenSeq)], cfg: &BleuConfig) -> Result<f64> {
    cfg.check()?;
    if pairs.is_empty() {
        return Err(invalid("corpus BLEU needs at least one pair"));
    }
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        if r.is_empty() {
            return Err(invalid("BLEU reference must be non-empty"));
        }
        total.add(&BleuStats::collect(h, r, cfg.max_ngram_order));
    }
    Ok(total.score(cfg))
}

/// Average Lagging of a read schedule `g` with source length `J` and
/// hypothesis length `I`:
/// `AL = 1/τ Σ_{i≤τ} (g_i − (i−1)·J/I)`, `τ` = first step that has read
/// the whole source (or `I`).
pub fn average_lagging(g: &ReadPolicy, source_len: usize, hyp_len: usize) -> Result<f64> {
    if hyp_len == 0 || source_len == 0 || !validate_policy(g, hyp_len, source_len) {
        return Err(invalid("average_lagging needs a valid non-empty read policy"));
    }
    let rate = hyp_len as f64 / source_len as f64;
    let tau = g
        .as_slice()
        .iter()
        .position(|&v| v == source_len)
        .map_or(hyp_len, |p| p + 1);
    let sum: f64 = (1..=tau).map(|i| g.at(i) as f64 - (i - 1) as f64 / rate).sum();
    Ok(sum / tau as f64)
}

/// Number of anticipated target positions: those aligned to at least one
/// source token beyond `g_i`.
pub fn anticipated_count(target_len: usize, h: &AlignmentSet, g: &ReadPolicy) -> Result<usize> {
    if g.len() != target_len {
        return Err(invalid(format!(
            "policy length {} != target length {target_len}",
            g.len()
        )));
    }
    let mut flagged = alloc::vec![false; target_len];
    for (j, i) in h.iter() {
        if j == 0 || i == 0 || i > target_len {
            return Err(invalid(format!("alignment pair ({j}, {i}) out of range")));
        }
        if j > g.at(i) {
            flagged[i - 1] = true;
        }
    }
    Ok(flagged.iter().filter(|&&f| f).count())
}

/// Fraction of target positions that are forcibly anticipated under `g`.
pub fn anticipation_rate(target_len: usize, h: &AlignmentSet, g: &ReadPolicy) -> Result<f64> {
    if target_len == 0 {
        return Err(invalid("anticipation rate needs a non-empty target"));
    }
    Ok(anticipated_count(target_len, h, g)? as f64 / target_len as f64)
}

/// Number of hypothesis positions without any alignment link.
pub fn unaligned_count(hyp_len: usize, h: &AlignmentSet) -> Result<usize> {
    let mut covered = alloc::vec![false; hyp_len];
    for (j, i) in h.iter() {
        if j == 0 || i == 0 || i > hyp_len {
            return Err(invalid(format!("alignment pair ({j}, {i}) out of range")));
        }
        covered[i - 1] = true;
    }
    Ok(covered.iter().filter(|&&c| !c).count())
}

/// Fraction of hypothesis tokens aligned to no source token.
pub fn hallucination_rate(hyp_len: usize, h: &AlignmentSet) -> Result<f64> {
    if hyp_len == 0 {
        return Err(invalid("hallucination rate needs a non-empty hypothesis"));
    }
    Ok(unaligned_count(hyp_len, h)? as f64 / hyp_len as f64)
}

/// One evaluated sentence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SentenceMetrics {
    pub bleu: f64,
    pub al: f64,
    pub ar: f64,
    pub hr: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus-level metrics of one system at one latency.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    /// Corpus BLEU (pooled, unsmoothed), 0–100.
    pub bleu: f64,
    /// Mean sentence AL in source tokens.
    pub al: f64,
    /// Token-pooled anticipation rate of the references under Wait-k.
    pub ar: f64,
    /// Token-pooled hallucination rate of the hypotheses.
    pub hr: f64,
    pub per_sentence: Vec<SentenceMetrics>,
}

/// Everything needed to score one test sentence.
#[derive(Debug, Clone)]
pub struct EvalItem<'a> {
    pub source_len: usize,
    pub reference: &'a TokenSeq,
    pub reference_alignment: &'a AlignmentSet,
    pub hypothesis: &'a TokenSeq,
    pub hypothesis_alignment: &'a AlignmentSet,
    /// Read trace realized while decoding `hypothesis`.
    pub trace: &'a ReadPolicy,
}

/// Scores a decoded test set at latency `k`.
///
/// Empty hypotheses contribute BLEU statistics but no AL / HR terms.
pub fn evaluate(items: &[EvalItem<'_>], k: usize) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(invalid("cannot evaluate an empty test set"));
    }
    let sent_cfg = BleuConfig::sentence();
    let corpus_cfg = BleuConfig::corpus();
    let mut pooled = BleuStats::default();
    let (mut anticipated, mut ref_tokens) = (0usize, 0usize);
    let (mut unaligned, mut hyp_tokens) = (0usize, 0usize);
    let (mut al_sum, mut al_n) = (0.0, 0usize);
    let mut per_sentence = Vec::with_capacity(items.len());

    for it in items {
        let stats = BleuStats::collect(it.hypothesis, it.reference, 4);
        pooled.add(&stats);
        let g_ref = waitk_policy(k, it.reference.len(), it.source_len)?;
        let ant = anticipated_count(it.reference.len(), it.reference_alignment, &g_ref)?;
        anticipated += ant;
        ref_tokens += it.reference.len();
        let (al, hr) = if it.hypothesis.is_empty() {
            (0.0, 0.0)
        } else {
            let al = average_lagging(it.trace, it.source_len, it.hypothesis.len())?;
            al_sum += al;
            al_n += 1;
            let un = unaligned_count(it.hypothesis.len(), it.hypothesis_alignment)?;
            unaligned += un;
            hyp_tokens += it.hypothesis.len();
            (al, un as f64 / it.hypothesis.len() as f64)
        };
        per_sentence.push(SentenceMetrics {
            bleu: stats.score(&sent_cfg),
            al,
            ar: ant as f64 / it.reference.len() as f64,
            hr,
            hyp_len: it.hypothesis.len(),
            ref_len: it.reference.len(),
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        bleu: pooled.score(&corpus_cfg),
        al: if al_n == 0 { 0.0 } else { al_sum / al_n as f64 },
        ar: ratio(anticipated, ref_tokens),
        hr: ratio(unaligned, hyp_tokens),
        per_sentence,
    })
}

/// Token-pooled AR of a set of references under Wait-k.
pub fn corpus_anticipation_rate<'a, I>(items: I, k: usize) -> Result<f64>
where
    I: IntoIterator<Item = (usize, &'a TokenSeq, &'a AlignmentSet)>,
{
    let (mut ant, mut total) = (0usize, 0usize);
    for (source_len, reference, h) in items {
        if reference.is_empty() {
            continue;
        }
        let g = waitk_policy(k, reference.len(), source_len)?;
        ant += anticipated_count(reference.len(), h, &g)?;
        total += reference.len();
    }
    if total == 0 {
        return Err(invalid("no reference tokens"));
    }
    Ok(ant as f64 / total as f64)
}
