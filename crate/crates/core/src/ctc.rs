//! Connectionist Temporal Classification machinery for the tailor.
//!
//! A length-`T` path `a` over `width` symbols (one of which is the blank)
//! collapses to a normal sequence by merging runs of identical symbols and
//! then deleting blanks. [`ctc_marginal`] sums the probability of every path
//! collapsing to a given sequence with the usual blank-interleaved forward
//! recursion; [`ctc_loss_and_grad`] adds the backward pass to obtain exact
//! gradients with respect to the pre-softmax scores.
//!
//! All accumulation is done in log space.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::math::{argmax, exp, ln, log_add, log_softmax_in_place};
use crate::types::{TokenId, TokenSeq};

/// Upsampling factor applied to the ground truth before the tailor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpsampleConfig {
    pub factor: usize,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        UpsampleConfig { factor: 2 }
    }
}

/// `T` independent categorical rows over `width` symbols, stored as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistributions {
    frames: usize,
    width: usize,
    blank: TokenId,
    log_probs: Vec<f64>,
}

impl PositionDistributions {
    /// From row-major probabilities; each row must sum to 1 within `1e-9`.
    pub fn from_probs(frames: usize, width: usize, blank: TokenId, probs: &[f64]) -> Result<Self> {
        Self::check_shape(frames, width, blank, probs.len())?;
        for (t, row) in probs.chunks(width).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("row {t} is not a probability distribution")));
            }
        }
        Ok(PositionDistributions {
            frames,
            width,
            blank,
            log_probs: probs.iter().map(|&p| ln(p)).collect(),
        })
    }

    /// From row-major pre-softmax scores.
    pub fn from_logits(frames: usize, width: usize, blank: TokenId, logits: &[f64]) -> Result<Self> {
        Self::check_shape(frames, width, blank, logits.len())?;
        let mut log_probs = logits.to_vec();
        for row in log_probs.chunks_mut(width) {
            log_softmax_in_place(row);
        }
        Ok(PositionDistributions {
            frames,
            width,
            blank,
            log_probs,
        })
    }

    fn check_shape(frames: usize, width: usize, blank: TokenId, len: usize) -> Result<()> {
        if width < 2 || blank as usize >= width || len != frames * width {
            return Err(invalid(format!(
                "bad distribution shape: {frames}x{width}, blank {blank}, {len} values"
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    #[inline]
    pub fn log_prob(&self, t: usize, sym: TokenId) -> f64 {
        self.log_probs[t * self.width + sym as usize]
    }

    pub fn prob(&self, t: usize, sym: TokenId) -> f64 {
        exp(self.log_prob(t, sym))
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.width..(t + 1) * self.width]
    }

    /// Probability row `t`.
    pub fn row(&self, t: usize) -> Vec<f64> {
        self.log_row(t).iter().map(|&l| exp(l)).collect()
    }

    /// Log-probability of one full path.
    pub fn path_log_prob(&self, path: &[TokenId]) -> f64 {
        path.iter().enumerate().map(|(t, &a)| self.log_prob(t, a)).sum()
    }
}

/// Repeats every token `factor` times: `a b -> a a b b` for factor 2.
pub fn upsample(y: &TokenSeq, cfg: &UpsampleConfig) -> Result<TokenSeq> {
    if y.is_empty() {
        return Err(invalid("cannot upsample an empty sequence"));
    }
    if cfg.factor == 0 {
        return Err(invalid("upsample factor must be >= 1"));
    }
    Ok(TokenSeq(
        y.iter().flat_map(|&t| core::iter::repeat_n(t, cfg.factor)).collect(),
    ))
}

/// Merges runs of identical symbols, then removes blanks.
pub fn collapse(a: &[TokenId], blank: TokenId) -> TokenSeq {
    let mut out = Vec::with_capacity(a.len());
    let mut prev = None;
    for &sym in a {
        if prev != Some(sym) && sym != blank {
            out.push(sym);
        }
        prev = Some(sym);
    }
    TokenSeq(out)
}

/// Minimum number of frames a path collapsing to `s` needs.
pub fn required_frames(s: &[TokenId]) -> usize {
    s.len() + s.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(dist: &PositionDistributions, s: &[TokenId]) -> Result<()> {
    for &sym in s {
        if sym == dist.blank {
            return Err(invalid("CTC target contains the blank symbol"));
        }
        if sym as usize >= dist.width {
            return Err(invalid(format!("CTC target symbol {sym} outside width {}", dist.width)));
        }
    }
    Ok(())
}

/// Blank-interleaved label sequence `_ s1 _ s2 ... _`.
fn extended(s: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * s.len() + 1);
    ext.push(blank);
    for &sym in s {
        ext.push(sym);
        ext.push(blank);
    }
    ext
}

/// Whether the recursion may skip from `u-2` to `u`.
#[inline]
fn can_skip(ext: &[TokenId], u: usize, blank: TokenId) -> bool {
    u >= 2 && ext[u] != blank && ext[u] != ext[u - 2]
}

/// Forward variables `log α_t(u)` (emission at `t` included), row-major `T × |ext|`.
fn forward(dist: &PositionDistributions, ext: &[TokenId]) -> Vec<f64> {
    let (frames, n) = (dist.frames, ext.len());
    let mut alpha = vec![f64::NEG_INFINITY; frames * n];
    if frames == 0 {
        return alpha;
    }
    alpha[0] = dist.log_prob(0, ext[0]);
    if n > 1 {
        alpha[1] = dist.log_prob(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        let cur = &mut cur[..n];
        // Paths that are still on track must have emitted at most 2t+2 labels.
        let hi = n.min(2 * t + 2);
        for u in 0..hi {
            let mut acc = prev[u];
            if u >= 1 {
                acc = log_add(acc, prev[u - 1]);
            }
            if can_skip(ext, u, dist.blank) {
                acc = log_add(acc, prev[u - 2]);
            }
            if acc != f64::NEG_INFINITY {
                cur[u] = acc + dist.log_prob(t, ext[u]);
            }
        }
    }
    alpha
}

/// Backward variables `log β_t(u)` excluding the emission at `t`.
fn backward(dist: &PositionDistributions, ext: &[TokenId]) -> Vec<f64> {
    let (frames, n) = (dist.frames, ext.len());
    let mut beta = vec![f64::NEG_INFINITY; frames * n];
    if frames == 0 {
        return beta;
    }
    let last = (frames - 1) * n;
    beta[last + n - 1] = 0.0;
    if n > 1 {
        beta[last + n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let next = &next[..n];
        for (u, out) in cur.iter_mut().enumerate().take(n) {
            let mut acc = f64::NEG_INFINITY;
            for v in [u, u + 1, u + 2] {
                if v >= n || next[v] == f64::NEG_INFINITY {
                    continue;
                }
                if v == u + 2 && !can_skip(ext, v, dist.blank) {
                    continue;
                }
                acc = log_add(acc, next[v] + dist.log_prob(t + 1, ext[v]));
            }
            *out = acc;
        }
    }
    beta
}

fn total_from_alpha(alpha: &[f64], frames: usize, n: usize) -> f64 {
    if frames == 0 {
        return if n == 1 { 0.0 } else { f64::NEG_INFINITY };
    }
    let last = &alpha[(frames - 1) * n..frames * n];
    if n == 1 {
        last[0]
    } else {
        log_add(last[n - 1], last[n - 2])
    }
}

/// `log Σ_{a ∈ Γ(s)} Π_t p_t(a_t)`; `-inf` when no path of length `T` collapses to `s`.
pub fn ctc_marginal(dist: &PositionDistributions, s: &TokenSeq) -> Result<f64> {
    check_target(dist, s.ids())?;
    if required_frames(s.ids()) > dist.frames {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extended(s.ids(), dist.blank);
    let alpha = forward(dist, &ext);
    Ok(total_from_alpha(&alpha, dist.frames, ext.len()))
}

/// `log p(s)` and its gradient with respect to the pre-softmax scores of
/// `dist` (row-major, same shape).
pub fn ctc_log_marginal_grad(dist: &PositionDistributions, s: &TokenSeq) -> Result<(f64, Vec<f64>)> {
    check_target(dist, s.ids())?;
    let required = required_frames(s.ids());
    if required > dist.frames {
        return Err(Error::InfeasibleTarget {
            required,
            frames: dist.frames,
        });
    }
    let ext = extended(s.ids(), dist.blank);
    let n = ext.len();
    let alpha = forward(dist, &ext);
    let beta = backward(dist, &ext);
    let total = total_from_alpha(&alpha, dist.frames, n);
    if total == f64::NEG_INFINITY {
        return Err(Error::InfeasibleTarget {
            required,
            frames: dist.frames,
        });
    }
    // d log p / d z_{t,k} = γ_t(k) − p_t(k), where γ_t(k) is the posterior
    // occupancy of symbol k at frame t.
    let w = dist.width;
    let mut grad = vec![0.0; dist.frames * w];
    let mut occ = vec![f64::NEG_INFINITY; w];
    for t in 0..dist.frames {
        occ.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for u in 0..n {
            let a = alpha[t * n + u];
            let b = beta[t * n + u];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let sym = ext[u] as usize;
            occ[sym] = log_add(occ[sym], a + b);
        }
        let row = &mut grad[t * w..(t + 1) * w];
        for k in 0..w {
            let posterior = if occ[k] == f64::NEG_INFINITY {
                0.0
            } else {
                exp(occ[k] - total)
            };
            row[k] = posterior - dist.prob(t, k as TokenId);
        }
    }
    Ok((total, grad))
}

/// CTC negative log-likelihood of `y` and its gradient with respect to the
/// pre-softmax scores that produced `dist`.
pub fn ctc_loss_and_grad(dist: &PositionDistributions, y: &TokenSeq) -> Result<(f64, Vec<f64>)> {
    if y.is_empty() {
        return Err(invalid("CTC loss needs a non-empty target"));
    }
    let (logp, mut grad) = ctc_log_marginal_grad(dist, y)?;
    grad.iter_mut().for_each(|g| *g = -*g);
    Ok((-logp, grad))
}

/// Draws `n` length-`T` paths, each position sampled independently.
pub fn sample_paths(dist: &PositionDistributions, n: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_path(dist, &mut rng)).collect()
}

/// One path drawn with a caller-provided generator.
pub fn sample_path<R: Rng + ?Sized>(dist: &PositionDistributions, rng: &mut R) -> TokenSeq {
    let mut path = Vec::with_capacity(dist.frames);
    for t in 0..dist.frames {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (k, &lp) in dist.log_row(t).iter().enumerate() {
            let p = exp(lp);
            acc += p;
            if p > 0.0 && u < acc {
                pick = Some(k);
                break;
            }
        }
        // Rounding can leave u above the accumulated mass; take the last
        // symbol with non-zero probability.
        let k = pick.unwrap_or_else(|| {
            dist.log_row(t)
                .iter()
                .rposition(|&lp| lp > f64::NEG_INFINITY)
                .unwrap_or(0)
        });
        path.push(k as TokenId);
    }
    TokenSeq(path)
}

/// Position-wise argmax; ties go to the lowest symbol id.
pub fn argmax_path(dist: &PositionDistributions) -> TokenSeq {
    TokenSeq((0..dist.frames).map(|t| argmax(dist.log_row(t)) as TokenId).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use proptest::prelude::*;
    use rand::Rng;

    fn all_paths(frames: usize, width: usize) -> Vec<Vec<TokenId>> {
        let mut out = vec![vec![]];
        for _ in 0..frames {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..width as TokenId).map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn random_dist(frames: usize, width: usize, seed: u64) -> (PositionDistributions, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..frames * width).map(|_| rng.random_range(-2.0..2.0)).collect();
        (
            PositionDistributions::from_logits(frames, width, 0, &logits).unwrap(),
            logits,
        )
    }

    #[test]
    fn upsample_examples() {
        let y = TokenSeq(vec![5, 6]);
        assert_eq!(upsample(&y, &UpsampleConfig { factor: 2 }).unwrap().0, vec![5, 5, 6, 6]);
        assert_eq!(upsample(&y, &UpsampleConfig { factor: 1 }).unwrap(), y);
        assert_eq!(
            upsample(&TokenSeq(vec![5]), &UpsampleConfig { factor: 3 }).unwrap().0,
            vec![5, 5, 5]
        );
        assert!(upsample(&TokenSeq(vec![]), &UpsampleConfig::default()).is_err());
    }

    #[test]
    fn collapse_examples() {
        let b = 0;
        assert_eq!(collapse(&[1, 1, b, 2, 2, b], b).0, vec![1, 2]);
        assert_eq!(collapse(&[1, b, 1, 2], b).0, vec![1, 1, 2]);
        assert!(collapse(&[b, b, b], b).is_empty());
    }

    #[test]
    fn marginal_two_frames_uniform() {
        // V = {a}: paths aa, a_, _a collapse to "a" -> 0.75.
        let d = PositionDistributions::from_probs(2, 2, 0, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let lp = ctc_marginal(&d, &TokenSeq(vec![1])).unwrap();
        assert!((lp - ln(0.75)).abs() < 1e-15);
    }

    #[test]
    fn marginal_empty_and_infeasible() {
        let (d, _) = random_dist(3, 3, 4);
        let empty = ctc_marginal(&d, &TokenSeq(vec![])).unwrap();
        let all_blank: f64 = (0..3).map(|t| d.log_prob(t, 0)).sum();
        assert!((empty - all_blank).abs() < 1e-12);
        assert_eq!(
            ctc_marginal(&d, &TokenSeq(vec![1, 2, 1, 2])).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(ctc_marginal(&d, &TokenSeq(vec![1, 1, 1])).unwrap(), f64::NEG_INFINITY);
        assert!(ctc_marginal(&d, &TokenSeq(vec![0])).is_err());
        assert!(matches!(
            ctc_loss_and_grad(&d, &TokenSeq(vec![1, 1, 1])),
            Err(Error::InfeasibleTarget { required: 5, frames: 3 })
        ));
    }

    #[test]
    fn marginal_matches_enumeration() {
        for (seed, frames, width) in [(1, 4, 3), (2, 5, 2), (3, 3, 4), (4, 6, 3)] {
            let (d, _) = random_dist(frames, width, seed);
            let mut by_output: BTreeMap<TokenSeq, f64> = BTreeMap::new();
            for p in all_paths(frames, width) {
                *by_output.entry(collapse(&p, 0)).or_insert(0.0) += exp(d.path_log_prob(&p));
            }
            let mut total = 0.0;
            for (s, p) in &by_output {
                let got = exp(ctc_marginal(&d, s).unwrap());
                assert!((got - p).abs() < 1e-12, "{s}: {got} vs {p}");
                total += got;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_path_has_zero_loss() {
        // One-hot rows on "1 2 3", T = |y|.
        let mut probs = vec![0.0; 3 * 4];
        for (t, s) in [1, 2, 3].iter().enumerate() {
            probs[t * 4 + s] = 1.0;
        }
        let d = PositionDistributions::from_probs(3, 4, 0, &probs).unwrap();
        let (loss, _) = ctc_loss_and_grad(&d, &TokenSeq(vec![1, 2, 3])).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10u64 {
            let (d, logits) = random_dist(5, 3, 100 + seed);
            let y = TokenSeq(vec![1 + (seed % 2) as u32, 2]);
            let (_, grad) = ctc_loss_and_grad(&d, &y).unwrap();
            let eps = 1e-5;
            for idx in 0..logits.len() {
                let mut plus = logits.clone();
                plus[idx] += eps;
                let mut minus = logits.clone();
                minus[idx] -= eps;
                let lp = ctc_loss_and_grad(&PositionDistributions::from_logits(5, 3, 0, &plus).unwrap(), &y)
                    .unwrap()
                    .0;
                let lm = ctc_loss_and_grad(&PositionDistributions::from_logits(5, 3, 0, &minus).unwrap(), &y)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - grad[idx]).abs() < 1e-7,
                    "seed {seed} idx {idx}: {fd} vs {}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_onehot_exact() {
        let (d, _) = random_dist(4, 3, 9);
        assert_eq!(sample_paths(&d, 20, 5), sample_paths(&d, 20, 5));
        let mut probs = vec![0.0; 4 * 3];
        for (t, s) in [2, 0, 1, 1].iter().enumerate() {
            probs[t * 3 + s] = 1.0;
        }
        let onehot = PositionDistributions::from_probs(4, 3, 0, &probs).unwrap();
        let am = argmax_path(&onehot);
        assert_eq!(am.0, vec![2, 0, 1, 1]);
        assert!(sample_paths(&onehot, 50, 1).iter().all(|p| *p == am));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let d = PositionDistributions::from_probs(1, 4, 3, &[0.25; 4]).unwrap();
        assert_eq!(argmax_path(&d).0, vec![0]);
    }

    #[test]
    fn empirical_frequencies_within_three_standard_errors() {
        let (d, _) = random_dist(3, 3, 21);
        let n = 10_000;
        let paths = sample_paths(&d, n, 77);
        for t in 0..3 {
            for k in 0..3u32 {
                let p = d.prob(t, k);
                let freq = paths.iter().filter(|s| s.0[t] == k).count() as f64 / n as f64;
                let se = libm::sqrt(p * (1.0 - p) / n as f64);
                assert!((freq - p).abs() < 3.0 * se, "t{t} k{k}: {freq} vs {p}");
            }
        }
    }

    proptest! {
        #[test]
        fn collapse_is_idempotent_on_repeat_free_outputs(path in proptest::collection::vec(0u32..4, 0..12)) {
            let once = collapse(&path, 0);
            prop_assert!(!once.contains(0));
            prop_assert!(once.len() <= path.len());
            let has_repeat = once.0.windows(2).any(|w| w[0] == w[1]);
            // A blank between two equal symbols yields an adjacent repeat that
            // a second pass would merge; otherwise collapsing is idempotent.
            prop_assert_eq!(collapse(once.ids(), 0) == once, !has_repeat);
        }

        #[test]
        fn every_path_collapses_to_exactly_one_output(seed in 0u64..500) {
            // Γ(s1) ∩ Γ(s2) = ∅: summing each output's marginal over all distinct
            // outputs reproduces total mass 1, so no path is counted twice.
            let (d, _) = random_dist(4, 3, seed);
            let mut outputs: Vec<TokenSeq> = all_paths(4, 3).iter().map(|p| collapse(p, 0)).collect();
            outputs.sort();
            outputs.dedup();
            let total: f64 = outputs.iter().map(|s| exp(ctc_marginal(&d, s).unwrap())).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
