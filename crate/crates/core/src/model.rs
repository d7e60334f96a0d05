//! Pre-norm Transformer encoder–decoder with Wait-k training and decoding.
//!
//! Every sample is run on its own [`Tape`]; batches accumulate gradients
//! into one [`Grads`] buffer, so no padding is ever needed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::math::log_softmax_in_place;
use crate::nn::{AdamConfig, Grads, Mat, NodeId, OptimizerState, ParamId, Parameters, Tape};
use crate::types::{waitk_read, ParallelSample, ReadPolicy, TokenId, TokenSeq, Vocabulary};

/// Whether encoder self-attention may look at later source tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EncoderMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub encoder_mode: EncoderMode,
    /// Longest source or target sentence the model accepts, plus two.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 37,
            tgt_vocab: 37,
            embed_dim: 64,
            ffn_dim: 128,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            encoder_mode: EncoderMode::Causal,
            max_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "embed_dim ({}) must be a positive multiple of n_heads ({})",
                self.embed_dim, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.n_layers == 0 {
            return Err(invalid("ffn_dim and n_layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.src_vocab <= Vocabulary::NUM_RESERVED || self.tgt_vocab <= Vocabulary::NUM_RESERVED {
            return Err(invalid("vocabularies must contain content tokens"));
        }
        if self.max_len < 3 {
            return Err(invalid("max_len must be at least 3"));
        }
        Ok(())
    }

    /// Rows of the decoder positional table: room for the `2J + 10` cap.
    pub fn decoder_positions(&self) -> usize {
        2 * self.max_len + 11
    }

    /// Errors unless the corpus fits under `max_len` (longest sentence + 2).
    pub fn check_fits(&self, samples: &[ParallelSample]) -> Result<()> {
        let longest = samples
            .iter()
            .map(|s| s.source.len().max(s.target.len()))
            .max()
            .unwrap_or(0);
        if longest + 2 > self.max_len {
            return Err(invalid(format!(
                "max_len {} is below the longest sentence ({longest}) + 2",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Stage tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    Full,
    Base,
    PretrainedTailor,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Full => "full",
            Stage::Base => "base",
            Stage::PretrainedTailor => "pretrained_tailor",
            Stage::Finetuned => "finetuned",
        }
    }
}

/// Parameters plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tailor: Option<crate::tailor::TailorConfig>,
    pub stage: Stage,
    pub k: Option<usize>,
    pub seed: u64,
    pub params: Parameters,
}

/// Fresh encoder–decoder parameters.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::new();
    let d = cfg.embed_dim;
    p.add_embedding("enc.tok", cfg.src_vocab, d, &mut rng);
    p.add_embedding("enc.pos", cfg.max_len, d, &mut rng);
    for l in 0..cfg.n_layers {
        let pre = format!("enc.{l}");
        add_attention(&mut p, &format!("{pre}.self"), d, &mut rng);
        add_ffn(&mut p, &pre, d, cfg.ffn_dim, &mut rng);
        add_norm(&mut p, &format!("{pre}.ln1"), d);
        add_norm(&mut p, &format!("{pre}.ln2"), d);
    }
    add_norm(&mut p, "enc.ln", d);
    p.add_embedding("dec.tok", cfg.tgt_vocab, d, &mut rng);
    p.add_embedding("dec.pos", cfg.decoder_positions(), d, &mut rng);
    for l in 0..cfg.n_layers {
        let pre = format!("dec.{l}");
        add_attention(&mut p, &format!("{pre}.self"), d, &mut rng);
        add_attention(&mut p, &format!("{pre}.cross"), d, &mut rng);
        add_ffn(&mut p, &pre, d, cfg.ffn_dim, &mut rng);
        for n in ["ln1", "ln2", "ln3"] {
            add_norm(&mut p, &format!("{pre}.{n}"), d);
        }
    }
    add_norm(&mut p, "dec.ln", d);
    p.add_glorot("dec.out.w", d, cfg.tgt_vocab, &mut rng);
    p.add_const("dec.out.b", cfg.tgt_vocab, 0.0);
    Ok(p)
}

pub(crate) fn add_attention<R: Rng + ?Sized>(p: &mut Parameters, pre: &str, d: usize, rng: &mut R) {
    for w in ["q", "k", "v", "o"] {
        p.add_glorot(&format!("{pre}.w{w}"), d, d, rng);
        p.add_const(&format!("{pre}.b{w}"), d, 0.0);
    }
}

pub(crate) fn add_ffn<R: Rng + ?Sized>(p: &mut Parameters, pre: &str, d: usize, ffn: usize, rng: &mut R) {
    p.add_glorot(&format!("{pre}.ff.w1"), d, ffn, rng);
    p.add_const(&format!("{pre}.ff.b1"), ffn, 0.0);
    p.add_glorot(&format!("{pre}.ff.w2"), ffn, d, rng);
    p.add_const(&format!("{pre}.ff.b2"), d, 0.0);
}

pub(crate) fn add_norm(p: &mut Parameters, pre: &str, d: usize) {
    p.add_const(&format!("{pre}.g"), d, 1.0);
    p.add_const(&format!("{pre}.b"), d, 0.0);
}

/// Forward-pass context shared by the encoder, decoder and tailor.
pub(crate) struct Ctx<'r> {
    pub heads: usize,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval(heads: usize) -> Ctx<'static> {
        Ctx {
            heads,
            dropout: 0.0,
            rng: None,
        }
    }

    fn drop(&mut self, t: &mut Tape, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => t.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

fn pid(t: &Tape, name: &str) -> Result<ParamId> {
    t.params().id(name)
}

/// Multi-head attention sub-layer (`src` supplies keys and values).
pub(crate) fn attention_layer(
    t: &mut Tape,
    pre: &str,
    x: NodeId,
    src: NodeId,
    limits: Vec<usize>,
    ctx: &mut Ctx,
) -> Result<NodeId> {
    let q = t.linear(x, pid(t, &format!("{pre}.wq"))?, pid(t, &format!("{pre}.bq"))?);
    let k = t.linear(src, pid(t, &format!("{pre}.wk"))?, pid(t, &format!("{pre}.bk"))?);
    let v = t.linear(src, pid(t, &format!("{pre}.wv"))?, pid(t, &format!("{pre}.bv"))?);
    let a = t.attention(q, k, v, ctx.heads, limits);
    let o = t.linear(a, pid(t, &format!("{pre}.wo"))?, pid(t, &format!("{pre}.bo"))?);
    Ok(ctx.drop(t, o))
}

pub(crate) fn norm(t: &mut Tape, pre: &str, x: NodeId) -> Result<NodeId> {
    let g = pid(t, &format!("{pre}.g"))?;
    let b = pid(t, &format!("{pre}.b"))?;
    Ok(t.layer_norm(x, g, b))
}

pub(crate) fn ffn_layer(t: &mut Tape, pre: &str, x: NodeId, ctx: &mut Ctx) -> Result<NodeId> {
    let h = t.linear(x, pid(t, &format!("{pre}.ff.w1"))?, pid(t, &format!("{pre}.ff.b1"))?);
    let h = t.relu(h);
    let o = t.linear(h, pid(t, &format!("{pre}.ff.w2"))?, pid(t, &format!("{pre}.ff.b2"))?);
    Ok(ctx.drop(t, o))
}

fn ids_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

fn check_ids(ids: &[TokenId], vocab: usize, what: &str) -> Result<()> {
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(invalid(format!("{what} token id {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Encoder stack on a tape; returns the `J × d` state node.
pub(crate) fn encoder_on(t: &mut Tape, cfg: &ModelConfig, x: &[TokenId], ctx: &mut Ctx) -> Result<NodeId> {
    if x.is_empty() || x.len() > cfg.max_len {
        return Err(invalid(format!(
            "source length {} outside 1..={}",
            x.len(),
            cfg.max_len
        )));
    }
    check_ids(x, cfg.src_vocab, "source")?;
    let n = x.len();
    let limits: Vec<usize> = match cfg.encoder_mode {
        EncoderMode::Causal => (1..=n).collect(),
        EncoderMode::Bidirectional => vec![n; n],
    };
    let e = t.embed(pid(t, "enc.tok")?, pid(t, "enc.pos")?, &ids_usize(x));
    let mut h = ctx.drop(t, e);
    for l in 0..cfg.n_layers {
        let pre = format!("enc.{l}");
        let a_in = norm(t, &format!("{pre}.ln1"), h)?;
        let a = attention_layer(t, &format!("{pre}.self"), a_in, a_in, limits.clone(), ctx)?;
        h = t.add(h, a);
        let f_in = norm(t, &format!("{pre}.ln2"), h)?;
        let f = ffn_layer(t, &pre, f_in, ctx)?;
        h = t.add(h, f);
    }
    norm(t, "enc.ln", h)
}

/// Decoder stack on a tape; returns the `n × |V_tgt|` logits node.
///
/// `cross_limits[s]` is the number of encoder states visible to row `s`.
pub(crate) fn decoder_on(
    t: &mut Tape,
    cfg: &ModelConfig,
    enc: NodeId,
    y_in: &[TokenId],
    cross_limits: &[usize],
    ctx: &mut Ctx,
) -> Result<NodeId> {
    let n = y_in.len();
    if n == 0 || n > cfg.decoder_positions() {
        return Err(invalid(format!("decoder input length {n} outside positional table")));
    }
    check_ids(y_in, cfg.tgt_vocab, "target")?;
    let e = t.embed(pid(t, "dec.tok")?, pid(t, "dec.pos")?, &ids_usize(y_in));
    let mut h = ctx.drop(t, e);
    let causal: Vec<usize> = (1..=n).collect();
    for l in 0..cfg.n_layers {
        let pre = format!("dec.{l}");
        let a_in = norm(t, &format!("{pre}.ln1"), h)?;
        let a = attention_layer(t, &format!("{pre}.self"), a_in, a_in, causal.clone(), ctx)?;
        h = t.add(h, a);
        let c_in = norm(t, &format!("{pre}.ln2"), h)?;
        let c = attention_layer(t, &format!("{pre}.cross"), c_in, enc, cross_limits.to_vec(), ctx)?;
        h = t.add(h, c);
        let f_in = norm(t, &format!("{pre}.ln3"), h)?;
        let f = ffn_layer(t, &pre, f_in, ctx)?;
        h = t.add(h, f);
    }
    let h = norm(t, "dec.ln", h)?;
    Ok(t.linear(h, pid(t, "dec.out.w")?, pid(t, "dec.out.b")?))
}

/// One encoder state per source position.
pub fn encode(x: &TokenSeq, params: &Parameters, cfg: &ModelConfig) -> Result<Mat> {
    let mut t = Tape::new(params);
    let out = encoder_on(&mut t, cfg, x.ids(), &mut Ctx::eval(cfg.n_heads))?;
    Ok(t.value(out).clone())
}

/// Which source prefix each decoder row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Every target token sees the whole source.
    FullSentence,
    /// Target token `i` sees `min(k + i - 1, J)` source tokens.
    WaitK(usize),
}

impl Objective {
    fn cross_limits(self, rows: usize, source_len: usize) -> Vec<usize> {
        match self {
            Objective::FullSentence => vec![source_len; rows],
            Objective::WaitK(k) => (0..rows).map(|s| waitk_read(k, s, source_len)).collect(),
        }
    }

    fn check(self, cfg: &ModelConfig) -> Result<()> {
        match self {
            Objective::WaitK(0) => Err(invalid("Wait-k needs k >= 1")),
            Objective::WaitK(_) if cfg.encoder_mode != EncoderMode::Causal => {
                Err(invalid("Wait-k training requires a causal encoder"))
            }
            _ => Ok(()),
        }
    }
}

/// Teacher-forced cross-entropy summed over one sample's target tokens and
/// EOS; gradients (scaled by `weight`) are accumulated into `grads`.
fn sample_loss(
    sample: &ParallelSample,
    objective: Objective,
    params: &Parameters,
    cfg: &ModelConfig,
    ctx: &mut Ctx,
    weight: f64,
    grads: Option<&mut Grads>,
) -> Result<(f64, usize)> {
    let x = sample.source.ids();
    let y = sample.target.ids();
    if y.is_empty() || y.len() + 2 > cfg.decoder_positions() {
        return Err(invalid(format!("target length {} unsupported", y.len())));
    }
    let mut y_in = Vec::with_capacity(y.len() + 1);
    y_in.push(Vocabulary::BOS);
    y_in.extend_from_slice(y);
    let gold: Vec<TokenId> = y.iter().copied().chain(core::iter::once(Vocabulary::EOS)).collect();
    let mut t = Tape::new(params);
    let enc = encoder_on(&mut t, cfg, x, ctx)?;
    let limits = objective.cross_limits(y_in.len(), x.len());
    let logits = decoder_on(&mut t, cfg, enc, &y_in, &limits, ctx)?;
    let v = t.value(logits);
    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(v.rows, v.cols);
    for (r, &g) in gold.iter().enumerate() {
        let row = dlogits.row_mut(r);
        row.copy_from_slice(v.row(r));
        log_softmax_in_place(row);
        loss -= row[g as usize];
        for e in row.iter_mut() {
            *e = crate::math::exp(*e) * weight;
        }
        row[g as usize] -= weight;
    }
    if let Some(grads) = grads {
        t.backward(logits, &dlogits, grads);
    }
    Ok((loss, gold.len()))
}

/// Mean token cross-entropy of a batch under `objective`, and its gradient.
pub fn batch_loss(
    batch: &[ParallelSample],
    objective: Objective,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros_like(params);
    let loss = accumulate_batch(batch, objective, params, cfg, &mut Ctx::eval(cfg.n_heads), &mut grads)?;
    Ok((loss, grads))
}

pub(crate) fn accumulate_batch(
    batch: &[ParallelSample],
    objective: Objective,
    params: &Parameters,
    cfg: &ModelConfig,
    ctx: &mut Ctx,
    grads: &mut Grads,
) -> Result<f64> {
    objective.check(cfg)?;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let tokens: usize = batch.iter().map(|s| s.target.len() + 1).sum();
    let w = 1.0 / tokens as f64;
    let mut total = 0.0;
    for s in batch {
        total += sample_loss(s, objective, params, cfg, ctx, w, Some(&mut *grads))?.0;
    }
    Ok(total * w)
}

/// Wait-k prefix-masked cross-entropy (mean over batch tokens) and gradient.
pub fn simt_loss(batch: &[ParallelSample], k: usize, params: &Parameters, cfg: &ModelConfig) -> Result<(f64, Grads)> {
    batch_loss(batch, Objective::WaitK(k), params, cfg)
}

/// Mean token cross-entropy without gradients.
pub fn evaluate_loss(
    samples: &[ParallelSample],
    objective: Objective,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<f64> {
    objective.check(cfg)?;
    let mut total = 0.0;
    let mut tokens = 0;
    for s in samples {
        let (l, n) = sample_loss(s, objective, params, cfg, &mut Ctx::eval(cfg.n_heads), 0.0, None)?;
        total += l;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Record the (mean) training loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
            log_every: 50,
        }
    }
}

/// One training log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// `(step, batch loss)` for every step.
    pub losses: Vec<f64>,
    /// `(epoch, loss)` on the validation samples at each epoch end.
    pub validation: Vec<(usize, f64)>,
}

/// Deterministic per-epoch reshuffling over `n` indices.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            batch: batch.max(1).min(n.max(1)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    /// Next batch of indices and whether it completed an epoch.
    pub fn next(&mut self) -> (Vec<usize>, bool) {
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        let done = self.pos == self.order.len();
        if done {
            self.pos = 0;
            self.epoch += 1;
            self.order.shuffle(&mut self.rng);
        }
        (out, done)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Stream seeds derived from one run seed.
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.random()
}

/// Trains encoder and decoder; `init` warm-starts from existing parameters.
///
/// `on_step` receives one record per optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    samples: &[ParallelSample],
    validation: &[ParallelSample],
    objective: Objective,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    init: Option<Parameters>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(Checkpoint, TrainReport)> {
    if samples.is_empty() {
        return Err(invalid("training corpus is empty"));
    }
    objective.check(cfg)?;
    cfg.check_fits(samples)?;
    let mut params = match init {
        Some(p) => p,
        None => init_params(cfg, sub_seed(seed, 0))?,
    };
    let ids = params
        .ids_with_prefix("enc.")
        .into_iter()
        .chain(params.ids_with_prefix("dec."))
        .collect();
    let mut opt = OptimizerState::new(train_cfg.adam, &params, ids);
    let mut batcher = Batcher::new(samples.len(), train_cfg.batch_size, sub_seed(seed, 1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
    let mut grads = Grads::zeros_like(&params);
    let mut report = TrainReport::default();
    for step in 1..=train_cfg.steps {
        let (idx, epoch_done) = batcher.next();
        let batch: Vec<ParallelSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        grads.zero();
        let mut ctx = Ctx {
            heads: cfg.n_heads,
            dropout: cfg.dropout,
            rng: Some(&mut drop_rng),
        };
        let loss = accumulate_batch(&batch, objective, &params, cfg, &mut ctx, &mut grads)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut params, &grads);
        report.losses.push(loss);
        on_step(&StepLog {
            step,
            loss,
            lr: train_cfg.adam.lr_at(step),
        });
        if epoch_done && !validation.is_empty() {
            let v = evaluate_loss(validation, objective, &params, cfg)?;
            report.validation.push((batcher.epoch(), v));
        }
    }
    if !params.all_finite() {
        return Err(Error::Diverged {
            step: train_cfg.steps,
            loss: f64::NAN,
        });
    }
    let (stage, k) = match objective {
        Objective::FullSentence => (Stage::Full, None),
        Objective::WaitK(k) => (Stage::Base, Some(k)),
    };
    Ok((
        Checkpoint {
            config: cfg.clone(),
            tailor: None,
            stage,
            k,
            seed,
            params,
        },
        report,
    ))
}

/// Greedy decoding where the decoder input row `s` sees `reads(s)` source
/// tokens. With a causal encoder the source is encoded once and masked;
/// otherwise the visible prefix is re-encoded whenever it grows.
fn greedy(
    x: &TokenSeq,
    params: &Parameters,
    cfg: &ModelConfig,
    reads: &dyn Fn(usize) -> usize,
) -> Result<(TokenSeq, ReadPolicy)> {
    let j = x.len();
    let cap = (2 * j + 10).min(cfg.decoder_positions() - 1);
    let causal = cfg.encoder_mode == EncoderMode::Causal;
    let full_enc = if causal { Some(encode(x, params, cfg)?) } else { None };
    let mut prefix_enc: Option<(usize, Mat)> = None;
    let mut y_in = vec![Vocabulary::BOS];
    let mut out = Vec::new();
    let mut trace = Vec::new();
    while out.len() < cap {
        let step = out.len();
        let g = reads(step).clamp(1, j);
        let mut t = Tape::new(params);
        let (enc, limits) = if let Some(e) = &full_enc {
            let limits: Vec<usize> = (0..y_in.len()).map(|s| reads(s).clamp(1, j)).collect();
            (t.input(e.clone()), limits)
        } else {
            if prefix_enc.as_ref().map(|(n, _)| *n) != Some(g) {
                let prefix = TokenSeq::new(x.ids()[..g].to_vec());
                prefix_enc = Some((g, encode(&prefix, params, cfg)?));
            }
            let e = &prefix_enc.as_ref().expect("prefix encoded above").1;
            (t.input(e.clone()), vec![g; y_in.len()])
        };
        let logits = decoder_on(&mut t, cfg, enc, &y_in, &limits, &mut Ctx::eval(cfg.n_heads))?;
        let next = best_output(t.value(logits).row(step));
        if next == Vocabulary::EOS {
            break;
        }
        out.push(next);
        trace.push(g);
        y_in.push(next);
    }
    Ok((TokenSeq::new(out), ReadPolicy(trace)))
}

/// Highest-scoring emittable token; PAD, BOS and BLANK are never produced.
fn best_output(row: &[f64]) -> TokenId {
    let mut best = Vocabulary::EOS;
    for (id, &v) in row.iter().enumerate() {
        let id = id as TokenId;
        if matches!(id, Vocabulary::PAD | Vocabulary::BOS | Vocabulary::BLANK) {
            continue;
        }
        if v > row[best as usize] {
            best = id;
        }
    }
    best
}

/// Greedy Wait-k decoding with a causal encoder; returns the hypothesis and
/// the realized read trace (`g_i = min(k + i - 1, J)`).
pub fn decode_streaming(
    x: &TokenSeq,
    k: usize,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<(TokenSeq, ReadPolicy)> {
    Objective::WaitK(k).check(cfg)?;
    let j = x.len();
    greedy(x, params, cfg, &|s| waitk_read(k, s, j))
}

/// Greedy decoding of a full-sentence model under the Wait-k read schedule.
pub fn decode_testtime_waitk(x: &TokenSeq, k: usize, params: &Parameters, cfg: &ModelConfig) -> Result<TokenSeq> {
    if k == 0 {
        return Err(invalid("Wait-k needs k >= 1"));
    }
    let j = x.len();
    Ok(greedy(x, params, cfg, &|s| waitk_read(k, s, j))?.0)
}

/// Greedy decoding with the whole source visible.
pub fn decode_full(x: &TokenSeq, params: &Parameters, cfg: &ModelConfig) -> Result<TokenSeq> {
    let j = x.len();
    Ok(greedy(x, params, cfg, &|_| j)?.0)
}

/// Per-row decoder logits under Wait-k teacher forcing (for inspection).
pub fn waitk_logits(sample: &ParallelSample, k: usize, params: &Parameters, cfg: &ModelConfig) -> Result<Mat> {
    Objective::WaitK(k).check(cfg)?;
    let mut y_in = vec![Vocabulary::BOS];
    y_in.extend_from_slice(sample.target.ids());
    let mut t = Tape::new(params);
    let mut ctx = Ctx::eval(cfg.n_heads);
    let enc = encoder_on(&mut t, cfg, sample.source.ids(), &mut ctx)?;
    let limits = Objective::WaitK(k).cross_limits(y_in.len(), sample.source.len());
    let logits = decoder_on(&mut t, cfg, enc, &y_in, &limits, &mut ctx)?;
    Ok(t.value(logits).clone())
}

/// Human-readable parameter summary (name and shape per line).
pub fn describe(params: &Parameters) -> String {
    let mut s = String::new();
    for t in params.tensors() {
        s.push_str(&format!("{} {}x{}\n", t.name, t.rows, t.cols));
    }
    s
}
