//! The non-autoregressive tailor and the three-stage training pipeline.
//!
//! The tailor reads the upsampled ground truth, attends to the shared
//! encoder's states and emits one categorical row per frame over the target
//! vocabulary (blank included). It is pre-trained with CTC on the ground
//! truth, then fine-tuned with REINFORCE towards a reward that mixes
//! similarity to the non-anticipatory reference `y_na` and to the ground
//! truth. Its collapsed argmax output becomes the Wait-k training target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{
    argmax_path, collapse, ctc_log_marginal_grad, sample_path, upsample, PositionDistributions, UpsampleConfig,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{bleu, BleuConfig};
use crate::model::{
    add_attention, add_ffn, add_norm, attention_layer, encoder_on, ffn_layer, norm, sub_seed, Batcher, Checkpoint, Ctx,
    EncoderMode, ModelConfig, Objective, Stage, StepLog,
};
use crate::nn::{AdamConfig, Grads, Mat, NodeId, OptimizerState, Parameters, Tape};
use crate::types::{ParallelSample, TokenId, TokenSeq, Vocabulary};

/// Variance-reduction baseline subtracted from rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Baseline {
    /// Mean reward of the current batch.
    BatchMean,
    /// Mean reward of the other samples drawn for the same input; needs
    /// `samples_per_input >= 2`.
    LeaveOneOut,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TailorConfig {
    pub n_layers: usize,
    pub upsample: UpsampleConfig,
    /// Weight of the ground-truth term in the reward.
    pub alpha: f64,
    pub baseline: Baseline,
    pub samples_per_input: usize,
    /// Keep tailor gradients out of the shared encoder.
    pub detach_encoder: bool,
}

impl Default for TailorConfig {
    fn default() -> Self {
        TailorConfig {
            n_layers: 2,
            upsample: UpsampleConfig::default(),
            alpha: 0.2,
            baseline: Baseline::BatchMean,
            samples_per_input: 1,
            detach_encoder: true,
        }
    }
}

impl TailorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_layers == 0 || self.samples_per_input == 0 || self.upsample.factor == 0 {
            return Err(invalid(
                "tailor n_layers, samples_per_input and upsample factor must be positive",
            ));
        }
        if self.baseline == Baseline::LeaveOneOut && self.samples_per_input < 2 {
            return Err(invalid("leave-one-out baseline needs samples_per_input >= 2"));
        }
        Ok(())
    }
}

/// Reward terms for one sampled output (or a batch mean of them).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardBreakdown {
    pub r_na: f64,
    pub r_gt: f64,
    pub r: f64,
    pub baseline: f64,
    pub advantage: f64,
}

/// Symbols the tailor may never emit; their scores are pinned to `-inf`.
fn is_masked(sym: usize) -> bool {
    sym != Vocabulary::BLANK as usize && Vocabulary::is_reserved(sym as TokenId)
}

/// Adds freshly initialized tailor tensors (`tailor.*`) to `params`.
pub fn init_tailor_params(params: &mut Parameters, cfg: &ModelConfig, tcfg: &TailorConfig, seed: u64) -> Result<()> {
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    params.add_embedding("tailor.tok", cfg.tgt_vocab, d, &mut rng);
    params.add_embedding("tailor.pos", tcfg.upsample.factor * cfg.max_len, d, &mut rng);
    for l in 0..tcfg.n_layers {
        let pre = format!("tailor.{l}");
        add_attention(params, &format!("{pre}.self"), d, &mut rng);
        add_attention(params, &format!("{pre}.cross"), d, &mut rng);
        add_ffn(params, &pre, d, cfg.ffn_dim, &mut rng);
        for n in ["ln1", "ln2", "ln3"] {
            add_norm(params, &format!("{pre}.{n}"), d);
        }
    }
    add_norm(params, "tailor.ln", d);
    params.add_glorot("tailor.out.w", d, cfg.tgt_vocab, &mut rng);
    params.add_const("tailor.out.b", cfg.tgt_vocab, 0.0);
    Ok(())
}

/// Tailor stack on a tape; returns the `T × |V_tgt|` score node.
fn tailor_on(
    t: &mut Tape,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
    enc: NodeId,
    y: &TokenSeq,
    ctx: &mut Ctx,
) -> Result<NodeId> {
    let up = upsample(y, &tcfg.upsample)?;
    if y.len() > cfg.max_len {
        return Err(invalid(format!(
            "target length {} exceeds max_len {}",
            y.len(),
            cfg.max_len
        )));
    }
    if let Some(bad) = up.iter().find(|&&v| v as usize >= cfg.tgt_vocab) {
        return Err(invalid(format!("target token id {bad} outside vocabulary")));
    }
    let frames = up.len();
    let ids: Vec<usize> = up.iter().map(|&v| v as usize).collect();
    let e = t.embed(t.params().id("tailor.tok")?, t.params().id("tailor.pos")?, &ids);
    let mut h = e;
    let j = t.value(enc).rows;
    for l in 0..tcfg.n_layers {
        let pre = format!("tailor.{l}");
        let a_in = norm(t, &format!("{pre}.ln1"), h)?;
        let a = attention_layer(t, &format!("{pre}.self"), a_in, a_in, vec![frames; frames], ctx)?;
        h = t.add(h, a);
        let c_in = norm(t, &format!("{pre}.ln2"), h)?;
        let c = attention_layer(t, &format!("{pre}.cross"), c_in, enc, vec![j; frames], ctx)?;
        h = t.add(h, c);
        let f_in = norm(t, &format!("{pre}.ln3"), h)?;
        let f = ffn_layer(t, &pre, f_in, ctx)?;
        h = t.add(h, f);
    }
    let h = norm(t, "tailor.ln", h)?;
    Ok(t.linear(h, t.params().id("tailor.out.w")?, t.params().id("tailor.out.b")?))
}

/// Encoder (detached or not) plus tailor on one tape.
fn build(
    t: &mut Tape,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
    x: &TokenSeq,
    y: &TokenSeq,
    ctx: &mut Ctx,
) -> Result<(NodeId, PositionDistributions)> {
    let enc = if tcfg.detach_encoder {
        let mut eval = Ctx::eval(cfg.n_heads);
        let e = encoder_on(t, cfg, x.ids(), &mut eval)?;
        let v = t.value(e).clone();
        t.input(v)
    } else {
        encoder_on(t, cfg, x.ids(), ctx)?
    };
    let logits = tailor_on(t, cfg, tcfg, enc, y, ctx)?;
    let dist = distribution(t.value(logits))?;
    Ok((logits, dist))
}

fn distribution(logits: &Mat) -> Result<PositionDistributions> {
    let mut scores = logits.data.clone();
    for row in scores.chunks_mut(logits.cols) {
        for (c, v) in row.iter_mut().enumerate() {
            if is_masked(c) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    PositionDistributions::from_logits(logits.rows, logits.cols, Vocabulary::BLANK, &scores)
}

/// Per-frame distributions of the tailor for source `x` and ground truth `y`.
pub fn tailor_forward(
    x: &TokenSeq,
    y: &TokenSeq,
    params: &Parameters,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
) -> Result<PositionDistributions> {
    let mut t = Tape::new(params);
    Ok(build(&mut t, cfg, tcfg, x, y, &mut Ctx::eval(cfg.n_heads))?.1)
}

/// Collapsed argmax output; falls back to `y` when it is empty. The flag
/// reports whether the fallback was used.
pub fn extract_tailored_reference(
    x: &TokenSeq,
    y: &TokenSeq,
    params: &Parameters,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
) -> Result<(TokenSeq, bool)> {
    let dist = tailor_forward(x, y, params, cfg, tcfg)?;
    let s = collapse(argmax_path(&dist).ids(), Vocabulary::BLANK);
    if s.is_empty() {
        Ok((y.clone(), true))
    } else {
        Ok((s, false))
    }
}

/// `r = (1 − α)·BLEU(s, y_na) + α·BLEU(s, y)`; zero for an empty `s`.
pub fn compute_reward(s: &TokenSeq, y: &TokenSeq, y_na: &TokenSeq, alpha: f64) -> Result<RewardBreakdown> {
    if y.is_empty() || y_na.is_empty() {
        return Err(invalid("reward needs non-empty references"));
    }
    if s.is_empty() {
        return Ok(RewardBreakdown::default());
    }
    let cfg = BleuConfig::sentence();
    let r_na = bleu(s, y_na, &cfg)?;
    let r_gt = bleu(s, y, &cfg)?;
    let r = (1.0 - alpha) * r_na + alpha * r_gt;
    Ok(RewardBreakdown {
        r_na,
        r_gt,
        r,
        baseline: 0.0,
        advantage: r,
    })
}

/// Score-function term for one sampled path: the gradient of
/// `advantage · log p_s(collapse(path))` with respect to the scores.
pub fn score_function_grad(dist: &PositionDistributions, path: &TokenSeq, advantage: f64) -> Result<Vec<f64>> {
    let s = collapse(path.ids(), dist.blank());
    if s.is_empty() {
        // p_s(empty) is the all-blank path; handled by the DP with no labels.
        let mut g = vec![0.0; dist.frames() * dist.width()];
        let b = dist.blank() as usize;
        for t in 0..dist.frames() {
            for k in 0..dist.width() {
                let onehot = if k == b { 1.0 } else { 0.0 };
                g[t * dist.width() + k] = advantage * (onehot - dist.prob(t, k as TokenId));
            }
        }
        return Ok(g);
    }
    let (_, mut g) = ctc_log_marginal_grad(dist, &s).map_err(|e| {
        debug_assert!(false, "collapsed sample outside support: {e}");
        e
    })?;
    g.iter_mut().for_each(|v| *v *= advantage);
    Ok(g)
}

/// Surrogate-loss gradient for one REINFORCE step over `batch`, together with
/// the batch-mean reward terms.
///
/// The returned gradient is that of `−mean(advantage · log p_s)`, so an
/// optimizer *descending* it ascends the expected reward.
pub fn reinforce_step(
    batch: &[ParallelSample],
    y_na: &[TokenSeq],
    params: &Parameters,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
    seed: u64,
) -> Result<(Grads, RewardBreakdown)> {
    let mut grads = Grads::zeros_like(params);
    let mean = reinforce_accumulate(
        batch,
        y_na,
        params,
        cfg,
        tcfg,
        seed,
        &mut Ctx::eval(cfg.n_heads),
        &mut grads,
    )?;
    Ok((grads, mean))
}

#[allow(clippy::too_many_arguments)]
fn reinforce_accumulate(
    batch: &[ParallelSample],
    y_na: &[TokenSeq],
    params: &Parameters,
    cfg: &ModelConfig,
    tcfg: &TailorConfig,
    seed: u64,
    ctx: &mut Ctx,
    grads: &mut Grads,
) -> Result<RewardBreakdown> {
    tcfg.validate()?;
    if batch.is_empty() || batch.len() != y_na.len() {
        return Err(invalid("reinforce_step needs one y_na per (non-empty) batch sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(batch.len());
    let mut rewards = Vec::new();
    for (sample, yna) in batch.iter().zip(y_na) {
        let mut t = Tape::new(params);
        let (logits, dist) = build(&mut t, cfg, tcfg, &sample.source, &sample.target, ctx)?;
        let mut drawn = Vec::with_capacity(tcfg.samples_per_input);
        for _ in 0..tcfg.samples_per_input {
            let path = sample_path(&dist, &mut rng);
            let s = collapse(path.ids(), Vocabulary::BLANK);
            let r = compute_reward(&s, &sample.target, yna, tcfg.alpha)?;
            rewards.push(r);
            drawn.push((path, rewards.len() - 1));
        }
        runs.push((t, logits, dist, drawn));
    }
    let n = rewards.len() as f64;
    let batch_mean = rewards.iter().map(|r| r.r).sum::<f64>() / n;
    let m = tcfg.samples_per_input as f64;
    let mut baselines = Vec::with_capacity(rewards.len());
    for chunk in rewards.chunks(tcfg.samples_per_input) {
        let sum: f64 = chunk.iter().map(|r| r.r).sum();
        for r in chunk {
            baselines.push(match tcfg.baseline {
                Baseline::BatchMean => batch_mean,
                Baseline::LeaveOneOut => (sum - r.r) / (m - 1.0),
                Baseline::None => 0.0,
            });
        }
    }
    for (t, logits, dist, drawn) in &runs {
        let mut up = Mat::zeros(dist.frames(), dist.width());
        for (path, ri) in drawn {
            let adv = rewards[*ri].r - baselines[*ri];
            if adv == 0.0 {
                continue;
            }
            let g = score_function_grad(dist, path, adv)?;
            for (u, gv) in up.data.iter_mut().zip(&g) {
                *u -= gv / n;
            }
        }
        t.backward(*logits, &up, grads);
    }
    let b = baselines.iter().sum::<f64>() / n;
    let mut mean = RewardBreakdown {
        baseline: b,
        ..RewardBreakdown::default()
    };
    for r in &rewards {
        mean.r_na += r.r_na / n;
        mean.r_gt += r.r_gt / n;
        mean.r += r.r / n;
    }
    mean.advantage = mean.r - b;
    Ok(mean)
}

/// Optimizer and batching settings shared by pre-training and stage 3.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TailorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TailorTrainConfig {
    fn default() -> Self {
        TailorTrainConfig {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Trains fresh tailor parameters with CTC on the ground truth while the
/// base model stays frozen; returns a `pretrained_tailor` checkpoint.
pub fn pretrain_tailor(
    samples: &[ParallelSample],
    base: &Checkpoint,
    tcfg: &TailorConfig,
    train_cfg: &TailorTrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(Checkpoint, PretrainReport)> {
    if base.stage != Stage::Base {
        return Err(invalid(format!(
            "tailor pre-training needs a base checkpoint, got {}",
            base.stage.as_str()
        )));
    }
    if samples.is_empty() {
        return Err(invalid("training corpus is empty"));
    }
    let cfg = &base.config;
    cfg.check_fits(samples)?;
    let mut params = base.params.clone();
    init_tailor_params(&mut params, cfg, tcfg, sub_seed(seed, 10))?;
    // The encoder stays frozen here whatever detach_encoder says.
    let frozen = TailorConfig {
        detach_encoder: true,
        ..*tcfg
    };
    let ids = params.ids_with_prefix("tailor.");
    let mut opt = OptimizerState::new(train_cfg.adam, &params, ids);
    let mut batcher = Batcher::new(samples.len(), train_cfg.batch_size, sub_seed(seed, 11));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 12));
    let mut grads = Grads::zeros_like(&params);
    let mut report = PretrainReport::default();
    let mut seen = 0usize;
    for step in 1..=train_cfg.steps {
        let (idx, _) = batcher.next();
        grads.zero();
        let mut ctx = Ctx {
            heads: cfg.n_heads,
            dropout: cfg.dropout,
            rng: Some(&mut drop_rng),
        };
        let mut total = 0.0;
        let mut used = 0usize;
        let mut runs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &samples[i];
            seen += 1;
            let mut t = Tape::new(&params);
            let (logits, dist) = build(&mut t, cfg, &frozen, &s.source, &s.target, &mut ctx)?;
            match crate::ctc::ctc_loss_and_grad(&dist, &s.target) {
                Ok((loss, g)) => {
                    let scale = 1.0 / s.target.len() as f64;
                    total += loss * scale;
                    used += 1;
                    runs.push((t, logits, g, scale));
                }
                Err(Error::InfeasibleTarget { .. }) => report.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if report.skipped * 10 > seen {
            return Err(Error::TooManyInfeasible {
                skipped: report.skipped,
                total: seen,
            });
        }
        if used == 0 {
            continue;
        }
        for (t, logits, g, scale) in runs {
            let v = t.value(logits);
            let w = scale / used as f64;
            let up = Mat::from_vec(v.rows, v.cols, g.iter().map(|x| x * w).collect());
            t.backward(logits, &up, &mut grads);
        }
        let loss = total / used as f64;
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
    }
    Ok((
        Checkpoint {
            config: cfg.clone(),
            tailor: Some(*tcfg),
            stage: Stage::PretrainedTailor,
            k: base.k,
            seed,
            params,
        },
        report,
    ))
}

/// Settings of the joint stage-3 loop.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct JointConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub simt_adam: AdamConfig,
    pub tailor_adam: AdamConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            steps: 1000,
            batch_size: 32,
            simt_adam: AdamConfig::default(),
            tailor_adam: AdamConfig::default(),
        }
    }
}

/// Per-step record of the joint loop.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JointLog {
    pub step: usize,
    pub r_na: f64,
    pub r_gt: f64,
    pub r: f64,
    pub baseline: f64,
    pub fallback_rate: f64,
    pub simt_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointReport {
    pub logs: Vec<JointLog>,
}

impl JointReport {
    /// Fraction of steps whose empty-output fallback rate exceeded 20%.
    pub fn high_fallback_steps(&self) -> usize {
        self.logs.iter().filter(|l| l.fallback_rate > 0.2).count()
    }
}

/// Alternates, per batch, a REINFORCE update of the tailor and a Wait-k
/// update of the SiMT model on the tailor's current references. `y_na[i]`
/// belongs to `samples[i]`. Returns a `finetuned` checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn stage3_joint_train(
    samples: &[ParallelSample],
    y_na: &[TokenSeq],
    pretrained: &Checkpoint,
    k: usize,
    joint: &JointConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&JointLog),
) -> Result<(Checkpoint, JointReport)> {
    if pretrained.stage != Stage::PretrainedTailor {
        return Err(invalid(format!(
            "stage 3 needs a pretrained_tailor checkpoint, got {}",
            pretrained.stage.as_str()
        )));
    }
    if pretrained.k.is_some() && pretrained.k != Some(k) {
        return Err(invalid(format!(
            "checkpoint was trained for k={:?}, asked for k={k}",
            pretrained.k
        )));
    }
    if samples.len() != y_na.len() || samples.is_empty() {
        return Err(invalid("stage 3 needs one y_na per training sample"));
    }
    let tcfg = pretrained
        .tailor
        .ok_or_else(|| invalid("checkpoint lacks a tailor configuration"))?;
    let cfg = &pretrained.config;
    if cfg.encoder_mode != EncoderMode::Causal {
        return Err(invalid("stage 3 requires a causal encoder"));
    }
    let mut params = pretrained.params.clone();
    let simt_ids = params
        .ids_with_prefix("enc.")
        .into_iter()
        .chain(params.ids_with_prefix("dec."))
        .collect();
    let mut simt_opt = OptimizerState::new(joint.simt_adam, &params, simt_ids);
    let tailor_ids = if tcfg.detach_encoder {
        params.ids_with_prefix("tailor.")
    } else {
        params
            .ids_with_prefix("tailor.")
            .into_iter()
            .chain(params.ids_with_prefix("enc."))
            .collect()
    };
    let mut tailor_opt = OptimizerState::new(joint.tailor_adam, &params, tailor_ids);
    let mut batcher = Batcher::new(samples.len(), joint.batch_size, sub_seed(seed, 20));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 21));
    let mut grads = Grads::zeros_like(&params);
    let mut report = JointReport::default();
    for step in 1..=joint.steps {
        let (idx, _) = batcher.next();
        let batch: Vec<ParallelSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let refs: Vec<TokenSeq> = idx.iter().map(|&i| y_na[i].clone()).collect();

        grads.zero();
        let mut ctx = Ctx {
            heads: cfg.n_heads,
            dropout: cfg.dropout,
            rng: Some(&mut drop_rng),
        };
        let rl_seed = sub_seed(seed, 1000 + step as u64);
        let reward = reinforce_accumulate(&batch, &refs, &params, cfg, &tcfg, rl_seed, &mut ctx, &mut grads)?;
        if !grads.all_finite() {
            return Err(Error::Diverged { step, loss: reward.r });
        }
        tailor_opt.update(&mut params, &grads);

        let mut fallbacks = 0usize;
        let mut tailored = Vec::with_capacity(batch.len());
        for s in &batch {
            let (r, fell_back) = extract_tailored_reference(&s.source, &s.target, &params, cfg, &tcfg)?;
            fallbacks += fell_back as usize;
            // Keep references inside the decoder's positional range.
            let r = if r.len() + 2 > cfg.decoder_positions() {
                s.target.clone()
            } else {
                r
            };
            tailored.push(ParallelSample::new(s.source.clone(), r, None)?);
        }

        grads.zero();
        let loss = crate::model::accumulate_batch(&tailored, Objective::WaitK(k), &params, cfg, &mut ctx, &mut grads)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        simt_opt.update(&mut params, &grads);

        let log = JointLog {
            step,
            r_na: reward.r_na,
            r_gt: reward.r_gt,
            r: reward.r,
            baseline: reward.baseline,
            fallback_rate: fallbacks as f64 / batch.len() as f64,
            simt_loss: loss,
        };
        on_step(&log);
        report.logs.push(log);
    }
    Ok((
        Checkpoint {
            config: cfg.clone(),
            tailor: Some(tcfg),
            stage: Stage::Finetuned,
            k: Some(k),
            seed,
            params,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EncoderMode};
    use rand::Rng;

    fn micro() -> (ModelConfig, TailorConfig, Parameters) {
        let cfg = ModelConfig {
            src_vocab: 9,
            tgt_vocab: 9,
            embed_dim: 8,
            ffn_dim: 8,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.0,
            encoder_mode: EncoderMode::Causal,
            max_len: 8,
        };
        let tcfg = TailorConfig {
            n_layers: 1,
            ..TailorConfig::default()
        };
        let mut p = init_params(&cfg, 0).unwrap();
        init_tailor_params(&mut p, &cfg, &tcfg, 1).unwrap();
        (cfg, tcfg, p)
    }

    fn seq(v: &[u32]) -> TokenSeq {
        TokenSeq::new(v.to_vec())
    }

    #[test]
    fn reward_examples() {
        let y = seq(&[5, 6, 7, 8]);
        let r = compute_reward(&y, &y, &y, 0.2).unwrap();
        assert!((r.r - 100.0).abs() < 1e-9);
        let yna = seq(&[5, 6, 8]);
        let s = seq(&[5, 6, 8, 7]);
        let r0 = compute_reward(&s, &y, &yna, 0.0).unwrap();
        assert_eq!(r0.r, r0.r_na);
        let r1 = compute_reward(&s, &y, &yna, 1.0).unwrap();
        assert_eq!(r1.r, r1.r_gt);
        let r2 = compute_reward(&s, &y, &yna, 0.2).unwrap();
        assert_eq!(r2.r, 0.8 * r2.r_na + 0.2 * r2.r_gt);
        assert_eq!(compute_reward(&seq(&[]), &y, &yna, 0.2).unwrap().r, 0.0);
        assert!(compute_reward(&s, &seq(&[]), &yna, 0.2).is_err());
    }

    #[test]
    fn forward_rows_are_distributions_over_frames() {
        let (cfg, tcfg, p) = micro();
        let d = tailor_forward(&seq(&[5, 6, 7]), &seq(&[6, 7, 7, 8]), &p, &cfg, &tcfg).unwrap();
        assert_eq!(d.frames(), 8);
        assert_eq!(d.width(), 9);
        for t in 0..8 {
            let sum: f64 = d.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for sym in [0u32, 1, 2, 4] {
                assert_eq!(d.prob(t, sym), 0.0);
            }
        }
        let again = tailor_forward(&seq(&[5, 6, 7]), &seq(&[6, 7, 7, 8]), &p, &cfg, &tcfg).unwrap();
        assert_eq!(d, again);
        assert!(tailor_forward(&seq(&[5]), &seq(&[5; 9]), &p, &cfg, &tcfg).is_err());
    }

    #[test]
    fn extraction_never_emits_blank() {
        let (cfg, tcfg, p) = micro();
        let y = seq(&[6, 7, 8]);
        let (r, _) = extract_tailored_reference(&seq(&[5, 6]), &y, &p, &cfg, &tcfg).unwrap();
        assert!(!r.contains(Vocabulary::BLANK));
        assert!(r.len() <= 6);
    }

    /// All `width^frames` paths with their probabilities.
    fn enumerate(dist: &PositionDistributions) -> Vec<(TokenSeq, f64)> {
        let (t, w) = (dist.frames(), dist.width());
        let mut out = Vec::new();
        for code in 0..w.pow(t as u32) {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            let mut p = 1.0;
            for f in 0..t {
                let sym = c % w;
                c /= w;
                path.push(sym as TokenId);
                p *= dist.prob(f, sym as TokenId);
            }
            out.push((TokenSeq(path), p));
        }
        out
    }

    #[test]
    fn estimator_is_unbiased_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for inst in 0..20 {
            let (frames, width) = (4, 2 + inst % 2);
            let logits: Vec<f64> = (0..frames * width).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dist = PositionDistributions::from_logits(frames, width, 0, &logits).unwrap();
            let rewards: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..100.0)).collect();
            let reward = |s: &TokenSeq| {
                let h = s.iter().fold(7usize, |h, &v| h * 31 + v as usize + 1);
                rewards[h % rewards.len()]
            };
            // Oracle: d/dz Σ_a p(a) R(collapse a) = Σ_a p(a) R Σ_t (e_{a_t} − p_t).
            let mut oracle = vec![0.0; frames * width];
            for (path, p) in enumerate(&dist) {
                let r = reward(&collapse(path.ids(), 0));
                for f in 0..frames {
                    for k in 0..width {
                        let onehot = if path.ids()[f] as usize == k { 1.0 } else { 0.0 };
                        oracle[f * width + k] += p * r * (onehot - dist.prob(f, k as TokenId));
                    }
                }
            }
            for b in [0.0, 37.5] {
                let mut expected = vec![0.0; frames * width];
                for (path, p) in enumerate(&dist) {
                    let r = reward(&collapse(path.ids(), 0));
                    let g = score_function_grad(&dist, &path, r - b).unwrap();
                    for (e, gv) in expected.iter_mut().zip(&g) {
                        *e += p * gv;
                    }
                }
                for (e, o) in expected.iter().zip(&oracle) {
                    assert!((e - o).abs() < 1e-8, "instance {inst}, baseline {b}: {e} vs {o}");
                }
            }
            let mut constant = vec![0.0; frames * width];
            for (path, p) in enumerate(&dist) {
                let g = score_function_grad(&dist, &path, 42.0).unwrap();
                for (e, gv) in constant.iter_mut().zip(&g) {
                    *e += p * gv;
                }
            }
            assert!(constant.iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn reinforce_step_is_deterministic_and_touches_only_tailor() {
        let (cfg, tcfg, p) = micro();
        let batch = vec![
            ParallelSample::new(seq(&[5, 6, 7]), seq(&[6, 7, 8]), None).unwrap(),
            ParallelSample::new(seq(&[8, 5]), seq(&[5, 5]), None).unwrap(),
        ];
        let yna = vec![seq(&[6, 8]), seq(&[5])];
        let (g1, r1) = reinforce_step(&batch, &yna, &p, &cfg, &tcfg, 4).unwrap();
        let (g2, r2) = reinforce_step(&batch, &yna, &p, &cfg, &tcfg, 4).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(r1, r2);
        for (i, t) in p.tensors().iter().enumerate() {
            if !t.name.starts_with("tailor.") {
                assert!(g1.data[i].iter().all(|&v| v == 0.0), "{} got gradient", t.name);
            }
        }
        assert!((r1.r - (0.8 * r1.r_na + 0.2 * r1.r_gt)).abs() < 1e-9);
    }

    #[test]
    fn pretraining_learns_to_copy() {
        use crate::data::{generate_synthetic, SynthSpec};
        use crate::model::{train, TrainConfig};
        let corpus = generate_synthetic(&SynthSpec {
            vocab_size: 8,
            length_range: (3, 5),
            corpus_size: 200,
            swap_prob: 0.0,
            long_range_prob: 0.0,
            seed: 5,
        })
        .unwrap();
        let cfg = ModelConfig {
            src_vocab: corpus.vocab_src.len(),
            tgt_vocab: corpus.vocab_tgt.len(),
            embed_dim: 16,
            ffn_dim: 32,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.0,
            encoder_mode: EncoderMode::Causal,
            max_len: 8,
        };
        let (train_set, held) = corpus.samples.split_at(160);
        let (base, _) = train(
            train_set,
            &[],
            Objective::WaitK(1),
            &cfg,
            &TrainConfig {
                steps: 20,
                ..TrainConfig::default()
            },
            1,
            None,
            &mut |_| {},
        )
        .unwrap();
        let tcfg = TailorConfig {
            n_layers: 1,
            ..TailorConfig::default()
        };
        let tc = TailorTrainConfig {
            steps: 300,
            batch_size: 16,
            adam: AdamConfig {
                lr: 3e-3,
                warmup_steps: 30,
                ..AdamConfig::default()
            },
        };
        let (ck, rep) = pretrain_tailor(train_set, &base, &tcfg, &tc, 2, &mut |_| {}).unwrap();
        assert_eq!(rep.skipped, 0);
        assert_eq!(ck.stage, Stage::PretrainedTailor);
        let exact = held
            .iter()
            .filter(|s| {
                extract_tailored_reference(&s.source, &s.target, &ck.params, &cfg, &tcfg)
                    .unwrap()
                    .0
                    == s.target
            })
            .count();
        assert!(exact * 10 >= held.len() * 8, "{exact}/{} copied", held.len());
        // Base tensors are untouched.
        for t in base.params.tensors() {
            assert_eq!(&ck.params.tensor(ck.params.id(&t.name).unwrap()).data, &t.data);
        }
    }
}
