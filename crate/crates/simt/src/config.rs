//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected and every validation message names the
//! offending key, e.g. `data.synthetic.swap_prob`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simt_core::ctc::UpsampleConfig;
use simt_core::data::SynthSpec;
use simt_core::model::{EncoderMode, ModelConfig, TrainConfig};
use simt_core::nn::AdamConfig;
use simt_core::tailor::{Baseline, JointConfig, TailorConfig, TailorTrainConfig};

use crate::error::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "SIMT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tailor: TailorSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Exactly one of `synthetic` or `files`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticData>,
    pub files: Option<FileData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub vocab_size: usize,
    pub length_range: (usize, usize),
    pub swap_prob: f64,
    pub long_range_prob: f64,
    /// Generator seed; defaults to the experiment seed.
    pub seed: Option<u64>,
    /// Train / valid / test sentence counts.
    pub sizes: [usize; 3],
}

/// Pre-tokenized corpora: `<prefix>.src`, `<prefix>.tgt` and optionally
/// `<prefix>.align` for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Encoder of the Wait-k models.
    pub encoder_mode: EncoderMode,
    /// Encoder of the full-sentence model.
    pub full_encoder_mode: EncoderMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 32,
            ffn_dim: 64,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            encoder_mode: EncoderMode::Causal,
            full_encoder_mode: EncoderMode::Bidirectional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTrain {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for StageTrain {
    fn default() -> Self {
        StageTrain {
            steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 200,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl StageTrain {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: self.adam(),
            log_every: 0,
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        positive(self.steps as f64, &format!("{key}.steps"))?;
        positive(self.batch_size as f64, &format!("{key}.batch_size"))?;
        positive(self.lr, &format!("{key}.lr"))?;
        non_negative(self.weight_decay, &format!("{key}.weight_decay"))?;
        non_negative(self.clip_norm, &format!("{key}.clip_norm"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub full: StageTrain,
    pub base: StageTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailorSection {
    pub n_layers: usize,
    pub upsample_factor: usize,
    pub alpha: f64,
    pub baseline: Baseline,
    pub samples_per_input: usize,
    pub detach_encoder: bool,
    pub pretrain: StageTrain,
}

impl Default for TailorSection {
    fn default() -> Self {
        let t = TailorConfig::default();
        TailorSection {
            n_layers: t.n_layers,
            upsample_factor: t.upsample.factor,
            alpha: t.alpha,
            baseline: t.baseline,
            samples_per_input: t.samples_per_input,
            detach_encoder: t.detach_encoder,
            pretrain: StageTrain {
                steps: 1000,
                ..StageTrain::default()
            },
        }
    }
}

impl TailorSection {
    pub fn tailor_config(&self) -> TailorConfig {
        TailorConfig {
            n_layers: self.n_layers,
            upsample: UpsampleConfig {
                factor: self.upsample_factor,
            },
            alpha: self.alpha,
            baseline: self.baseline,
            samples_per_input: self.samples_per_input,
            detach_encoder: self.detach_encoder,
        }
    }

    pub fn pretrain_config(&self) -> TailorTrainConfig {
        TailorTrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            adam: self.pretrain.adam(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub simt_lr: f64,
    pub tailor_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            steps: 1000,
            batch_size: 32,
            simt_lr: 5e-4,
            tailor_lr: 1e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

impl FinetuneSection {
    pub fn joint_config(&self) -> JointConfig {
        let adam = |lr| AdamConfig {
            lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        };
        JointConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            simt_adam: adam(self.simt_lr),
            tailor_adam: adam(self.tailor_lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Al,
    Ar,
    Hr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Latencies evaluated; the Wait-k stages run once per entry.
    pub k: Vec<usize>,
    pub metrics: Vec<Metric>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: vec![1],
            metrics: vec![Metric::Bleu, Metric::Al, Metric::Ar, Metric::Hr],
        }
    }
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key}`: {msg}"))
}

fn positive(v: f64, key: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, format!("must be positive, got {v}")))
    }
}

fn non_negative(v: f64, key: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, format!("must be non-negative, got {v}")))
    }
}

fn probability(v: f64, key: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config_err(key, format!("must lie in [0, 1], got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document; relative data paths resolve
    /// against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(f) = &mut cfg.data.files {
            for p in [&mut f.train, &mut f.valid, &mut f.test] {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "config file `{}` does not exist",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.files) {
            (Some(s), None) => {
                let key = "data.synthetic";
                probability(s.swap_prob, &format!("{key}.swap_prob"))?;
                probability(s.long_range_prob, &format!("{key}.long_range_prob"))?;
                let (lo, hi) = s.length_range;
                if lo < 2 || hi < lo {
                    return Err(config_err(
                        &format!("{key}.length_range"),
                        format!("needs 2 <= min <= max, got [{lo}, {hi}]"),
                    ));
                }
                if s.vocab_size < 4 {
                    return Err(config_err(&format!("{key}.vocab_size"), "must be >= 4"));
                }
                if s.sizes.contains(&0) {
                    return Err(config_err(
                        &format!("{key}.sizes"),
                        "every split needs at least one sentence",
                    ));
                }
            }
            (None, Some(f)) => {
                for (name, p) in [("train", &f.train), ("valid", &f.valid), ("test", &f.test)] {
                    for ext in ["src", "tgt"] {
                        let file = with_ext(p, ext);
                        if !file.exists() {
                            return Err(config_err(
                                &format!("data.files.{name}"),
                                format!("`{}` does not exist", file.display()),
                            ));
                        }
                    }
                }
            }
            _ => {
                return Err(config_err(
                    "data",
                    "exactly one of `synthetic` or `files` must be given",
                ));
            }
        }
        let m = &self.model;
        for (v, key) in [
            (m.embed_dim, "model.embed_dim"),
            (m.ffn_dim, "model.ffn_dim"),
            (m.n_layers, "model.n_layers"),
            (m.n_heads, "model.n_heads"),
        ] {
            positive(v as f64, key)?;
        }
        if !m.embed_dim.is_multiple_of(m.n_heads) {
            return Err(config_err(
                "model.n_heads",
                format!("must divide embed_dim = {}", m.embed_dim),
            ));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(config_err(
                "model.dropout",
                format!("must lie in [0, 1), got {}", m.dropout),
            ));
        }
        self.train.full.validate("train.full")?;
        self.train.base.validate("train.base")?;
        let t = &self.tailor;
        positive(t.n_layers as f64, "tailor.n_layers")?;
        positive(t.upsample_factor as f64, "tailor.upsample_factor")?;
        positive(t.samples_per_input as f64, "tailor.samples_per_input")?;
        probability(t.alpha, "tailor.alpha")?;
        if t.baseline == Baseline::LeaveOneOut && t.samples_per_input < 2 {
            return Err(config_err(
                "tailor.baseline",
                "leave_one_out needs samples_per_input >= 2",
            ));
        }
        t.pretrain.validate("tailor.pretrain")?;
        let f = &self.finetune;
        positive(f.steps as f64, "finetune.steps")?;
        positive(f.batch_size as f64, "finetune.batch_size")?;
        positive(f.simt_lr, "finetune.simt_lr")?;
        positive(f.tailor_lr, "finetune.tailor_lr")?;
        non_negative(f.clip_norm, "finetune.clip_norm")?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(config_err("eval.k", "needs at least one latency, each >= 1"));
        }
        let mut ks = self.eval.k.clone();
        ks.sort_unstable();
        ks.dedup();
        if ks.len() != self.eval.k.len() {
            return Err(config_err("eval.k", "latencies must be distinct"));
        }
        if self.eval.metrics.is_empty() {
            return Err(config_err("eval.metrics", "needs at least one metric"));
        }
        Ok(())
    }

    /// Synthetic generator settings covering all three splits.
    pub fn synth_spec(&self) -> Option<SynthSpec> {
        self.data.synthetic.as_ref().map(|s| SynthSpec {
            vocab_size: s.vocab_size,
            length_range: s.length_range,
            corpus_size: s.sizes.iter().sum(),
            swap_prob: s.swap_prob,
            long_range_prob: s.long_range_prob,
            seed: s.seed.unwrap_or(self.seed),
        })
    }

    /// Model configuration for the given vocabularies and sentence length.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, max_len: usize, mode: EncoderMode) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: m.embed_dim,
            ffn_dim: m.ffn_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            dropout: m.dropout,
            encoder_mode: mode,
            max_len,
        }
    }
}

pub(crate) fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data.synthetic]
        vocab_size = 32
        length_range = [6, 12]
        swap_prob = 0.1
        long_range_prob = 0.5
        sizes = [100, 10, 10]
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.eval.k, vec![1]);
        assert_eq!(c.tailor.alpha, 0.2);
        assert_eq!(c.synth_spec().unwrap().corpus_size, 120);
    }

    #[test]
    fn bad_probability_names_the_key() {
        let text = MINIMAL.replace("swap_prob = 0.1", "swap_prob = 1.5");
        let e = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("swap_prob"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[model]\nembed_dimm = 3\n");
        let e = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("embed_dimm"), "{e}");
    }
}
