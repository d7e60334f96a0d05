//! The experiment pipeline over one run directory.
//!
//! ```text
//! data/{train,valid,test}.{src,tgt,align}  data/vocab.{src,tgt}
//! full.ckpt                                  full-sentence model
//! base_k{k}.ckpt                             ground-truth Wait-k model
//! naref_k{k}.txt  naref_k{k}.meta.json       non-anticipatory references
//! pretrained_k{k}.ckpt                       base model plus CTC-trained tailor
//! finetuned_k{k}.ckpt                        jointly trained model and tailor
//! tailored_k{k}.txt  references_k{k}.json    tailored references and their analysis
//! eval/{system}.{json,csv}                   metrics per latency
//! report.{csv,md}                            merged comparison
//! logs/{stage}.jsonl                         per-step training logs
//! manifests/{stage}.json                     checksums of inputs and outputs
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use simt_core::data::{generate_synthetic, synthetic_vocabularies, Corpus, Lexicon};
use simt_core::metrics::{corpus_anticipation_rate, corpus_bleu, evaluate, BleuConfig, EvalItem};
use simt_core::model::{
    decode_streaming, decode_testtime_waitk, train, Checkpoint, EncoderMode, Objective, Stage, StepLog,
};
use simt_core::tailor::{extract_tailored_reference, pretrain_tailor, stage3_joint_train, JointLog};
use simt_core::{AlignmentSet, TokenSeq};

use crate::checkpoint;
use crate::config::{with_ext, ExperimentConfig, Metric};
use crate::corpus_io::{
    load_corpus, load_corpus_with, read_sentences, read_vocab, write_sentences, write_split, write_vocab, SplitPaths,
};
use crate::error::{Error, Result};
use crate::files::{sha256_file, write_text};
use crate::manifest::{verify_inputs, Manifest};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Corpora of one run, read back from the run directory.
pub struct Data {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    /// Word-level lexicon when the vocabularies follow the synthetic
    /// `sN` / `tN` naming; hypothesis alignments need it.
    pub lexicon: Option<Lexicon>,
    /// Longest sentence over all splits, plus two.
    pub max_len: usize,
}

/// One row of an evaluation report; absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub k: usize,
    pub bleu: Option<f64>,
    pub al: Option<f64>,
    pub ar: Option<f64>,
    pub hr: Option<f64>,
    pub n_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub rows: Vec<EvalRow>,
}

/// Quality and anticipation of the references used at latency `k`,
/// measured on the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAnalysis {
    pub k: usize,
    pub n_sentences: usize,
    pub ar_ground_truth: f64,
    pub ar_naref: Option<f64>,
    pub ar_tailored: Option<f64>,
    pub bleu_naref: f64,
    pub bleu_tailored: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarefMeta {
    pub k: usize,
    pub full_ckpt_sha256: String,
}

/// A configured run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    /// Print progress to stderr.
    pub verbose: bool,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, dir: PathBuf) -> Self {
        Run {
            cfg,
            dir,
            verbose: true,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn split(&self, name: &str) -> SplitPaths {
        SplitPaths::new(&self.data_dir(), name)
    }

    pub fn vocab_paths(&self) -> (PathBuf, PathBuf) {
        (self.data_dir().join("vocab.src"), self.data_dir().join("vocab.tgt"))
    }

    pub fn full_ckpt(&self) -> PathBuf {
        self.dir.join("full.ckpt")
    }

    pub fn base_ckpt(&self, k: usize) -> PathBuf {
        self.dir.join(format!("base_k{k}.ckpt"))
    }

    pub fn naref(&self, k: usize) -> PathBuf {
        self.dir.join(format!("naref_k{k}.txt"))
    }

    pub fn naref_meta(&self, k: usize) -> PathBuf {
        self.dir.join(format!("naref_k{k}.meta.json"))
    }

    pub fn pretrained_ckpt(&self, k: usize) -> PathBuf {
        self.dir.join(format!("pretrained_k{k}.ckpt"))
    }

    pub fn finetuned_ckpt(&self, k: usize) -> PathBuf {
        self.dir.join(format!("finetuned_k{k}.ckpt"))
    }

    pub fn tailored(&self, k: usize) -> PathBuf {
        self.dir.join(format!("tailored_k{k}.txt"))
    }

    pub fn references(&self, k: usize) -> PathBuf {
        self.dir.join(format!("references_k{k}.json"))
    }

    pub fn eval_json(&self, system: &str) -> PathBuf {
        self.dir.join("eval").join(format!("{system}.json"))
    }

    fn log_path(&self, stage: &str) -> PathBuf {
        self.dir.join("logs").join(format!("{stage}.jsonl"))
    }

    fn data_files(&self) -> Vec<PathBuf> {
        let (vs, vt) = self.vocab_paths();
        let mut v = vec![vs, vt];
        for s in SPLITS {
            v.extend(self.split(s).all().iter().map(|p| p.to_path_buf()));
        }
        v
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Writes the three splits, their alignments and the vocabularies.
    pub fn gen_data(&self) -> Result<()> {
        let (train, valid, test) = if let Some(spec) = self.cfg.synth_spec() {
            let sizes = self.cfg.data.synthetic.as_ref().expect("synthetic data").sizes;
            let corpus = generate_synthetic(&spec)?;
            let (vocab_src, vocab_tgt) = synthetic_vocabularies(spec.vocab_size);
            let part = |lo: usize, hi: usize| Corpus {
                samples: corpus.samples[lo..hi].to_vec(),
                vocab_src: vocab_src.clone(),
                vocab_tgt: vocab_tgt.clone(),
            };
            let (a, b) = (sizes[0], sizes[0] + sizes[1]);
            (part(0, a), part(a, b), part(b, corpus.len()))
        } else {
            let f = self.cfg.data.files.as_ref().expect("file data");
            let align = |p: &Path| Some(with_ext(p, "align")).filter(|a| a.exists());
            let load = |p: &Path, v: Option<&Corpus>| {
                let (s, t, a) = (with_ext(p, "src"), with_ext(p, "tgt"), align(p));
                match v {
                    None => load_corpus(&s, &t, a.as_deref()),
                    Some(c) => load_corpus_with(&s, &t, a.as_deref(), &c.vocab_src, &c.vocab_tgt),
                }
            };
            let train = load(&f.train, None)?;
            let valid = load(&f.valid, Some(&train))?;
            let test = load(&f.test, Some(&train))?;
            (train, valid, test)
        };
        for (name, c) in [("train", &train), ("valid", &valid), ("test", &test)] {
            write_split(c, &self.split(name))?;
        }
        let (vs, vt) = self.vocab_paths();
        write_vocab(&vs, &train.vocab_src)?;
        write_vocab(&vt, &train.vocab_tgt)?;
        Manifest::build(
            &self.dir,
            "gen-data",
            self.cfg.seed,
            &self.cfg.data,
            &[],
            &self.data_files(),
        )?
        .save(&self.dir)?;
        self.say(format!(
            "wrote {} / {} / {} sentences to {}",
            train.len(),
            valid.len(),
            test.len(),
            self.data_dir().display()
        ));
        Ok(())
    }

    /// Reads the corpora written by [`Run::gen_data`].
    pub fn load_data(&self) -> Result<Data> {
        verify_inputs(&self.dir, &self.data_files())?;
        let (vs, vt) = self.vocab_paths();
        let vocab_src = read_vocab(&vs)?;
        let vocab_tgt = read_vocab(&vt)?;
        let load = |name: &str| {
            let p = self.split(name);
            let align = std::fs::metadata(&p.align).map(|m| m.len() > 0).unwrap_or(false);
            let mut c = load_corpus_with(
                &p.src,
                &p.tgt,
                align.then_some(p.align.as_path()),
                &vocab_src,
                &vocab_tgt,
            )?;
            // An alignment file of blank lines means "no alignments".
            if c.samples
                .iter()
                .all(|s| s.alignment.as_ref().is_none_or(AlignmentSet::is_empty))
            {
                for s in &mut c.samples {
                    s.alignment = None;
                }
            }
            Ok::<_, Error>(c)
        };
        let (train, valid, test) = (load("train")?, load("valid")?, load("test")?);
        let lexicon = Lexicon::from_synthetic_surfaces(&vocab_src, &vocab_tgt);
        let has_lexicon = (0..vocab_src.len() as u32).any(|id| lexicon.translate(id).is_some());
        let max_len = train.max_len().max(valid.max_len()).max(test.max_len()) + 2;
        Ok(Data {
            train,
            valid,
            test,
            lexicon: has_lexicon.then_some(lexicon),
            max_len,
        })
    }

    fn train_log(&self, stage: &str) -> Result<JsonLines> {
        JsonLines::create(&self.log_path(stage))
    }

    fn progress(&self, stage: &str, step: usize, total: usize, what: String) {
        if total >= 10 && step.is_multiple_of(total / 10) {
            self.say(format!("{stage}: step {step}/{total} {what}"));
        }
    }

    pub fn train_full(&self) -> Result<()> {
        let data = self.load_data()?;
        let cfg = self.cfg.model_config(
            data.train.vocab_src.len(),
            data.train.vocab_tgt.len(),
            data.max_len,
            self.cfg.model.full_encoder_mode,
        );
        let tc = self.cfg.train.full.train_config();
        let mut log = self.train_log("train-full")?;
        let (ck, report) = train(
            &data.train.samples,
            &data.valid.samples,
            Objective::FullSentence,
            &cfg,
            &tc,
            self.cfg.seed,
            None,
            &mut |s: &StepLog| {
                log.step(s);
                self.progress("train-full", s.step, tc.steps, format!("loss {:.4}", s.loss));
            },
        )?;
        log.finish()?;
        for (epoch, v) in &report.validation {
            self.say(format!("train-full: epoch {epoch} validation loss {v:.4}"));
        }
        let out = self.full_ckpt();
        checkpoint::save(&ck, &out)?;
        Manifest::build(
            &self.dir,
            "train-full",
            self.cfg.seed,
            &(&cfg, &self.cfg.train.full),
            &self.data_files(),
            &[out],
        )?
        .save(&self.dir)
    }

    pub fn train_base(&self) -> Result<()> {
        let data = self.load_data()?;
        let cfg = self.cfg.model_config(
            data.train.vocab_src.len(),
            data.train.vocab_tgt.len(),
            data.max_len,
            self.cfg.model.encoder_mode,
        );
        let tc = self.cfg.train.base.train_config();
        for &k in &self.cfg.eval.k {
            let stage = format!("train-base_k{k}");
            let mut log = self.train_log(&stage)?;
            let (ck, report) = train(
                &data.train.samples,
                &data.valid.samples,
                Objective::WaitK(k),
                &cfg,
                &tc,
                self.cfg.seed,
                None,
                &mut |s: &StepLog| {
                    log.step(s);
                    self.progress(&stage, s.step, tc.steps, format!("loss {:.4}", s.loss));
                },
            )?;
            log.finish()?;
            if let Some((epoch, v)) = report.validation.last() {
                self.say(format!("{stage}: epoch {epoch} validation loss {v:.4}"));
            }
            let out = self.base_ckpt(k);
            checkpoint::save(&ck, &out)?;
            Manifest::build(
                &self.dir,
                &stage,
                self.cfg.seed,
                &(&cfg, &self.cfg.train.base, k),
                &self.data_files(),
                &[out],
            )?
            .save(&self.dir)?;
        }
        Ok(())
    }

    /// Decodes the training sources with the full-sentence model under
    /// test-time Wait-k, one file per latency.
    pub fn gen_naref(&self) -> Result<()> {
        let full = self.full_ckpt();
        let mut inputs = self.data_files();
        inputs.push(full.clone());
        verify_inputs(&self.dir, &inputs)?;
        let data = self.load_data()?;
        let ck = checkpoint::load(&full)?;
        expect_stage(&ck, Stage::Full, &full)?;
        let full_sha = sha256_file(&full)?;
        for &k in &self.cfg.eval.k {
            let t0 = Instant::now();
            let refs = data
                .train
                .samples
                .iter()
                .map(|s| decode_testtime_waitk(&s.source, k, &ck.params, &ck.config))
                .collect::<simt_core::Result<Vec<_>>>()?;
            let empty = refs.iter().filter(|r| r.is_empty()).count();
            let out = self.naref(k);
            write_sentences(&out, &refs, &data.train.vocab_tgt)?;
            let meta = NarefMeta {
                k,
                full_ckpt_sha256: full_sha.clone(),
            };
            write_json(&self.naref_meta(k), &meta)?;
            Manifest::build(
                &self.dir,
                &format!("gen-naref_k{k}"),
                self.cfg.seed,
                &k,
                &inputs,
                &[out, self.naref_meta(k)],
            )?
            .save(&self.dir)?;
            self.say(format!(
                "gen-naref: k={k} {} references ({empty} empty) in {:.1}s",
                refs.len(),
                t0.elapsed().as_secs_f64()
            ));
        }
        Ok(())
    }

    pub fn pretrain_tailor(&self) -> Result<()> {
        let tcfg = self.cfg.tailor.tailor_config();
        let train_cfg = self.cfg.tailor.pretrain_config();
        for &k in &self.cfg.eval.k {
            let base_path = self.base_ckpt(k);
            let mut inputs = self.data_files();
            inputs.push(base_path.clone());
            verify_inputs(&self.dir, &inputs)?;
            let data = self.load_data()?;
            let base = checkpoint::load(&base_path)?;
            expect_stage(&base, Stage::Base, &base_path)?;
            let stage = format!("pretrain-tailor_k{k}");
            let mut log = self.train_log(&stage)?;
            let (ck, report) = pretrain_tailor(
                &data.train.samples,
                &base,
                &tcfg,
                &train_cfg,
                self.cfg.seed,
                &mut |s: &StepLog| {
                    log.step(s);
                    self.progress(&stage, s.step, train_cfg.steps, format!("ctc loss {:.4}", s.loss));
                },
            )?;
            log.finish()?;
            if report.skipped > 0 {
                self.say(format!("{stage}: skipped {} infeasible targets", report.skipped));
            }
            let out = self.pretrained_ckpt(k);
            checkpoint::save(&ck, &out)?;
            Manifest::build(
                &self.dir,
                &stage,
                self.cfg.seed,
                &(&self.cfg.tailor, k),
                &inputs,
                &[out],
            )?
            .save(&self.dir)?;
        }
        Ok(())
    }

    pub fn finetune(&self) -> Result<()> {
        let joint = self.cfg.finetune.joint_config();
        for &k in &self.cfg.eval.k {
            let pre_path = self.pretrained_ckpt(k);
            let mut inputs = self.data_files();
            inputs.extend([pre_path.clone(), self.naref(k), self.naref_meta(k)]);
            verify_inputs(&self.dir, &inputs)?;
            let meta: NarefMeta = read_json(&self.naref_meta(k))?;
            if meta.k != k {
                return Err(Error::Integrity(format!("naref_k{k} metadata records k={}", meta.k)));
            }
            let full_sha = sha256_file(&self.full_ckpt())?;
            if meta.full_ckpt_sha256 != full_sha {
                return Err(Error::Integrity(format!(
                    "naref_k{k} was generated from a different full.ckpt; rerun gen-naref"
                )));
            }
            let data = self.load_data()?;
            let y_na = read_sentences(&self.naref(k), &data.train.vocab_tgt)?;
            if y_na.len() != data.train.len() {
                return Err(Error::Integrity(format!(
                    "naref_k{k} has {} lines for {} training sentences",
                    y_na.len(),
                    data.train.len()
                )));
            }
            let pre = checkpoint::load(&pre_path)?;
            expect_stage(&pre, Stage::PretrainedTailor, &pre_path)?;
            let stage = format!("finetune_k{k}");
            let mut log = JsonLines::create(&self.log_path(&stage))?;
            let (ck, report) = stage3_joint_train(
                &data.train.samples,
                &y_na,
                &pre,
                k,
                &joint,
                self.cfg.seed,
                &mut |l: &JointLog| {
                    log.joint(l);
                    self.progress(
                        &stage,
                        l.step,
                        joint.steps,
                        format!(
                            "reward {:.2} (na {:.2}, gt {:.2}) simt loss {:.4}",
                            l.r, l.r_na, l.r_gt, l.simt_loss
                        ),
                    );
                },
            )?;
            log.finish()?;
            let high = report.high_fallback_steps();
            if high > 0 {
                self.say(format!(
                    "warning: {stage}: {high} steps fell back to ground truth for >20% of the batch"
                ));
            }
            let out = self.finetuned_ckpt(k);
            checkpoint::save(&ck, &out)?;

            let (analysis, tailored) = analyze_references(&data, &y_na, &ck, k)?;
            write_sentences(&self.tailored(k), &tailored, &data.train.vocab_tgt)?;
            write_json(&self.references(k), &analysis)?;
            self.say(format!(
                "{stage}: references BLEU tailored {:.2} vs naref {:.2}; AR ground truth {:.4} tailored {}",
                analysis.bleu_tailored,
                analysis.bleu_naref,
                analysis.ar_ground_truth,
                analysis.ar_tailored.map_or("n/a".into(), |a| format!("{a:.4}"))
            ));
            Manifest::build(
                &self.dir,
                &stage,
                self.cfg.seed,
                &(&self.cfg.finetune, k),
                &inputs,
                &[out, self.tailored(k), self.references(k)],
            )?
            .save(&self.dir)?;
        }
        Ok(())
    }

    /// Evaluates the pipeline's Wait-k and tailor-trained checkpoints at
    /// every latency they were trained for.
    pub fn eval_pipeline(&self) -> Result<Vec<EvalReport>> {
        let mut found = Vec::new();
        for (system, path_of) in [
            ("waitk", Run::base_ckpt as fn(&Run, usize) -> PathBuf),
            ("tailor", Run::finetuned_ckpt),
        ] {
            let ks: Vec<usize> = self
                .cfg
                .eval
                .k
                .iter()
                .copied()
                .filter(|&k| path_of(self, k).exists())
                .collect();
            if ks.is_empty() {
                continue;
            }
            let mut rows = Vec::new();
            let mut sources = Vec::new();
            for k in ks {
                let path = path_of(self, k);
                let mut r = self.eval_checkpoint(&path, system, &[k])?;
                rows.append(&mut r.rows);
                sources.push(path);
            }
            let report = EvalReport {
                system: system.to_owned(),
                checkpoint: sources
                    .iter()
                    .map(|p| rel_name(&self.dir, p))
                    .collect::<Vec<_>>()
                    .join(","),
                checkpoint_sha256: sources
                    .iter()
                    .map(|p| sha256_file(p))
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                rows,
            };
            self.write_eval(&report)?;
            found.push(report);
        }
        if found.is_empty() {
            let k = self.cfg.eval.k[0];
            return Err(Error::Missing(self.base_ckpt(k)));
        }
        Ok(found)
    }

    /// Evaluates one checkpoint at each latency in `ks` and writes
    /// `eval/{system}.{json,csv}`.
    pub fn eval_one(&self, path: &Path, system: &str, ks: &[usize]) -> Result<EvalReport> {
        let report = self.eval_checkpoint(path, system, ks)?;
        self.write_eval(&report)?;
        Ok(report)
    }

    fn write_eval(&self, report: &EvalReport) -> Result<()> {
        write_json(&self.eval_json(&report.system), report)?;
        let csv = crate::report::rows_to_csv(&report.rows);
        write_text(&self.eval_json(&report.system).with_extension("csv"), &csv)
    }

    fn eval_checkpoint(&self, path: &Path, system: &str, ks: &[usize]) -> Result<EvalReport> {
        if path.starts_with(&self.dir) {
            verify_inputs(&self.dir, &[path.to_path_buf()])?;
        }
        let data = self.load_data()?;
        let ck = checkpoint::load(path)?;
        let cfg = &ck.config;
        if cfg.encoder_mode != EncoderMode::Causal {
            return Err(Error::Config(format!(
                "`{}` has a bidirectional encoder; streaming evaluation needs a causal Wait-k model",
                path.display()
            )));
        }
        let metrics = &self.cfg.eval.metrics;
        let has_ref_align = data.test.samples.iter().all(|s| s.alignment.is_some());
        let empty = AlignmentSet::new();
        let mut rows = Vec::new();
        for &k in ks {
            let t0 = Instant::now();
            let decoded = data
                .test
                .samples
                .iter()
                .map(|s| decode_streaming(&s.source, k, &ck.params, cfg))
                .collect::<simt_core::Result<Vec<_>>>()?;
            let hyp_align: Vec<AlignmentSet> = decoded
                .iter()
                .zip(&data.test.samples)
                .map(|((h, _), s)| {
                    data.lexicon
                        .as_ref()
                        .map_or_else(AlignmentSet::new, |l| l.align(&s.source, h))
                })
                .collect();
            let items: Vec<EvalItem> = data
                .test
                .samples
                .iter()
                .zip(&decoded)
                .zip(&hyp_align)
                .map(|((s, (h, g)), ha)| EvalItem {
                    source_len: s.source.len(),
                    reference: &s.target,
                    reference_alignment: s.alignment.as_ref().unwrap_or(&empty),
                    hypothesis: h,
                    hypothesis_alignment: ha,
                    trace: g,
                })
                .collect();
            let m = evaluate(&items, k)?;
            let want = |x: Metric| metrics.contains(&x);
            let row = EvalRow {
                system: system.to_owned(),
                k,
                bleu: want(Metric::Bleu).then_some(m.bleu),
                al: want(Metric::Al).then_some(m.al),
                ar: (want(Metric::Ar) && has_ref_align).then_some(m.ar),
                hr: (want(Metric::Hr) && data.lexicon.is_some()).then_some(m.hr),
                n_sentences: items.len(),
            };
            self.say(format!(
                "eval {system} k={k}: BLEU {} AL {} AR {} HR {} ({:.1}s)",
                fmt_opt(row.bleu),
                fmt_opt(row.al),
                fmt_opt(row.ar),
                fmt_opt(row.hr),
                t0.elapsed().as_secs_f64()
            ));
            rows.push(row);
        }
        Ok(EvalReport {
            system: system.to_owned(),
            checkpoint: rel_name(&self.dir, path),
            checkpoint_sha256: sha256_file(path)?,
            rows,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

fn rel_name(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

fn expect_stage(ck: &Checkpoint, stage: Stage, path: &Path) -> Result<()> {
    if ck.stage == stage {
        Ok(())
    } else {
        Err(Error::Integrity(format!(
            "`{}` holds a {} checkpoint, expected {}",
            path.display(),
            ck.stage.as_str(),
            stage.as_str()
        )))
    }
}

/// Compares ground truth, non-anticipatory and tailored references on the
/// training corpus; also returns the tailored references.
pub fn analyze_references(
    data: &Data,
    y_na: &[TokenSeq],
    ck: &Checkpoint,
    k: usize,
) -> Result<(ReferenceAnalysis, Vec<TokenSeq>)> {
    let tcfg = ck
        .tailor
        .ok_or_else(|| Error::Integrity("checkpoint lacks a tailor configuration".into()))?;
    let samples = &data.train.samples;
    let mut tailored = Vec::with_capacity(samples.len());
    let mut fallbacks = 0usize;
    for s in samples {
        let (r, fell_back) = extract_tailored_reference(&s.source, &s.target, &ck.params, &ck.config, &tcfg)?;
        fallbacks += fell_back as usize;
        tailored.push(r);
    }
    let pairs = |refs: &[TokenSeq]| -> Vec<(TokenSeq, TokenSeq)> {
        refs.iter()
            .zip(samples)
            .map(|(r, s)| (r.clone(), s.target.clone()))
            .collect()
    };
    let cfg = BleuConfig::corpus();
    let gt_align: Option<Vec<&AlignmentSet>> = samples.iter().map(|s| s.alignment.as_ref()).collect();
    let ar_gt = match &gt_align {
        Some(h) => corpus_anticipation_rate(samples.iter().zip(h).map(|(s, h)| (s.source.len(), &s.target, *h)), k)?,
        None => f64::NAN,
    };
    let ar_of = |refs: &[TokenSeq]| -> Result<Option<f64>> {
        let Some(lex) = &data.lexicon else { return Ok(None) };
        let aligns: Vec<AlignmentSet> = refs.iter().zip(samples).map(|(r, s)| lex.align(&s.source, r)).collect();
        Ok(Some(corpus_anticipation_rate(
            refs.iter()
                .zip(samples)
                .zip(&aligns)
                .map(|((r, s), h)| (s.source.len(), r, h)),
            k,
        )?))
    };
    Ok((
        ReferenceAnalysis {
            k,
            n_sentences: samples.len(),
            ar_ground_truth: ar_gt,
            ar_naref: ar_of(y_na)?,
            ar_tailored: ar_of(&tailored)?,
            bleu_naref: corpus_bleu(&pairs(y_na), &cfg)?,
            bleu_tailored: corpus_bleu(&pairs(&tailored), &cfg)?,
            fallback_rate: fallbacks as f64 / samples.len() as f64,
        },
        tailored,
    ))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Other(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("unreadable {}: {e}", path.display())))
}

/// JSON-lines training log; write errors surface at [`JsonLines::finish`].
struct JsonLines {
    file: std::io::BufWriter<std::fs::File>,
    start: Instant,
    error: Option<std::io::Error>,
    path: PathBuf,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(JsonLines {
            file: std::io::BufWriter::new(file),
            start: Instant::now(),
            error: None,
            path: path.to_path_buf(),
        })
    }

    fn line(&mut self, v: serde_json::Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{v}") {
                self.error = Some(e);
            }
        }
    }

    fn wall_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn step(&mut self, s: &StepLog) {
        let v = serde_json::json!({"step": s.step, "loss": s.loss, "lr": s.lr, "wall_ms": self.wall_ms()});
        self.line(v);
    }

    fn joint(&mut self, l: &JointLog) {
        let v = serde_json::json!({
            "step": l.step, "r_na": l.r_na, "r_gt": l.r_gt, "r": l.r, "baseline": l.baseline,
            "fallback_rate": l.fallback_rate, "simt_loss": l.simt_loss, "wall_ms": self.wall_ms(),
        });
        self.line(v);
    }

    fn finish(mut self) -> Result<()> {
        let ctx = format!("writing {}", self.path.display());
        if let Some(e) = self.error.take() {
            return Err(Error::io(ctx, e));
        }
        self.file.flush().map_err(|e| Error::io(ctx, e))
    }
}
