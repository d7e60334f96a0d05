//! Command-line interface.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 missing dependency, 4 integrity failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::{Error, Result};
use crate::pipeline::Run;

#[derive(Debug, Parser)]
#[command(name = "simt", version, about = "Simultaneous translation with tailored references")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; overrides both the configuration and $SIMT_OUTPUT_ROOT.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train / valid / test splits, alignments and vocabularies.
    GenData(Common),
    /// Train the full-sentence model.
    TrainFull(Common),
    /// Train a ground-truth Wait-k model per configured latency.
    TrainBase(Common),
    /// Decode non-anticipatory references with the full-sentence model.
    GenNaref(Common),
    /// Pre-train the tailor on ground truth with CTC.
    PretrainTailor(Common),
    /// Jointly fine-tune tailor (REINFORCE) and Wait-k model.
    Finetune(Common),
    /// Evaluate checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of the pipeline's own.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// System name used for the report files of `--checkpoint`.
        #[arg(long, default_value = "custom")]
        name: String,
        /// Latencies to evaluate `--checkpoint` at (default: eval.k).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Merge evaluation reports into one CSV / Markdown table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory (default: from --out or the configuration).
        run_dir: Option<PathBuf>,
    },
    /// Run every stage in order, then evaluate and report.
    All(Common),
}

fn resolve_dir(cfg_dir: &Path, out: &Option<PathBuf>) -> PathBuf {
    if let Some(o) = out {
        return o.clone();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => cfg_dir.to_path_buf(),
    }
}

fn open_run(c: &Common) -> Result<Run> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("`--config PATH` is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let dir = resolve_dir(&cfg.output_dir, &c.out);
    let mut run = Run::new(cfg, dir);
    run.verbose = !c.quiet;
    Ok(run)
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => open_run(&c)?.gen_data(),
        Command::TrainFull(c) => open_run(&c)?.train_full(),
        Command::TrainBase(c) => open_run(&c)?.train_base(),
        Command::GenNaref(c) => open_run(&c)?.gen_naref(),
        Command::PretrainTailor(c) => open_run(&c)?.pretrain_tailor(),
        Command::Finetune(c) => open_run(&c)?.finetune(),
        Command::Eval {
            common,
            checkpoint,
            name,
            k,
        } => {
            let run = open_run(&common)?;
            match checkpoint {
                Some(p) => {
                    let ks = if k.is_empty() { run.cfg.eval.k.clone() } else { k };
                    if ks.contains(&0) {
                        return Err(Error::Config("`--k`: latencies must be >= 1".into()));
                    }
                    run.eval_one(&p, &name, &ks).map(|_| ())
                }
                None => run.eval_pipeline().map(|_| ()),
            }
        }
        Command::Report { common, run_dir } => {
            let dir = match (run_dir, &common.config) {
                (Some(d), _) => d,
                (None, Some(_)) => open_run(&common)?.dir,
                (None, None) => resolve_dir(Path::new(""), &common.out),
            };
            if dir.as_os_str().is_empty() {
                return Err(Error::Config(
                    "report needs a run directory, `--out DIR` or `--config PATH`".into(),
                ));
            }
            let summary = crate::report::report(&dir)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", std::fs::read_to_string(dir.join("report.md")).unwrap_or_default());
            Ok(())
        }
        Command::All(c) => {
            let run = open_run(&c)?;
            run.gen_data()?;
            run.train_full()?;
            run.train_base()?;
            run.gen_naref()?;
            run.pretrain_tailor()?;
            run.finetune()?;
            run.eval_pipeline()?;
            let summary = crate::report::report(&run.dir)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
