//! `poformer` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, DEFAULT_STEP};
use crate::metrics::{compute_eer, compute_min_dcf, DcfParams, TrialSet};
use crate::synth::{utterance, UtteranceId};
use crate::train::{format_log, Trainer};
use crate::trials::{format_scores, join_scores, parse_scores, parse_trial_list, score_trials};

#[derive(Debug, Parser)]
#[command(name = "poformer", version, about = "Train and evaluate transformer-pooling speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the synthetic speaker task and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log destination (`step<TAB>lr<TAB>loss`); stdout if absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides `run.seed` from the config.
        #[arg(long, env = "POFORMER_SEED")]
        seed: Option<u64>,
    },
    /// Embed listed utterances, score a trial list, report EER and minDCF.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// One utterance id (`speaker:index:seed`) per line.
        #[arg(long)]
        utterances: PathBuf,
        #[arg(long)]
        scores_out: PathBuf,
        /// Print EER in percent instead of as a fraction.
        #[arg(long)]
        percent: bool,
    },
    /// Recompute EER and minDCF from an existing score file.
    Score {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        percent: bool,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, env = "POFORMER_SEED")]
        seed: Option<u64>,
    },
    /// Print a checkpoint's configuration, step and parameter counts.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train {
            config,
            out: ckpt_path,
            log,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.run.seed = seed;
            }
            let steps = cfg.run.steps;
            let mut trainer = Trainer::new(cfg)?;
            let entries = trainer.run(steps)?;
            let text = format_log(&entries);
            match log {
                Some(path) => std::fs::write(path, text)?,
                None => out.write_all(text.as_bytes())?,
            }
            trainer.checkpoint().save(&ckpt_path)?;
            Ok(0)
        }
        Command::Eval {
            ckpt,
            trials,
            utterances,
            scores_out,
            percent,
        } => {
            let trainer = Trainer::from_checkpoint(Checkpoint::load(&ckpt)?)?;
            let keys = parse_trial_list(&std::fs::read_to_string(&trials)?)?;
            let mut embeddings = HashMap::new();
            for (i, line) in std::fs::read_to_string(&utterances)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let id: UtteranceId = line.parse().map_err(|e: Error| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                let feats = utterance(&trainer.config.task, id);
                embeddings.insert(line.to_string(), trainer.net.embedding_of(&trainer.params, &feats)?);
            }
            let scores = score_trials(&keys, &embeddings)?;
            std::fs::write(&scores_out, format_scores(&scores))?;
            let set = join_scores(&keys, &scores)?;
            print_metrics(out, &set, percent)?;
            Ok(0)
        }
        Command::Score { scores, trials, percent } => {
            let keys = parse_trial_list(&std::fs::read_to_string(&trials)?)?;
            let lines = parse_scores(&std::fs::read_to_string(&scores)?)?;
            let set = join_scores(&keys, &lines)?;
            print_metrics(out, &set, percent)?;
            Ok(0)
        }
        Command::Gradcheck { config, tol, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.run.seed = seed;
            }
            let report = check_model(&cfg, DEFAULT_STEP)?;
            writeln!(
                out,
                "checked={} worst_rel_err={:.3e} param={}[{}] analytic={:.6e} numeric={:.6e}",
                report.checked,
                report.worst_rel_err,
                report.worst_param,
                report.worst_index,
                report.analytic,
                report.numeric
            )?;
            Ok(if report.worst_rel_err < tol { 0 } else { 1 })
        }
        Command::Inspect { ckpt } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            writeln!(out, "step: {}", ckpt.step)?;
            writeln!(out, "parameters: {} tensors, {} scalars", ckpt.params.len(), ckpt.params.numel())?;
            for (name, t) in ckpt.params.iter() {
                writeln!(out, "  {name} {:?} {}", t.shape(), t.numel())?;
            }
            writeln!(out, "config:\n{}", ckpt.config.to_json())?;
            Ok(0)
        }
    }
}

fn print_metrics(out: &mut dyn Write, set: &TrialSet, percent: bool) -> Result<()> {
    let eer = compute_eer(set)?;
    let min_dcf = compute_min_dcf(set, &DcfParams::default())?;
    let eer = if percent { 100.0 * eer } else { eer };
    writeln!(out, "EER={eer:.6} minDCF={min_dcf:.6}")?;
    Ok(())
}
