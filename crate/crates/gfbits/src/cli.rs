//! Experiment front end: the pretrain / alternate / eval / report
//! subcommands, output-directory locking, and checkpoint wiring.
//!
//! Each run owns one output directory (enforced by a lock file) holding
//! `metrics.csv`, `candidates.csv`, and the checkpoints: `latest.ckpt`
//! after every completed round, plus `best.ckpt` and `final.ckpt` when an
//! alternate run finishes.

use crate::bitalloc::{ConstraintSet, LogPrecisionVector};
use crate::checkpoint::{self, BestRecord, Checkpoint, RngStreamState};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, FileSink, MetricsFile, MetricsRow, PhaseTag};
use crate::network::{argmax_rows, build_model, LayerBitsRow, Mode, Model, Phase};
use crate::rng::{stream, StreamTag};
use crate::trainer::{self, GlobalBest};
use rand_chacha::rand_core::RngCore;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// Holds `<out>/.lock` for the duration of a run; a second run on the
/// same directory fails instead of interleaving files.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(config_path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn make_constraints(cfg: &ExperimentConfig, model: &Model) -> Result<ConstraintSet> {
    ConstraintSet::new(
        [cfg.search.beta1, cfg.search.beta2],
        [cfg.search.rho1, cfg.search.rho2],
        cfg.static_bits,
        model.param_counts(),
        cfg.penalty_normalization()?,
    )
}

/// Captures the states of the run's derived streams for the checkpoint's
/// rng table. Streams are re-derivable from (seed, tag, round), so these
/// records double as an integrity cross-check on load.
fn rng_table(seed: u64, next_round: u64) -> Vec<RngStreamState> {
    [
        StreamTag::Shuffle,
        StreamTag::SuperBatch,
        StreamTag::CmaSampling,
    ]
    .into_iter()
    .map(|tag| {
        let mut rng = stream(seed, tag, next_round, 0);
        // Touching the stream pins down word position semantics.
        let _ = rng.next_u64();
        RngStreamState {
            tag: tag as u32,
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    })
    .collect()
}

fn checkpoint_from(
    model: &mut Model,
    v: &[f64],
    best: Option<&GlobalBest>,
    cfg: &ExperimentConfig,
    rounds_completed: u32,
    epoch: u64,
    step: u64,
) -> Checkpoint {
    let best_record = best.map(|b| BestRecord {
        state: b.state.clone(),
        v: b.v.v.clone(),
        bits: b.v.extract_bits(),
        objective: b.objective,
    });
    Checkpoint {
        arch: model.arch.clone(),
        bits: model.bit_allocation(),
        state: model.clone_state(),
        v: v.to_vec(),
        best: best_record,
        master_seed: cfg.seed,
        rng_states: rng_table(cfg.seed, rounds_completed as u64 + 1),
        rounds_completed,
        epoch,
        step,
    }
}

/// `pretrain` subcommand: static-precision QAT from scratch. Writes
/// `pretrain.ckpt` and the metrics CSV into `out`.
pub fn cmd_pretrain(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let cfg = load_config(config_path, seed)?;
    let _lock = DirLock::acquire(out)?;
    let (train_ds, _) = cfg.load_datasets()?;
    let mut model = build_model(&cfg.arch()?, cfg.seed)?;
    let mut sink = FileSink::create(out, &cfg.to_toml_string(), false)?;

    trainer::pretrain(
        &mut model,
        &train_ds,
        cfg.static_bits,
        &cfg.train_config(),
        cfg.seed,
        &mut sink,
    )?;
    sink.flush()?;

    let v_s = make_constraints(&cfg, &model)?.v_static;
    let ckpt = checkpoint_from(
        &mut model,
        &v_s.v,
        None,
        &cfg,
        0,
        cfg.train.epochs as u64,
        0,
    );
    let path = out.join("pretrain.ckpt");
    checkpoint::save(&path, &ckpt)?;
    Ok(path)
}

/// `alternate` subcommand: pretraining (inline, unless resuming) followed
/// by the alternating rounds. Writes `latest.ckpt` after each round and
/// `best.ckpt` / `final.ckpt` at the end.
pub fn cmd_alternate(
    config_path: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<PathBuf> {
    let cfg = load_config(config_path, seed)?;
    let _lock = DirLock::acquire(out)?;
    let (train_ds, test_ds) = cfg.load_datasets()?;
    let train_ds = Rc::new(train_ds);
    let test_ds = Rc::new(test_ds);
    let alt = cfg.alternation_config()?;
    let train_cfg = cfg.train_config();

    let (mut model, start_round, resume_best) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.master_seed != cfg.seed {
                return Err(Error::Usage(format!(
                    "checkpoint seed {} does not match configured seed {}",
                    ckpt.master_seed, cfg.seed
                )));
            }
            let model = ckpt.instantiate_model()?;
            let best = ckpt.best.as_ref().map(|b| GlobalBest {
                state: b.state.clone(),
                v: LogPrecisionVector::new(b.v.clone()),
                objective: b.objective,
            });
            (model, ckpt.rounds_completed, best)
        }
        None => (build_model(&cfg.arch()?, cfg.seed)?, 0, None),
    };

    let mut sink = FileSink::create(out, &cfg.to_toml_string(), resume.is_some())?;
    if resume.is_none() {
        trainer::pretrain(
            &mut model,
            &train_ds,
            cfg.static_bits,
            &train_cfg,
            cfg.seed,
            &mut sink,
        )?;
    }
    let constraints = make_constraints(&cfg, &model)?;

    let out_dir = out.to_path_buf();
    let cfg_ref = &cfg;
    let outcome = trainer::alternate(
        &mut model,
        &train_ds,
        &test_ds,
        &train_cfg,
        &alt,
        &constraints,
        cfg.seed,
        &mut sink,
        start_round,
        resume_best,
        |round, model, best| {
            let ckpt = checkpoint_from(
                model,
                &best.v.v,
                Some(best),
                cfg_ref,
                round,
                0,
                (round * alt.gf_steps) as u64,
            );
            checkpoint::save(&out_dir.join("latest.ckpt"), &ckpt)
        },
    )?;
    sink.flush()?;

    // Final model *is* the global best; persist both names.
    let best = outcome.best;
    let final_ckpt = checkpoint_from(
        &mut model,
        &best.v.v,
        Some(&best),
        &cfg,
        alt.rounds,
        0,
        (alt.rounds * alt.gf_steps) as u64,
    );
    checkpoint::save(&out.join("best.ckpt"), &final_ckpt)?;
    let final_path = out.join("final.ckpt");
    checkpoint::save(&final_path, &final_ckpt)?;
    Ok(final_path)
}

/// Per-layer table plus headline numbers produced by `eval`.
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub size_mb: f64,
    pub rows: Vec<LayerBitsRow>,
    pub split: Split,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(s, "split: {split}");
        let _ = writeln!(s, "top1_accuracy: {:.4}", self.accuracy);
        let _ = writeln!(s, "loss: {:.6}", self.loss);
        let _ = writeln!(s, "model_size_mb: {:.6}", self.size_mb);
        let _ = writeln!(s, "layer,kind,weight_bits,act_bits,weights,pinned");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer_index, r.kind, r.weight_bits, r.act_bits, r.weight_count, r.pinned
            );
        }
        s
    }
}

/// `eval` subcommand: accuracy, deployable size, and the per-layer bit
/// table of a checkpointed model on the requested split.
pub fn cmd_eval(checkpoint_path: &Path, config_path: &Path, split: Split) -> Result<EvalReport> {
    let cfg = load_config(config_path, None)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model = ckpt.instantiate_model()?;
    let (train_ds, test_ds) = cfg.load_datasets()?;
    let ds: &Dataset = match split {
        Split::Train => &train_ds,
        Split::Test => &test_ds,
    };
    let (loss, accuracy) = eval_on(&model, ds)?;
    let (r_w, _) = model.bit_allocation();
    let size_mb = crate::bitalloc::model_size_mb(&r_w, &model.param_counts())?;
    Ok(EvalReport {
        accuracy,
        loss,
        size_mb,
        rows: model.layer_bits_table(),
        split,
    })
}

fn eval_on(model: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    trainer::evaluate_split(model, ds, Mode::Quantized)
}

/// Top-1 accuracy of a model on an explicit fixture (used by tests and
/// examples).
pub fn accuracy_on_batch(model: &Model, inputs: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(inputs, Mode::Quantized, Phase::Eval)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One row of the per-round aggregation emitted by `report`.
#[derive(Debug, Clone)]
pub struct RoundSummary {
    pub round: u64,
    pub gf_best_objective: f64,
    pub gb_final_loss: f64,
    pub val_best_objective: f64,
}

#[derive(Debug)]
pub struct Report {
    pub config_echo: Option<String>,
    pub summaries: Vec<RoundSummary>,
}

/// `report` subcommand: validates the metrics file, checks chronological
/// order, and writes `summary.csv` (per round) plus `series.csv` (the
/// phase-annotated sequence for plotting).
pub fn cmd_report(metrics_path: &Path, out: &Path) -> Result<Report> {
    let MetricsFile { config_echo, rows } = metrics::read_metrics(metrics_path)?;
    check_chronological(&rows)?;

    let mut rounds: Vec<u64> = rows
        .iter()
        .filter(|r| r.round > 0)
        .map(|r| r.round)
        .collect();
    rounds.sort_unstable();
    rounds.dedup();

    let mut summaries = Vec::with_capacity(rounds.len());
    for round in rounds {
        let of_phase = |p: PhaseTag| -> Vec<&MetricsRow> {
            rows.iter()
                .filter(|r| r.round == round && r.phase == p)
                .collect()
        };
        let gf_best = of_phase(PhaseTag::GfStep)
            .iter()
            .map(|r| r.objective)
            .fold(f64::INFINITY, f64::min);
        let gb_final = of_phase(PhaseTag::GbEpoch)
            .last()
            .map(|r| r.objective)
            .unwrap_or(f64::NAN);
        let val_best = of_phase(PhaseTag::Eval)
            .iter()
            .map(|r| r.objective)
            .fold(f64::INFINITY, f64::min);
        summaries.push(RoundSummary {
            round,
            gf_best_objective: if gf_best.is_finite() { gf_best } else { f64::NAN },
            gb_final_loss: gb_final,
            val_best_objective: if val_best.is_finite() { val_best } else { f64::NAN },
        });
    }

    fs::create_dir_all(out)?;
    let mut summary = String::from("round,gf_best_objective,gb_final_loss,val_best_objective\n");
    for s in &summaries {
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            s.round, s.gf_best_objective, s.gb_final_loss, s.val_best_objective
        );
    }
    fs::write(out.join("summary.csv"), summary)?;

    let mut series = String::from("seq,phase,round,index,objective,accuracy,h1_mb,h2,sigma\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            series,
            "{},{},{},{},{},{},{},{},{}",
            i,
            r.phase.name(),
            r.round,
            r.index,
            r.objective,
            r.accuracy,
            r.h1_mb,
            r.h2,
            r.sigma
        );
    }
    fs::write(out.join("series.csv"), series)?;

    Ok(Report {
        config_echo,
        summaries,
    })
}

fn check_chronological(rows: &[MetricsRow]) -> Result<()> {
    for (i, pair) in rows.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.wall_time_s.is_nan() || b.wall_time_s.is_nan() {
            continue;
        }
        if b.wall_time_s < a.wall_time_s {
            // Line number: +2 header lines (echo + header), +1 one-based.
            return Err(Error::Value(format!(
                "rows out of chronological order near line {} ({} after {})",
                i + 4,
                b.wall_time_s,
                a.wall_time_s
            )));
        }
    }
    Ok(())
}
