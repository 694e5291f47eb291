//! Training regimes and their composition: quantization-aware
//! pretraining at a static precision, gradient-based QAT sessions,
//! gradient-free bit-allocation sessions, and the alternating driver that
//! ties them together with restarts and best-handover.
//!
//! One run is a single logical thread of control. Every random draw comes
//! from a stream derived from `(master seed, purpose, round, epoch)`, so
//! a run is a pure function of its config and any round boundary can be
//! resumed bit-exactly from a checkpoint.

use crate::bitalloc::{evaluate_candidate, CandidateEval, ConstraintSet, LogPrecisionVector};
use crate::cmaes::{cma_init, CmaState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsSink, PhaseTag};
use crate::network::{argmax_rows, Mode, Model, ModelState, Phase};
use crate::rng::{stream, stream_seed, StreamTag};
use crate::superbatch::{superbatch_init, Policy, Snapshot, SuperBatch};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use std::rc::Rc;

/// Learnable clipping scales are projected back above this after every
/// SGD step.
const ALPHA_MIN: f64 = 1e-6;
/// Learning-rate scale for retraining sessions relative to pretraining.
const SESSION_LR_SCALE: f64 = 0.1;

/// Gradient-based training settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub mixup_alpha: f64,
    pub hflip: bool,
    pub crop_padding: usize,
    pub mixup: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain("momentum must be in [0, 1)".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Domain("warmup must be shorter than training".into()));
        }
        if self.mixup && self.mixup_alpha <= 0.0 {
            return Err(Error::Domain("mixup needs a positive concentration".into()));
        }
        Ok(())
    }
}

/// Super-batch settings for gradient-free sessions.
#[derive(Debug, Clone)]
pub struct SuperBatchConfig {
    pub n_minibatches: usize,
    pub batch_size: usize,
    pub policy: Policy,
    /// Evaluate whole generations against one frozen snapshot, advancing
    /// the queue afterwards. Off by default.
    pub frozen_snapshot: bool,
}

/// Alternating-retraining settings.
#[derive(Debug, Clone)]
pub struct AlternationConfig {
    pub rounds: u32,
    pub gf_steps: u32,
    pub gb_epochs: usize,
    pub evals_per_step: u32,
    pub sigma0: f64,
    pub superbatch: SuperBatchConfig,
}

/// Cosine learning-rate schedule with linear warmup:
/// `lr_max * (t+1) / warmup` for `t < warmup`, then
/// `0.5 * lr_max * (1 + cos(pi * (t - warmup) / (total - warmup)))`.
pub fn cosine_lr(epoch: f64, total_epochs: f64, warmup_epochs: f64, lr_max: f64) -> f64 {
    if epoch < warmup_epochs {
        lr_max * (epoch + 1.0) / warmup_epochs
    } else {
        let span = (total_epochs - warmup_epochs).max(f64::MIN_POSITIVE);
        0.5 * lr_max * (1.0 + (std::f64::consts::PI * (epoch - warmup_epochs) / span).cos())
    }
}

/// A mixup-blended batch: inputs plus the two label sets and the blend
/// weight for the loss.
pub struct MixedBatch {
    pub inputs: Tensor,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lam: f64,
}

/// Blends a batch with a permuted pairing at a fixed coefficient.
pub fn mix_with_lambda(
    inputs: &Tensor,
    labels: &[usize],
    perm: &[usize],
    lam: f64,
) -> Result<MixedBatch> {
    let n = inputs.shape()[0];
    if perm.len() != n || labels.len() != n {
        return Err(Error::Shape("mixup permutation/labels length mismatch".into()));
    }
    let per = inputs.len() / n;
    let src = inputs.data();
    let mut mixed = vec![0.0; inputs.len()];
    for (row, &pair) in perm.iter().enumerate() {
        for k in 0..per {
            mixed[row * per + k] = lam * src[row * per + k] + (1.0 - lam) * src[pair * per + k];
        }
    }
    Ok(MixedBatch {
        inputs: Tensor::new(inputs.shape(), &mixed)?,
        labels_a: labels.to_vec(),
        labels_b: perm.iter().map(|&p| labels[p]).collect(),
        lam,
    })
}

/// Draws `lam ~ Beta(a, a)` and a random pairing, then blends.
pub fn mixup_batch(
    inputs: &Tensor,
    labels: &[usize],
    a: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    if a <= 0.0 {
        return Err(Error::Domain("mixup concentration must be positive".into()));
    }
    let beta = Beta::new(a, a).map_err(|e| Error::Domain(format!("beta({a},{a}): {e}")))?;
    let lam: f64 = beta.sample(rng);
    let mut perm: Vec<usize> = (0..inputs.shape()[0]).collect();
    perm.shuffle(rng);
    mix_with_lambda(inputs, labels, &perm, lam)
}

/// One SGD-with-momentum update on a flat parameter:
/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum buffers for a whole model, aligned with `params_mut` order.
struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64) -> Sgd {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        let slots = model.params_mut();
        if self.velocity.is_empty() {
            self.velocity = slots.iter().map(|s| vec![0.0; s.tensor.len()]).collect();
        }
        if self.velocity.len() != slots.len() {
            return Err(Error::Internal("velocity/parameter count mismatch".into()));
        }
        for (slot, vel) in slots.into_iter().zip(self.velocity.iter_mut()) {
            let grad = match slot.tensor.grad() {
                Some(g) => g,
                None => vec![0.0; slot.tensor.len()],
            };
            let mut data = slot.tensor.data().to_vec();
            sgd_momentum_step(&mut data, &grad, vel, lr, self.momentum);
            if slot.positive {
                for x in data.iter_mut() {
                    *x = x.max(ALPHA_MIN);
                }
            }
            *slot.tensor = slot.tensor.with_data(data)?;
        }
        Ok(())
    }
}

fn hflip_sample(data: &mut [f64], shape: &[usize]) {
    if shape.len() != 3 {
        return;
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for row in 0..h {
            let base = (ch * h + row) * w;
            data[base..base + w].reverse();
        }
    }
}

fn crop_sample(data: &mut [f64], shape: &[usize], pad: usize, dy: usize, dx: usize) {
    if shape.len() != 3 || pad == 0 {
        return;
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                padded[(ch * ph + row + pad) * pw + col + pad] = data[(ch * h + row) * w + col];
            }
        }
    }
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                data[(ch * h + row) * w + col] = padded[(ch * ph + row + dy) * pw + col + dx];
            }
        }
    }
}

struct EpochStats {
    loss: f64,
    accuracy: f64,
}

/// One epoch of SGD over the dataset: shuffle, batch, augment, forward,
/// backward, update. Partial trailing batches are skipped so batch
/// statistics stay uniform.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: Mode,
    lr: f64,
    seed: u64,
    round: u64,
    epoch: u64,
    sgd: &mut Sgd,
) -> Result<EpochStats> {
    if cfg.batch_size > ds.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.len()
        )));
    }
    let mut shuffle_rng = stream(seed, StreamTag::Shuffle, round, epoch);
    let mut aug_rng = stream(seed, StreamTag::Augment, round, epoch);
    let mut mix_rng = stream(seed, StreamTag::Mixup, round, epoch);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut shuffle_rng);

    let shape = ds.sample_shape().to_vec();
    let per: usize = shape.iter().product();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut batches = 0usize;

    for chunk in order.chunks_exact(cfg.batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * per);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut sample = ds.sample_data(i).to_vec();
            if cfg.hflip && aug_rng.random::<bool>() {
                hflip_sample(&mut sample, &shape);
            }
            if cfg.crop_padding > 0 {
                let dy = aug_rng.random_range(0..=2 * cfg.crop_padding);
                let dx = aug_rng.random_range(0..=2 * cfg.crop_padding);
                crop_sample(&mut sample, &shape, cfg.crop_padding, dy, dx);
            }
            data.extend_from_slice(&sample);
            labels.push(ds.labels()[i]);
        }
        let mut batch_shape = vec![chunk.len()];
        batch_shape.extend_from_slice(&shape);
        let inputs = Tensor::new(&batch_shape, &data)?;

        let (loss, logits, acc_labels) = if cfg.mixup {
            let mixed = mixup_batch(&inputs, &labels, cfg.mixup_alpha, &mut mix_rng)?;
            let logits = model.forward(&mixed.inputs, mode, Phase::Train)?;
            let la = Tensor::cross_entropy(&logits, &mixed.labels_a)?;
            let lb = Tensor::cross_entropy(&logits, &mixed.labels_b)?;
            let loss = la.scale(mixed.lam).add(&lb.scale(1.0 - mixed.lam))?;
            (loss, logits, mixed.labels_a)
        } else {
            let logits = model.forward(&inputs, mode, Phase::Train)?;
            let loss = Tensor::cross_entropy(&logits, &labels)?;
            (loss, logits, labels)
        };

        model.zero_grads();
        loss.backward()?;
        sgd.step(model, lr)?;

        loss_sum += loss.item()?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&acc_labels)
            .filter(|(p, l)| p == l)
            .count();
        seen += chunk.len();
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Config("dataset yields no full batch".into()));
    }
    Ok(EpochStats {
        loss: loss_sum / batches as f64,
        accuracy: correct as f64 / seen as f64,
    })
}

/// Mean loss and top-1 accuracy over a whole split (no gradients, eval
/// phase).
pub fn evaluate_split(model: &Model, ds: &Dataset, mode: Mode) -> Result<(f64, f64)> {
    let chunk = 256.min(ds.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut weighted = 0.0;
    for part in indices.chunks(chunk) {
        let (inputs, labels) = ds.batch(part)?;
        let logits = model.forward(&inputs, mode, Phase::Eval)?;
        let loss = Tensor::cross_entropy(&logits, &labels)?.item()?;
        loss_sum += loss * part.len() as f64;
        weighted += part.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((loss_sum / weighted, correct as f64 / ds.len() as f64))
}

/// Quantization-aware pretraining at a uniform static precision. Emits
/// one metrics row at initialization plus one per epoch.
pub fn pretrain(
    model: &mut Model,
    ds: &Dataset,
    static_bits: u32,
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    cfg.validate()?;
    model.set_static_bits(static_bits)?;
    train_loop(model, ds, cfg, Mode::Quantized, seed, 0, cfg.lr_max, cfg.warmup_epochs, sink)
}

/// Plain full-precision training with the same loop and schedule; the
/// reference the quantized models are compared against.
pub fn train_full_precision(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    cfg.validate()?;
    train_loop(model, ds, cfg, Mode::FullPrecision, seed, 0, cfg.lr_max, cfg.warmup_epochs, sink)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
    round: u64,
    lr_max: f64,
    warmup: usize,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    let (loss0, acc0) = evaluate_split(model, ds, mode)?;
    let mut row = MetricsRow::new(PhaseTag::Pretrain, round, 0);
    row.objective = loss0;
    row.accuracy = acc0;
    sink.metrics_row(&row)?;

    let mut sgd = Sgd::new(cfg.momentum);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, warmup as f64, lr_max);
        let stats = run_epoch(model, ds, cfg, mode, lr, seed, round, epoch as u64, &mut sgd)?;
        let mut row = MetricsRow::new(PhaseTag::Pretrain, round, epoch as u64 + 1);
        row.objective = stats.loss;
        row.accuracy = stats.accuracy;
        sink.metrics_row(&row)?;
    }
    Ok(())
}

/// Gradient-based QAT session: installs the bit allocation extracted from
/// `v` (kept fixed) and adapts weights and clipping scales for
/// `gb_epochs` epochs under a restarted cosine schedule at a tenth of the
/// pretraining peak rate.
#[allow(clippy::too_many_arguments)]
pub fn gradient_based_session(
    model: &mut Model,
    train_ds: &Dataset,
    v: &LogPrecisionVector,
    gb_epochs: usize,
    cfg: &TrainConfig,
    constraints: &ConstraintSet,
    seed: u64,
    round: u64,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    let (r_w, r_x) = v.extract_bits();
    model.set_bit_allocation(&r_w, &r_x)?;
    let h1 = crate::bitalloc::model_size_mb(&r_w, constraints.counts())?;
    let h2 = crate::bitalloc::mean_activation_log(v.act_part());

    let mut sgd = Sgd::new(cfg.momentum);
    let lr_max = cfg.lr_max * SESSION_LR_SCALE;
    for epoch in 0..gb_epochs {
        let lr = cosine_lr(epoch as f64, gb_epochs as f64, 0.0, lr_max);
        let stats = run_epoch(
            model,
            train_ds,
            cfg,
            Mode::Quantized,
            lr,
            seed,
            round,
            epoch as u64,
            &mut sgd,
        )?;
        let mut row = MetricsRow::new(PhaseTag::GbEpoch, round, epoch as u64);
        row.objective = stats.loss;
        row.accuracy = stats.accuracy;
        row.h1_mb = h1;
        row.h2 = h2;
        sink.metrics_row(&row)?;
    }
    Ok(())
}

/// Result of a gradient-free session: the best candidate found.
pub struct SessionBest {
    pub v: LogPrecisionVector,
    pub eval: CandidateEval,
}

/// Gradient-free bit-allocation session. A fresh CMA-ES state is centered
/// at the clamped handover point; each step spends `evals_per_step`
/// objective evaluations (whole generations) on the moving super-batch,
/// with queue advancement between evaluations (or per generation in
/// frozen-snapshot mode). Weights are never touched and no backward pass
/// runs.
#[allow(clippy::too_many_arguments)]
pub fn gradient_free_session(
    model: &mut Model,
    v0: &LogPrecisionVector,
    alt: &AlternationConfig,
    constraints: &ConstraintSet,
    train_ds: &Rc<Dataset>,
    seed: u64,
    round: u64,
    sink: &mut dyn MetricsSink,
) -> Result<SessionBest> {
    let l = model.searchable_len();
    let d = 2 * l;
    let v0c = v0.clamp();
    let mut sb = superbatch_init(
        Rc::clone(train_ds),
        alt.superbatch.n_minibatches,
        alt.superbatch.batch_size,
        alt.superbatch.policy,
        seed,
        round,
    )?;

    // The handover point itself is evaluated first, so the session best
    // can never be worse than the incoming allocation (on this session's
    // estimator).
    let baseline = evaluate_candidate(&v0c, model, &sb.snapshot(), constraints)?;
    sb.notify_evaluation();
    sink.candidate(round, 1, 0, &baseline)?;
    let mut best = SessionBest {
        v: v0c.clone(),
        eval: baseline,
    };

    let mut cma = cma_init(
        d,
        &v0c.v,
        alt.sigma0,
        None,
        stream_seed(seed, StreamTag::CmaSampling, round, 0),
    )?;
    let lambda = cma.params.lambda as u32;
    if alt.evals_per_step < lambda {
        return Err(Error::Usage(format!(
            "evals_per_step {} below the population size {lambda}",
            alt.evals_per_step
        )));
    }

    let mut eval_counter: u64 = 1;
    for step in 1..=alt.gf_steps {
        let mut used: u32 = if step == 1 { 1 } else { 0 };
        while used + lambda <= alt.evals_per_step {
            run_generation(
                &mut cma,
                model,
                &mut sb,
                constraints,
                alt.superbatch.frozen_snapshot,
                round,
                step as u64,
                &mut eval_counter,
                &mut best,
                sink,
            )?;
            used += lambda;
        }
        sb.notify_step();
        let mut row = MetricsRow::new(PhaseTag::GfStep, round, step as u64);
        row.objective = best.eval.objective;
        row.h1_mb = best.eval.h1_mb;
        row.h2 = best.eval.h2;
        row.sigma = cma.sigma;
        sink.metrics_row(&row)?;
    }
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn run_generation(
    cma: &mut CmaState,
    model: &mut Model,
    sb: &mut SuperBatch,
    constraints: &ConstraintSet,
    frozen_snapshot: bool,
    round: u64,
    step: u64,
    eval_counter: &mut u64,
    best: &mut SessionBest,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    let candidates: Vec<Vec<f64>> = cma
        .ask()
        .into_iter()
        .map(|c| LogPrecisionVector::new(c).clamp().v)
        .collect();
    let frozen: Option<Snapshot> = frozen_snapshot.then(|| sb.snapshot());
    let mut f_values = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let v = LogPrecisionVector::new(cand.clone());
        let snap = frozen.clone().unwrap_or_else(|| sb.snapshot());
        let eval = evaluate_candidate(&v, model, &snap, constraints)?;
        if !frozen_snapshot {
            sb.notify_evaluation();
        }
        sink.candidate(round, step, *eval_counter, &eval)?;
        *eval_counter += 1;
        if eval.objective < best.eval.objective {
            *best = SessionBest { v, eval: eval.clone() };
        }
        f_values.push(eval.objective);
    }
    if frozen_snapshot {
        for _ in 0..candidates.len() {
            sb.notify_evaluation();
        }
    }
    if f_values.iter().all(|f| f.is_nan()) {
        return Err(Error::Value(format!(
            "all objective values NaN in round {round} step {step}"
        )));
    }
    cma.tell(&candidates, &f_values)?;
    Ok(())
}

/// Global best across rounds: weights, allocation, and its objective on
/// the fixed validation super-batch.
#[derive(Clone)]
pub struct GlobalBest {
    pub state: ModelState,
    pub v: LogPrecisionVector,
    pub objective: f64,
}

pub struct AlternateOutcome {
    pub best: GlobalBest,
    pub rounds_run: u32,
}

/// Iterative alternating retraining.
///
/// Each round: restart CMA-ES at the global-best allocation with the
/// global-best weights loaded (best-handover), search, adopt the session
/// best, then retrain the weights for it. The global best is selected by
/// the penalty objective on a validation super-batch drawn once from
/// held-out data and never advanced. `start_round` > 0 resumes after that
/// many completed rounds with `resume_best` carrying the stored best.
#[allow(clippy::too_many_arguments)]
pub fn alternate(
    model: &mut Model,
    train_ds: &Rc<Dataset>,
    test_ds: &Rc<Dataset>,
    train_cfg: &TrainConfig,
    alt: &AlternationConfig,
    constraints: &ConstraintSet,
    seed: u64,
    sink: &mut dyn MetricsSink,
    start_round: u32,
    resume_best: Option<GlobalBest>,
    mut round_hook: impl FnMut(u32, &mut Model, &GlobalBest) -> Result<()>,
) -> Result<AlternateOutcome> {
    train_cfg.validate()?;
    let val_snapshot = validation_snapshot(test_ds, alt, seed)?;

    let mut global_best = match resume_best {
        Some(b) => b,
        None => {
            let v_s = constraints.v_static.clone();
            let eval = evaluate_candidate(&v_s, model, &val_snapshot, constraints)?;
            let mut row = MetricsRow::new(PhaseTag::Eval, 0, 0);
            row.objective = eval.objective;
            row.h1_mb = eval.h1_mb;
            row.h2 = eval.h2;
            sink.metrics_row(&row)?;
            GlobalBest {
                state: model.clone_state(),
                v: v_s,
                objective: eval.objective,
            }
        }
    };

    for round in (start_round + 1)..=alt.rounds {
        // Handover: best weights and best allocation enter the session.
        model.load_state(&global_best.state)?;
        let session = gradient_free_session(
            model,
            &global_best.v,
            alt,
            constraints,
            train_ds,
            seed,
            round as u64,
            sink,
        )?;
        let v_round = session.v;

        // Weights are still the global-best ones here; score the new
        // allocation on the validation set.
        let eval_gf = evaluate_candidate(&v_round, model, &val_snapshot, constraints)?;
        emit_eval_row(sink, round as u64, 0, &eval_gf)?;
        if eval_gf.objective < global_best.objective {
            global_best = GlobalBest {
                state: model.clone_state(),
                v: v_round.clone(),
                objective: eval_gf.objective,
            };
        }

        gradient_based_session(
            model,
            train_ds,
            &v_round,
            alt.gb_epochs,
            train_cfg,
            constraints,
            seed,
            round as u64,
            sink,
        )?;
        let eval_gb = evaluate_candidate(&v_round, model, &val_snapshot, constraints)?;
        emit_eval_row(sink, round as u64, 1, &eval_gb)?;
        if eval_gb.objective < global_best.objective {
            global_best = GlobalBest {
                state: model.clone_state(),
                v: v_round.clone(),
                objective: eval_gb.objective,
            };
        }

        round_hook(round, model, &global_best)?;
    }

    // The returned model is the global best, not the last iterate.
    model.load_state(&global_best.state)?;
    let (r_w, r_x) = global_best.v.extract_bits();
    model.set_bit_allocation(&r_w, &r_x)?;
    Ok(AlternateOutcome {
        best: global_best,
        rounds_run: alt.rounds - start_round,
    })
}

fn emit_eval_row(
    sink: &mut dyn MetricsSink,
    round: u64,
    index: u64,
    eval: &CandidateEval,
) -> Result<()> {
    let mut row = MetricsRow::new(PhaseTag::Eval, round, index);
    row.objective = eval.objective;
    row.h1_mb = eval.h1_mb;
    row.h2 = eval.h2;
    sink.metrics_row(&row)?;
    Ok(())
}

/// Fixed validation super-batch: drawn once from held-out data with a
/// dedicated stream, never advanced.
fn validation_snapshot(
    test_ds: &Rc<Dataset>,
    alt: &AlternationConfig,
    seed: u64,
) -> Result<Snapshot> {
    let bs = alt.superbatch.batch_size.min(test_ds.len());
    let val_seed = stream_seed(seed, StreamTag::ValidationBatch, 0, 0);
    let sb = superbatch_init(
        Rc::clone(test_ds),
        alt.superbatch.n_minibatches,
        bs,
        Policy::Nr,
        val_seed,
        0,
    )?;
    Ok(sb.snapshot())
}

#[cfg(test)]
mod tests;
