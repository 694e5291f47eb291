//! The moving super-batch: a FIFO queue of mini-batches reused across
//! objective evaluations to cut sub-sampling variance, with five
//! replacement policies governing when fresh mini-batches enter.
//!
//! Policies: NR never replaces; SB swaps the oldest mini-batch after each
//! objective evaluation; SF refills the whole queue after each
//! evaluation; EB and EF do the same but on gradient-free *step*
//! boundaries instead of per evaluation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::rc::Rc;

/// Replacement policy for the mini-batch queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// No replacement.
    Nr,
    /// One mini-batch per step notification.
    Eb,
    /// Full refill per step notification.
    Ef,
    /// One mini-batch per evaluation notification.
    Sb,
    /// Full refill per evaluation notification.
    Sf,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy> {
        match s.to_ascii_uppercase().as_str() {
            "NR" => Ok(Policy::Nr),
            "EB" => Ok(Policy::Eb),
            "EF" => Ok(Policy::Ef),
            "SB" => Ok(Policy::Sb),
            "SF" => Ok(Policy::Sf),
            other => Err(Error::Config(format!(
                "unknown super-batch policy {other:?} (expected NR/EB/EF/SB/SF)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Nr => "NR",
            Policy::Eb => "EB",
            Policy::Ef => "EF",
            Policy::Sb => "SB",
            Policy::Sf => "SF",
        }
    }
}

/// One resident mini-batch: sample indices into the source dataset.
/// Shared immutably, so snapshots stay valid while the queue advances.
#[derive(Debug)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
}

/// Immutable view of the queue at one instant.
#[derive(Clone)]
pub struct Snapshot {
    batches: Vec<Rc<MiniBatch>>,
    dataset: Rc<Dataset>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batches(&self) -> &[Rc<MiniBatch>] {
        &self.batches
    }

    /// Materializes mini-batch `i` as a batch tensor plus labels.
    pub fn materialize(&self, i: usize) -> Result<(Tensor, Vec<usize>)> {
        self.dataset.batch(&self.batches[i].indices)
    }

    /// Number of mini-batches shared (by identity) with another snapshot.
    pub fn overlap(&self, other: &Snapshot) -> usize {
        self.batches
            .iter()
            .filter(|a| other.batches.iter().any(|b| Rc::ptr_eq(a, b)))
            .count()
    }
}

pub struct SuperBatch {
    queue: VecDeque<Rc<MiniBatch>>,
    dataset: Rc<Dataset>,
    policy: Policy,
    batch_size: usize,
    rng: ChaCha8Rng,
    pub evaluations: u64,
    pub steps: u64,
}

/// Fills a queue of `n_minibatches` mini-batches of `batch_size` samples
/// drawn uniformly without replacement (within each mini-batch) from the
/// dataset. The sampling stream is dedicated: derived from
/// `(seed, round)` and independent of SGD shuffling.
pub fn superbatch_init(
    dataset: Rc<Dataset>,
    n_minibatches: usize,
    batch_size: usize,
    policy: Policy,
    seed: u64,
    round: u64,
) -> Result<SuperBatch> {
    if n_minibatches < 1 {
        return Err(Error::Config("need at least one mini-batch".into()));
    }
    if batch_size < 1 || batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} invalid for dataset of {} samples",
            dataset.len()
        )));
    }
    let mut sb = SuperBatch {
        queue: VecDeque::with_capacity(n_minibatches),
        dataset,
        policy,
        batch_size,
        rng: stream(seed, StreamTag::SuperBatch, round, 0),
        evaluations: 0,
        steps: 0,
    };
    for _ in 0..n_minibatches {
        let fresh = sb.fresh_minibatch();
        sb.queue.push_back(fresh);
    }
    Ok(sb)
}

impl SuperBatch {
    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    fn fresh_minibatch(&mut self) -> Rc<MiniBatch> {
        let indices =
            rand::seq::index::sample(&mut self.rng, self.dataset.len(), self.batch_size).into_vec();
        Rc::new(MiniBatch { indices })
    }

    fn replace_oldest(&mut self) {
        let fresh = self.fresh_minibatch();
        self.queue.pop_front();
        self.queue.push_back(fresh);
    }

    fn replace_all(&mut self) {
        let n = self.queue.len();
        self.queue.clear();
        for _ in 0..n {
            let fresh = self.fresh_minibatch();
            self.queue.push_back(fresh);
        }
    }

    /// Signals that one objective evaluation completed. SB replaces the
    /// oldest mini-batch; SF refills the queue.
    pub fn notify_evaluation(&mut self) {
        self.evaluations += 1;
        match self.policy {
            Policy::Sb => self.replace_oldest(),
            Policy::Sf => self.replace_all(),
            _ => {}
        }
    }

    /// Signals that one gradient-free step completed. EB replaces the
    /// oldest mini-batch; EF refills the queue.
    pub fn notify_step(&mut self) {
        self.steps += 1;
        match self.policy {
            Policy::Eb => self.replace_oldest(),
            Policy::Ef => self.replace_all(),
            _ => {}
        }
    }

    /// Immutable view of the current queue, oldest first. Remains valid
    /// while the queue advances underneath it.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            batches: self.queue.iter().cloned().collect(),
            dataset: Rc::clone(&self.dataset),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_gaussian, Split};

    fn dataset() -> Rc<Dataset> {
        Rc::new(synthetic_gaussian(&[4], 2, 64, 3, Split::Train).unwrap())
    }

    fn init(policy: Policy, n: usize) -> SuperBatch {
        superbatch_init(dataset(), n, 8, policy, 5, 0).unwrap()
    }

    #[test]
    fn resident_sample_count() {
        let sb = init(Policy::Sb, 4);
        let snap = sb.snapshot();
        let total: usize = snap.batches().iter().map(|b| b.indices.len()).sum();
        assert_eq!(total, 32);
        assert_eq!(sb.len(), 4);
    }

    #[test]
    fn minibatch_indices_are_distinct_within_batch() {
        let sb = init(Policy::Nr, 4);
        for b in sb.snapshot().batches() {
            let mut seen = b.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), b.indices.len());
        }
    }

    #[test]
    fn same_seed_same_initial_queue() {
        let a = superbatch_init(dataset(), 4, 8, Policy::Sb, 9, 0).unwrap();
        let b = superbatch_init(dataset(), 4, 8, Policy::Sb, 9, 0).unwrap();
        for (x, y) in a.snapshot().batches().iter().zip(b.snapshot().batches()) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn nr_never_changes() {
        let mut sb = init(Policy::Nr, 4);
        let before = sb.snapshot();
        for _ in 0..100 {
            sb.notify_evaluation();
            sb.notify_step();
        }
        assert_eq!(before.overlap(&sb.snapshot()), 4);
    }

    #[test]
    fn sb_replaces_exactly_one_per_evaluation() {
        let mut sb = init(Policy::Sb, 32);
        for _ in 0..100 {
            let before = sb.snapshot();
            sb.notify_evaluation();
            let after = sb.snapshot();
            assert_eq!(after.len(), 32);
            assert_eq!(before.overlap(&after), 31);
            // FIFO: the evicted one is the oldest; survivors keep order.
            for (i, b) in before.batches()[1..].iter().enumerate() {
                assert!(Rc::ptr_eq(b, &after.batches()[i]));
            }
            sb.notify_step(); // no-op for SB
            assert_eq!(after.overlap(&sb.snapshot()), 32);
        }
    }

    #[test]
    fn ef_and_eb_replace_on_steps_only() {
        let mut eb = init(Policy::Eb, 4);
        let before = eb.snapshot();
        eb.notify_evaluation();
        assert_eq!(before.overlap(&eb.snapshot()), 4);
        eb.notify_step();
        assert_eq!(before.overlap(&eb.snapshot()), 3);

        let mut ef = init(Policy::Ef, 4);
        let before = ef.snapshot();
        ef.notify_evaluation();
        assert_eq!(before.overlap(&ef.snapshot()), 4);
        ef.notify_step();
        assert_eq!(before.overlap(&ef.snapshot()), 0);
    }

    #[test]
    fn sf_refills_on_every_evaluation() {
        let mut sf = init(Policy::Sf, 4);
        let before = sf.snapshot();
        sf.notify_evaluation();
        assert_eq!(before.overlap(&sf.snapshot()), 0);
        assert_eq!(sf.len(), 4);
    }

    #[test]
    fn snapshot_is_immutable_under_advancement() {
        let mut sb = init(Policy::Sb, 4);
        let snap = sb.snapshot();
        let first = Rc::clone(&snap.batches()[0]);
        sb.notify_evaluation();
        assert!(Rc::ptr_eq(&first, &snap.batches()[0]));
        assert_eq!(snap.len(), 4);
        // Two snapshots with no notifications in between are identical.
        let s1 = sb.snapshot();
        let s2 = sb.snapshot();
        assert_eq!(s1.overlap(&s2), 4);
    }

    #[test]
    fn n_equals_one_degenerates() {
        let mut sb = init(Policy::Sb, 1);
        assert_eq!(sb.len(), 1);
        let before = sb.snapshot();
        sb.notify_evaluation();
        assert_eq!(before.overlap(&sb.snapshot()), 0); // n-1 = 0 overlap
        assert_eq!(sb.len(), 1);
    }

    #[test]
    fn batch_size_too_large_rejected() {
        let err = superbatch_init(dataset(), 2, 1000, Policy::Sb, 1, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
