//! The bit-allocation search problem: log-precision encoding, bit
//! extraction, model-size and mean-precision constraints, the penalty
//! objective, and candidate evaluation against a frozen model over a
//! super-batch snapshot.
//!
//! The search variable is `v = [v_W, v_X]`, the base-2 logarithms of the
//! per-layer weight and activation bit widths of the searchable layers,
//! clamped coordinatewise to `[0, 3]`. Bits are recovered as `ceil(2^v)`,
//! with weight entries floored at 2 (signed quantization is degenerate
//! below that).


use crate::error::{Error, Result};
use crate::network::{LayerParamCount, Mode, Model, Phase, PINNED_BITS};
use crate::superbatch::Snapshot;
use crate::tensor::Tensor;

/// Coordinate bounds of the search box.
pub const V_LO: f64 = 0.0;
pub const V_HI: f64 = 3.0;
/// Minimum weight bit width after extraction.
pub const WEIGHT_BIT_FLOOR: u32 = 2;

/// The CMA-ES search variable: log2 bit widths, weights first then
/// activations, one entry per searchable layer each.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPrecisionVector {
    pub v: Vec<f64>,
}

impl LogPrecisionVector {
    pub fn new(v: Vec<f64>) -> LogPrecisionVector {
        LogPrecisionVector { v }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Weight half (first L coordinates).
    pub fn weight_part(&self) -> &[f64] {
        &self.v[..self.v.len() / 2]
    }

    /// Activation half (last L coordinates).
    pub fn act_part(&self) -> &[f64] {
        &self.v[self.v.len() / 2..]
    }

    /// Coordinatewise clamp into the `[0, 3]` box.
    pub fn clamp(&self) -> LogPrecisionVector {
        LogPrecisionVector {
            v: self.v.iter().map(|x| x.clamp(V_LO, V_HI)).collect(),
        }
    }

    /// Recovers integer bit widths `r = ceil(2^v)`, split into the weight
    /// and activation halves. Weight entries are floored at 2. Exact
    /// powers (within 1e-9 of an integer) round to that integer, so
    /// `extract . encode` is the identity on integer bit vectors.
    pub fn extract_bits(&self) -> (Vec<u32>, Vec<u32>) {
        let raw = |x: &f64| -> u32 {
            let p = x.exp2();
            let snapped = p.round();
            let r = if (p - snapped).abs() < 1e-9 {
                snapped
            } else {
                p.ceil()
            };
            r.max(1.0) as u32
        };
        let r_w = self
            .weight_part()
            .iter()
            .map(|x| raw(x).max(WEIGHT_BIT_FLOOR))
            .collect();
        let r_x = self.act_part().iter().map(raw).collect();
        (r_w, r_x)
    }
}

/// Builds the log-precision vector from integer bit allocations, weights
/// first.
pub fn encode_log_precision(r_w: &[u32], r_x: &[u32]) -> Result<LogPrecisionVector> {
    if let Some(&bad) = r_w.iter().chain(r_x).find(|&&b| b < 1) {
        return Err(Error::Domain(format!("bit width {bad} below 1")));
    }
    let v = r_w
        .iter()
        .chain(r_x)
        .map(|&b| (b as f64).log2())
        .collect();
    Ok(LogPrecisionVector { v })
}

/// Deployable model size in megabytes: searchable layers at their
/// extracted bit widths plus pinned layers at 8 bits, over all weight
/// parameters (biases excluded).
pub fn model_size_mb(r_w: &[u32], counts: &[LayerParamCount]) -> Result<f64> {
    let searchable = counts.iter().filter(|c| !c.pinned).count();
    if searchable != r_w.len() {
        return Err(Error::Shape(format!(
            "{} searchable layers but {} weight-bit entries",
            searchable,
            r_w.len()
        )));
    }
    let mut bits_total = 0u64;
    let mut it = r_w.iter();
    for c in counts {
        let b = if c.pinned {
            PINNED_BITS
        } else {
            *it.next().unwrap()
        };
        bits_total += c.weights as u64 * b as u64;
    }
    Ok(bits_total as f64 / (8.0 * 1e6))
}

/// Mean of the activation log-precision coordinates (the literal
/// constraint: a bound on the mean of `v_X`, i.e. the geometric mean of
/// the activation bit widths).
pub fn mean_activation_log(v_x: &[f64]) -> f64 {
    v_x.iter().sum::<f64>() / v_x.len() as f64
}

/// Penalty-method objective: `mean_loss + sum_j rho_j * max(0, h_j - c_j)^2`.
pub fn penalty_objective(mean_loss: f64, h: &[f64], c: &[f64], rho: &[f64]) -> f64 {
    debug_assert!(h.len() == c.len() && c.len() == rho.len());
    mean_loss
        + h.iter()
            .zip(c)
            .zip(rho)
            .map(|((h, c), rho)| rho * (h - c).max(0.0).powi(2))
            .sum::<f64>()
}

/// Coordinatewise clamp into `[0, 3]`.
pub fn clamp_search_space(v: &LogPrecisionVector) -> LogPrecisionVector {
    v.clamp()
}

/// Units in which constraint violations enter the penalty term.
///
/// `RelativeToTarget` divides each violation by its target `C_j` before
/// squaring, making the default penalty weights bite identically at any
/// model scale (a raw megabyte violation on a kilobyte-sized desk model
/// would otherwise vanish). `Absolute` uses the raw units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyNormalization {
    RelativeToTarget,
    Absolute,
}

/// The two shipped constraints (model size, mean activation
/// log-precision) with their targets and penalty weights.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub beta: [f64; 2],
    pub rho: [f64; 2],
    /// Model-size target in megabytes: `beta1 * MB(v_S weights)`.
    pub c1_mb: f64,
    /// Mean log-precision target: `beta2 * mean(v_S activations)`.
    pub c2: f64,
    pub normalization: PenaltyNormalization,
    /// Static reference allocation the targets are measured against.
    pub v_static: LogPrecisionVector,
    counts: Vec<LayerParamCount>,
}

impl ConstraintSet {
    /// Targets relative to a static `static_bits` allocation on the given
    /// model layout.
    pub fn new(
        beta: [f64; 2],
        rho: [f64; 2],
        static_bits: u32,
        counts: Vec<LayerParamCount>,
        normalization: PenaltyNormalization,
    ) -> Result<ConstraintSet> {
        if rho.iter().any(|r| *r < 0.0) || beta.iter().any(|b| *b <= 0.0) {
            return Err(Error::Domain("beta must be > 0 and rho >= 0".into()));
        }
        if static_bits < WEIGHT_BIT_FLOOR {
            return Err(Error::Domain(format!(
                "static reference of {static_bits} bits below the weight floor"
            )));
        }
        let l = counts.iter().filter(|c| !c.pinned).count();
        if l == 0 {
            return Err(Error::Config("model has no searchable layers".into()));
        }
        let v_static = encode_log_precision(&vec![static_bits; l], &vec![static_bits; l])?;
        let (r_w, _) = v_static.extract_bits();
        let c1_mb = beta[0] * model_size_mb(&r_w, &counts)?;
        let c2 = beta[1] * mean_activation_log(v_static.act_part());
        Ok(ConstraintSet {
            beta,
            rho,
            c1_mb,
            c2,
            normalization,
            v_static,
            counts,
        })
    }

    pub fn counts(&self) -> &[LayerParamCount] {
        &self.counts
    }

    /// Penalty term for measured constraint values `(h1, h2)`.
    pub fn penalty(&self, h1: f64, h2: f64) -> f64 {
        let (h, c) = match self.normalization {
            PenaltyNormalization::Absolute => ([h1, h2], [self.c1_mb, self.c2]),
            PenaltyNormalization::RelativeToTarget => {
                ([h1 / self.c1_mb, h2 / self.c2], [1.0, 1.0])
            }
        };
        penalty_objective(0.0, &h, &c, &self.rho)
    }
}

/// Outcome of one candidate evaluation.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub v: Vec<f64>,
    pub r_w: Vec<u32>,
    pub r_x: Vec<u32>,
    /// Mean cross-entropy over the super-batch snapshot.
    pub loss: f64,
    /// Model size in megabytes at the extracted bits.
    pub h1_mb: f64,
    /// Mean activation log-precision.
    pub h2: f64,
    pub objective: f64,
}

/// Evaluates one (clamped) candidate against a frozen model: installs the
/// extracted bits, runs every mini-batch in the snapshot forward in
/// quantized mode, and folds the constraint penalties into the mean loss.
/// Bit assignments are left installed; the next candidate overwrites them.
pub fn evaluate_candidate(
    v: &LogPrecisionVector,
    model: &mut Model,
    snapshot: &Snapshot,
    constraints: &ConstraintSet,
) -> Result<CandidateEval> {
    let l = model.searchable_len();
    if v.len() != 2 * l {
        return Err(Error::Shape(format!(
            "candidate has {} coordinates, model needs {}",
            v.len(),
            2 * l
        )));
    }
    let (r_w, r_x) = v.extract_bits();
    model.set_bit_allocation(&r_w, &r_x)?;
    let mut loss_sum = 0.0;
    for i in 0..snapshot.len() {
        let (batch, labels) = snapshot.materialize(i)?;
        let logits = model.forward(&batch, Mode::Quantized, Phase::Eval)?;
        loss_sum += Tensor::cross_entropy(&logits, &labels)?.item()?;
    }
    let loss = loss_sum / snapshot.len() as f64;
    let h1_mb = model_size_mb(&r_w, constraints.counts())?;
    let h2 = mean_activation_log(v.act_part());
    let objective = loss + constraints.penalty(h1_mb, h2);
    Ok(CandidateEval {
        v: v.v.clone(),
        r_w,
        r_x,
        loss,
        h1_mb,
        h2,
        objective,
    })
}
