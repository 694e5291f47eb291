//! Covariance matrix adaptation evolution strategy.
//!
//! A population of candidates is drawn from `m + sigma * N(0, C)`,
//! evaluated, and ranked; the mean, two evolution paths, the covariance
//! (rank-1 plus rank-mu updates), and the step size are then adapted from
//! the ranked sample. Only objective *rankings* enter the updates, so the
//! optimizer is invariant to strictly increasing transformations of the
//! objective.
//!
//! Hyperparameters follow the standard published defaults. The stall
//! (Heaviside) correction on the covariance evolution path is deliberately
//! not applied; the plain path update is used.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Relative floor applied to covariance eigenvalues after each update.
const EIGEN_FLOOR: f64 = 1e-14;
/// An improvement smaller than this over [`STAGNATION_WINDOW`] generations
/// stops the optimization loop.
const STAGNATION_TOL: f64 = 1e-12;
const STAGNATION_WINDOW: usize = 20;
/// Step-size underflow guard for the optimization loop.
const SIGMA_FLOOR: f64 = 1e-16;

/// Strategy hyperparameters, fixed at initialization.
#[derive(Debug, Clone)]
pub struct CmaParams {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    /// Positive recombination weights, descending, summing to 1.
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_m: f64,
    pub c_c: f64,
    pub c_sigma: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub d_sigma: f64,
    /// Expected norm of a standard normal vector in `dim` dimensions.
    pub chi_n: f64,
}

impl CmaParams {
    /// Standard defaults for dimension `d`, optionally overriding the
    /// population size.
    pub fn defaults(d: usize, lambda: Option<usize>) -> Result<CmaParams> {
        if d < 1 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        let n = d as f64;
        let lambda = match lambda {
            Some(l) if l >= 2 => l,
            Some(l) => {
                return Err(Error::Domain(format!("population size {l} too small")));
            }
            None => 4 + (3.0 * n.ln()).floor() as usize,
        };
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu =
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Ok(CmaParams {
            dim: d,
            lambda,
            mu,
            weights,
            mu_eff,
            c_m: 1.0,
            c_c,
            c_sigma,
            c_1,
            c_mu,
            d_sigma,
            chi_n,
        })
    }
}

/// Full optimizer state. Mutated by [`CmaState::ask`] (RNG advance) and
/// [`CmaState::tell`] (distribution update).
pub struct CmaState {
    pub params: CmaParams,
    pub(crate) mean: DVector<f64>,
    pub(crate) cov: DMatrix<f64>,
    pub sigma: f64,
    pub(crate) p_c: DVector<f64>,
    pub(crate) p_sigma: DVector<f64>,
    pub generation: u64,
    pub evaluations: u64,
    best: Option<(Vec<f64>, f64)>,
    rng: ChaCha8Rng,
    /// Eigenvectors and sqrt-eigenvalues of `cov`, kept in lockstep with
    /// it (refreshed once per tell).
    eigen_b: DMatrix<f64>,
    eigen_d: DVector<f64>,
}

/// Stable ranking of objective values: ascending, ties by candidate
/// index, NaN values last and flagged.
#[derive(Debug, Clone)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub nan_flags: Vec<bool>,
}

/// One per-generation history record.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRecord {
    pub generation: u64,
    pub best_f: f64,
    pub mean_f: f64,
    pub sigma: f64,
    pub axis_ratio: f64,
}

/// Result of an optimization run.
#[derive(Debug, Clone)]
pub struct CmaOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: u64,
}

/// Fresh state: identity covariance, zero evolution paths, default
/// hyperparameters.
pub fn cma_init(
    d: usize,
    m0: &[f64],
    sigma0: f64,
    lambda: Option<usize>,
    seed: u64,
) -> Result<CmaState> {
    if sigma0 <= 0.0 || !sigma0.is_finite() {
        return Err(Error::Domain(format!(
            "sigma0 must be positive, got {sigma0}"
        )));
    }
    if m0.len() != d {
        return Err(Error::Shape(format!(
            "initial mean has length {}, dimension is {d}",
            m0.len()
        )));
    }
    let params = CmaParams::defaults(d, lambda)?;
    Ok(CmaState {
        params,
        mean: DVector::from_column_slice(m0),
        cov: DMatrix::identity(d, d),
        sigma: sigma0,
        p_c: DVector::zeros(d),
        p_sigma: DVector::zeros(d),
        generation: 0,
        evaluations: 0,
        best: None,
        rng: ChaCha8Rng::seed_from_u64(seed),
        eigen_b: DMatrix::identity(d, d),
        eigen_d: DVector::from_element(d, 1.0),
    })
}

/// Fresh state for a restart: same hyperparameters as `template`, new
/// center and seed, no carried-over best. The caller keeps its own record
/// of the best-so-far across restarts.
pub fn restart(template: &CmaState, m0: &[f64], sigma0: f64, seed: u64) -> Result<CmaState> {
    cma_init(
        template.params.dim,
        m0,
        sigma0,
        Some(template.params.lambda),
        seed,
    )
}

/// Stable rank of objective values for minimization.
pub fn rank(f_values: &[f64]) -> Ranking {
    let nan_flags: Vec<bool> = f_values.iter().map(|f| f.is_nan()).collect();
    let mut order: Vec<usize> = (0..f_values.len()).collect();
    order.sort_by(|&a, &b| match (nan_flags[a], nan_flags[b]) {
        (true, true) => a.cmp(&b),
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        (false, false) => f_values[a]
            .partial_cmp(&f_values[b])
            .unwrap()
            .then(a.cmp(&b)),
    });
    Ranking { order, nan_flags }
}

impl CmaState {
    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    pub fn axis_ratio(&self) -> f64 {
        let max = self.eigen_d.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.eigen_d.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }

    /// Draws the next generation: `x_k = m + sigma * B * D * z_k` with
    /// `z_k` i.i.d. standard normal. Deterministic given the state.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let d = self.params.dim;
        // B * diag(D): eigenvector columns scaled by sqrt-eigenvalues.
        let bd = {
            let mut m = self.eigen_b.clone();
            for (j, s) in self.eigen_d.iter().enumerate() {
                for i in 0..d {
                    m[(i, j)] *= s;
                }
            }
            m
        };
        (0..self.params.lambda)
            .map(|_| {
                let z = DVector::from_iterator(
                    d,
                    (0..d).map(|_| StandardNormal.sample(&mut self.rng)),
                );
                let x = &self.mean + self.sigma * (&bd * z);
                x.iter().copied().collect()
            })
            .collect()
    }

    /// Distribution update from one evaluated generation. Candidates are
    /// passed in ask order together with their objective values; the
    /// stable [`rank`] is applied internally.
    ///
    /// Applies, in order: the mean update, the covariance evolution path,
    /// the rank-mu and rank-1 matrices, the covariance update, the
    /// step-size evolution path (using the previous covariance's inverse
    /// square root), and the step-size update. The covariance is then
    /// symmetrized and its eigenvalues floored at `1e-14 * max_eig`.
    pub fn tell(&mut self, candidates: &[Vec<f64>], f_values: &[f64]) -> Result<()> {
        let p = self.params.clone();
        if candidates.len() != p.lambda || f_values.len() != p.lambda {
            return Err(Error::Usage(format!(
                "tell needs exactly lambda={} candidates, got {}",
                p.lambda,
                candidates.len()
            )));
        }
        if let Some(bad) = candidates.iter().find(|c| c.len() != p.dim) {
            return Err(Error::Shape(format!(
                "candidate length {} != dimension {}",
                bad.len(),
                p.dim
            )));
        }
        let ranking = rank(f_values);
        let sigma_old = self.sigma;
        let mean_old = self.mean.clone();

        // Mean update over the top-mu ranked candidates.
        let mut shift = DVector::zeros(p.dim);
        for (i, &w) in p.weights.iter().enumerate() {
            let x = DVector::from_column_slice(&candidates[ranking.order[i]]);
            shift += w * (x - &mean_old);
        }
        self.mean = &mean_old + p.c_m * &shift;

        // Normalized mean displacement feeds both evolution paths.
        let y_step = (&self.mean - &mean_old) / sigma_old;

        // Covariance evolution path (no stall correction).
        let cc_norm = (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt();
        self.p_c = (1.0 - p.c_c) * &self.p_c + cc_norm * &y_step;

        // Rank-mu matrix from per-candidate normalized steps. Weights
        // beyond mu are zero, so the sum stops at mu.
        let mut c_mu_mat = DMatrix::zeros(p.dim, p.dim);
        for (i, &w) in p.weights.iter().enumerate() {
            let x = DVector::from_column_slice(&candidates[ranking.order[i]]);
            let y = (x - &mean_old) / sigma_old;
            c_mu_mat += w * (&y * y.transpose());
        }
        let c_1_mat = &self.p_c * self.p_c.transpose();

        // c_old = 1 - c_1 - c_mu * sum(w), and sum(w) = 1.
        let c_old = 1.0 - p.c_1 - p.c_mu;
        self.cov = c_old * &self.cov + p.c_1 * c_1_mat + p.c_mu * c_mu_mat;

        // Step-size path uses the inverse square root of the previous
        // covariance, available from the cached factorization.
        let inv_sqrt = {
            let mut m = self.eigen_b.clone();
            for (j, s) in self.eigen_d.iter().enumerate() {
                for i in 0..p.dim {
                    m[(i, j)] /= s;
                }
            }
            m * self.eigen_b.transpose()
        };
        let cs_norm = (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        self.p_sigma = (1.0 - p.c_sigma) * &self.p_sigma + cs_norm * (inv_sqrt * &y_step);

        self.sigma =
            sigma_old * ((p.c_sigma / p.d_sigma) * (self.p_sigma.norm() / p.chi_n - 1.0)).exp();

        self.refresh_eigen()?;

        self.generation += 1;
        self.evaluations += p.lambda as u64;
        for (x, &f) in candidates.iter().zip(f_values) {
            if f.is_nan() {
                continue;
            }
            if self.best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                self.best = Some((x.clone(), f));
            }
        }
        Ok(())
    }

    /// Symmetrizes the covariance, floors its eigenvalues, and refreshes
    /// the cached factorization used by `ask`.
    pub(crate) fn refresh_eigen(&mut self) -> Result<()> {
        let d = self.params.dim;
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        if !max_eig.is_finite() || max_eig <= 0.0 {
            return Err(Error::Internal(format!(
                "covariance degenerated (max eigenvalue {max_eig})"
            )));
        }
        let floor = EIGEN_FLOOR * max_eig;
        let clamped = eig.eigenvalues.map(|v| v.max(floor));
        // Reconstruct C = B diag(clamped) B^T so matrix and cache agree.
        let mut scaled = eig.eigenvectors.clone();
        for (j, v) in clamped.iter().enumerate() {
            for i in 0..d {
                scaled[(i, j)] *= v;
            }
        }
        let rebuilt = &scaled * eig.eigenvectors.transpose();
        self.cov = (&rebuilt + rebuilt.transpose()) * 0.5;
        self.eigen_b = eig.eigenvectors;
        self.eigen_d = clamped.map(f64::sqrt);
        Ok(())
    }
}

/// Full minimization loop: ask, clamp to bounds, evaluate, tell. Stops on
/// budget exhaustion, stagnation of the best value (< 1e-12 improvement
/// over 20 generations), or step-size underflow (< 1e-16). `bounds` is a
/// per-coordinate box applied by clamping sampled candidates.
pub fn cma_optimize<F>(
    mut objective: F,
    d: usize,
    m0: &[f64],
    sigma0: f64,
    budget: u64,
    bounds: Option<(f64, f64)>,
    seed: u64,
) -> Result<CmaOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut state = cma_init(d, m0, sigma0, None, seed)?;
    if budget < state.params.lambda as u64 {
        return Err(Error::Usage(format!(
            "budget {budget} below one generation (lambda={})",
            state.params.lambda
        )));
    }
    let mut history = Vec::new();
    let mut best_trace: Vec<f64> = Vec::new();
    while state.evaluations + state.params.lambda as u64 <= budget {
        let mut candidates = state.ask();
        if let Some((lo, hi)) = bounds {
            for c in candidates.iter_mut() {
                for v in c.iter_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
        }
        let f_values: Vec<f64> = candidates.iter().map(|c| objective(c)).collect();
        if f_values.iter().all(|f| f.is_nan()) {
            return Err(Error::Value(format!(
                "all {} objective values NaN at generation {}",
                f_values.len(),
                state.generation
            )));
        }
        let finite: Vec<f64> = f_values.iter().copied().filter(|f| !f.is_nan()).collect();
        let gen_best = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let gen_mean = finite.iter().sum::<f64>() / finite.len() as f64;
        state.tell(&candidates, &f_values)?;
        history.push(GenerationRecord {
            generation: state.generation,
            best_f: gen_best,
            mean_f: gen_mean,
            sigma: state.sigma,
            axis_ratio: state.axis_ratio(),
        });
        let best_f = state.best().map(|(_, f)| f).unwrap_or(f64::INFINITY);
        best_trace.push(best_f);
        if state.sigma < SIGMA_FLOOR {
            break;
        }
        let g = best_trace.len();
        if g > STAGNATION_WINDOW
            && best_trace[g - 1 - STAGNATION_WINDOW] - best_trace[g - 1] < STAGNATION_TOL
        {
            break;
        }
    }
    let (best_x, best_f) = state
        .best()
        .map(|(x, f)| (x.to_vec(), f))
        .ok_or_else(|| Error::Internal("no evaluations performed".into()))?;
    Ok(CmaOutcome {
        best_x,
        best_f,
        history,
        evaluations: state.evaluations,
    })
}
