//! Policy loss and high-confidence α-VaR upper bounds.
//!
//! Each posterior reward sample `R` yields one loss for the evaluation
//! policy: the expected value difference `V*_R − V^{π_eval}_R`, either over
//! the start distribution or conditioned on a single start state. Sorting `n`
//! such losses and taking the `k`-th smallest, where `k` is the smallest index
//! with `BinomialCDF(k − 1; n, α) ≥ 1 − δ`, gives a value that exceeds the
//! true α-quantile of the loss distribution with probability at least `1 − δ`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irl::{OptimalSolution, PosteriorSamples};
use crate::mdp::{evaluate_policy, expected_return, feature_expectations, value_iteration, LinearReward, Policy, TabularMdp};

pub const DEFAULT_ALPHA: f64 = 0.95;
pub const DEFAULT_DELTA: f64 = 0.05;

/// Negative losses above `-NEGATIVE_LOSS_TOL` are solver noise and clamp to
/// zero; anything more negative is reported as an internal inconsistency.
pub const NEGATIVE_LOSS_TOL: f64 = 1e-6;

/// `|V*(s)|` at or below this is treated as zero when normalizing.
pub const DEGENERATE_VALUE: f64 = 1e-9;

/// Which per-state loss feeds the VaR bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Evd,
    /// EVD divided by `|V*(s)|`; a fraction of the optimal return.
    NormalizedEvd,
}

/// Applies the clamping rule to one raw loss draw.
pub fn checked_loss(raw: f64) -> Result<f64> {
    if raw.is_nan() {
        return Err(Error::InternalConsistency("NaN policy loss".into()));
    }
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -NEGATIVE_LOSS_TOL {
        Ok(0.0)
    } else {
        Err(Error::InternalConsistency(format!(
            "policy loss {raw:e} is negative beyond solver tolerance"
        )))
    }
}

/// `EVD(π_eval, R) = V^{π*}_R − V^{π_eval}_R` over the start distribution.
pub fn evd(mdp: &TabularMdp, reward: &LinearReward, eval_policy: &Policy, tol: f64) -> Result<f64> {
    let v_star = value_iteration(mdp, reward, tol)?;
    let v_eval = evaluate_policy(mdp, reward, eval_policy, tol)?;
    Ok(expected_return(&v_star, mdp) - expected_return(&v_eval, mdp))
}

/// Per-state EVD for every state at once, sharing both solves.
pub fn state_evds(mdp: &TabularMdp, reward: &LinearReward, eval_policy: &Policy, tol: f64) -> Result<Array1<f64>> {
    let v_star = value_iteration(mdp, reward, tol)?;
    let v_eval = evaluate_policy(mdp, reward, eval_policy, tol)?;
    Ok(v_star.values() - v_eval.values())
}

/// `V^{π*}_R(s) − V^{π_eval}_R(s)`.
pub fn state_evd(mdp: &TabularMdp, reward: &LinearReward, eval_policy: &Policy, state: usize, tol: f64) -> Result<f64> {
    mdp.check_state(state)?;
    Ok(state_evds(mdp, reward, eval_policy, tol)?[state])
}

/// Normalizes one EVD by `|V*(s)|`. A degenerate denominator yields 0 when
/// the EVD itself is within `2·tol` of zero, and `+∞` otherwise.
pub fn normalize_loss(evd: f64, v_star: f64, tol: f64) -> f64 {
    if v_star.abs() <= DEGENERATE_VALUE {
        if evd <= 2.0 * tol {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        evd / v_star.abs()
    }
}

/// EVD at `state` as a fraction of the optimal value there.
pub fn normalized_state_evd(
    mdp: &TabularMdp,
    reward: &LinearReward,
    eval_policy: &Policy,
    state: usize,
    tol: f64,
) -> Result<f64> {
    mdp.check_state(state)?;
    let v_star = value_iteration(mdp, reward, tol)?;
    let v_eval = evaluate_policy(mdp, reward, eval_policy, tol)?;
    let e = v_star.get(state) - v_eval.get(state);
    Ok(normalize_loss(e, v_star.get(state), tol))
}

fn check_levels(alpha: f64, delta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} must lie in (0, 1)")));
    }
    Ok(())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Smallest 1-based `k ≤ n` with `BinomialCDF(k − 1; n, α) ≥ 1 − δ`, or
/// `None` when even the sample maximum does not reach that confidence.
///
/// The CDF is accumulated exactly term by term in log space, so large `n`
/// neither underflows nor relies on a normal approximation.
pub fn order_statistic_index(n: usize, alpha: f64, delta: f64) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let target = (1.0 - delta).ln();
    let log_ratio = alpha.ln() - (1.0 - alpha).ln();
    let mut log_pmf = n as f64 * (1.0 - alpha).ln();
    let mut log_cdf = f64::NEG_INFINITY;
    for i in 0..n {
        log_cdf = log_add_exp(log_cdf, log_pmf);
        if log_cdf >= target {
            return Some(i + 1);
        }
        log_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + log_ratio;
    }
    None
}

/// One α-VaR upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarBound {
    pub bound: f64,
    /// `false` when the sample is too small for the `(α, δ)` order statistic
    /// and the bound falls back to the sample maximum.
    pub sufficient: bool,
}

fn bound_from_sorted(sorted: &[f64], k: Option<usize>) -> VarBound {
    match k {
        Some(k) => VarBound {
            bound: sorted[k - 1],
            sufficient: true,
        },
        None => VarBound {
            bound: *sorted.last().expect("non-empty"),
            sufficient: false,
        },
    }
}

/// Order-statistic `(1 − δ)`-confidence upper bound on the α-quantile of `losses`.
pub fn var_upper_bound(losses: &[f64], alpha: f64, delta: f64) -> Result<VarBound> {
    check_levels(alpha, delta)?;
    if losses.is_empty() {
        return Err(Error::Empty("loss sample"));
    }
    if losses.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("loss sample contains NaN"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(bound_from_sorted(&sorted, order_statistic_index(sorted.len(), alpha, delta)))
}

/// Per-candidate α-VaR bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarReport {
    pub alpha: f64,
    pub delta: f64,
    pub num_samples: usize,
    pub loss: LossKind,
    /// Candidate id → bound.
    pub per_candidate: BTreeMap<usize, f64>,
    /// Candidate id → whether the order statistic existed.
    pub sufficient: BTreeMap<usize, bool>,
}

impl VarReport {
    /// Candidate with the largest bound; lowest id among ties.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&id, &b) in &self.per_candidate {
            if best.is_none_or(|(_, bb)| b > bb) {
                best = Some((id, b));
            }
        }
        best
    }

    pub fn max_bound(&self) -> f64 {
        self.argmax().map_or(0.0, |(_, b)| b)
    }

    pub fn all_insufficient(&self) -> bool {
        self.sufficient.values().all(|&s| !s)
    }

    /// Bounds rescaled to `[0, 1]` by the maximum finite bound (all zeros
    /// when every bound is zero); infinite bounds map to 1.
    pub fn normalized(&self) -> BTreeMap<usize, f64> {
        let max = self
            .per_candidate
            .values()
            .copied()
            .filter(|b| b.is_finite())
            .fold(0.0, f64::max);
        self.per_candidate
            .iter()
            .map(|(&id, &b)| {
                let v = if !b.is_finite() {
                    1.0
                } else if max > 0.0 {
                    (b / max).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (id, v)
            })
            .collect()
    }

    /// Builds a report from a `candidates × samples` loss matrix.
    pub fn from_losses(candidates: &[usize], losses: &Array2<f64>, alpha: f64, delta: f64, loss: LossKind) -> Result<Self> {
        check_levels(alpha, delta)?;
        if candidates.len() != losses.nrows() {
            return Err(Error::invalid("one loss row per candidate is required"));
        }
        let n = losses.ncols();
        if n == 0 {
            return Err(Error::Empty("posterior sample set"));
        }
        let k = order_statistic_index(n, alpha, delta);
        let mut per_candidate = BTreeMap::new();
        let mut sufficient = BTreeMap::new();
        let mut sorted = vec![0.0; n];
        for (row, &c) in losses.rows().into_iter().zip(candidates) {
            sorted.iter_mut().zip(row.iter()).for_each(|(o, &x)| *o = x);
            sorted.sort_by(f64::total_cmp);
            let b = bound_from_sorted(&sorted, k);
            per_candidate.insert(c, b.bound);
            sufficient.insert(c, b.sufficient);
        }
        Ok(Self {
            alpha,
            delta,
            num_samples: n,
            loss,
            per_candidate,
            sufficient,
        })
    }
}

fn solution_for<'a>(
    samples: &'a PosteriorSamples,
    i: usize,
    mdp: &TabularMdp,
    features: &Array2<f64>,
    tol: f64,
    scratch: &'a mut Option<OptimalSolution>,
) -> Result<&'a OptimalSolution> {
    if let Some(sol) = samples.solutions() {
        return Ok(&sol[i]);
    }
    let r = features.dot(&samples.sample(i));
    *scratch = Some(OptimalSolution::solve(mdp, r.as_slice().expect("contiguous"), tol, None)?);
    Ok(scratch.as_ref().expect("just set"))
}

/// Loss matrix (`candidates × samples`) of `eval_policy` under every
/// posterior sample. `V*` comes from each sample's cached solution (solved
/// on demand when absent); `V^{π_eval}` for all samples comes from a single
/// feature-expectation solve, since the reward is linear in the weights.
pub fn state_losses(
    mdp: &TabularMdp,
    samples: &PosteriorSamples,
    features: &Array2<f64>,
    eval_policy: &Policy,
    candidates: &[usize],
    kind: LossKind,
    tol: f64,
) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("posterior sample set"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    for &c in candidates {
        mdp.check_state(c)?;
    }
    if samples.dim() != features.ncols() {
        return Err(Error::invalid("posterior dimension does not match the feature matrix"));
    }
    let mu = feature_expectations(mdp, features, eval_policy, tol)?;
    let n = samples.len();
    let mut losses = Array2::zeros((candidates.len(), n));
    let mut scratch = None;
    for i in 0..n {
        // Rejected proposals repeat the previous state; reuse its column.
        if i > 0 {
            if let Some(sol) = samples.solutions() {
                if std::sync::Arc::ptr_eq(&sol[i], &sol[i - 1]) && samples.sample(i) == samples.sample(i - 1) {
                    let prev = losses.column(i - 1).to_owned();
                    losses.column_mut(i).assign(&prev);
                    continue;
                }
            }
        }
        let w = samples.sample(i);
        let sol = solution_for(samples, i, mdp, features, tol, &mut scratch)?;
        for (row, &c) in candidates.iter().enumerate() {
            let v_star = sol.values.get(c);
            let v_eval = mu.row(c).dot(&w);
            let e = checked_loss(v_star - v_eval)?;
            losses[[row, i]] = match kind {
                LossKind::Evd => e,
                LossKind::NormalizedEvd => normalize_loss(e, v_star, tol),
            };
        }
    }
    Ok(losses)
}

/// α-VaR bound of the per-state policy loss at every candidate state.
#[allow(clippy::too_many_arguments)]
pub fn per_state_var(
    mdp: &TabularMdp,
    samples: &PosteriorSamples,
    features: &Array2<f64>,
    eval_policy: &Policy,
    alpha: f64,
    delta: f64,
    candidates: &[usize],
    kind: LossKind,
    tol: f64,
) -> Result<VarReport> {
    check_levels(alpha, delta)?;
    let losses = state_losses(mdp, samples, features, eval_policy, candidates, kind, tol)?;
    VarReport::from_losses(candidates, &losses, alpha, delta, kind)
}
