//! Finite Markov decision processes with state-only linear rewards, and the
//! exact dynamic-programming solvers every other module builds on.
//!
//! Transitions are stored dense (`state × action × next_state`). A compressed
//! successor list is derived once at construction so that the inner loops of
//! the solvers only touch non-zero entries.
//!
//! All iterative solvers stop on an a-posteriori error bound: with
//! `Δ = ‖V_{k+1} − V_k‖∞`, the returned iterate is within `γ/(1−γ)·Δ` of the
//! true fixed point, and iteration stops once that bound drops below `tol`.
//! This also implies a Bellman residual below `tol`.

mod exact;

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default solver tolerance.
pub use exact::{PolicyIterationSolver, EXACT_STATE_LIMIT};

pub const DEFAULT_TOL: f64 = 1e-8;

/// Safety cap on solver sweeps; hitting it is reported as non-convergence.
pub const MAX_ITERATIONS: usize = 100_000;

const STOCHASTIC_TOL: f64 = 1e-9;

/// A finite MDP without its reward function.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Array3<f64>,
    discount: f64,
    start_dist: Array1<f64>,
    reward_bound: f64,
    // CSR layout over (state, action) rows.
    succ_offsets: Vec<usize>,
    succ_states: Vec<usize>,
    succ_probs: Vec<f64>,
    deterministic: bool,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        discount: f64,
        start_dist: Array1<f64>,
        reward_bound: f64,
    ) -> Result<Self> {
        let (num_states, num_actions, next) = transition.dim();
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        if next != num_states {
            return Err(Error::invalid(format!(
                "transition tensor has {next} next states, expected {num_states}"
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount {discount} outside [0, 1)")));
        }
        if !(reward_bound > 0.0 && reward_bound.is_finite()) {
            return Err(Error::invalid(format!("reward bound {reward_bound} must be positive")));
        }
        validate_distribution(start_dist.as_slice().unwrap_or(&start_dist.to_vec()), num_states)
            .map_err(|e| Error::invalid(format!("start distribution: {e}")))?;

        let mut succ_offsets = Vec::with_capacity(num_states * num_actions + 1);
        let mut succ_states = Vec::new();
        let mut succ_probs = Vec::new();
        succ_offsets.push(0);
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                let mut sum = 0.0;
                for (t, &p) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::invalid(format!(
                            "T({s},{a},{t}) = {p} is not a probability"
                        )));
                    }
                    if p > 0.0 {
                        succ_states.push(t);
                        succ_probs.push(p);
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::invalid(format!(
                        "transition row ({s},{a}) sums to {sum}"
                    )));
                }
                succ_offsets.push(succ_states.len());
            }
        }

        Ok(Self {
            num_states,
            num_actions,
            transition,
            discount,
            start_dist,
            reward_bound,
            succ_offsets,
            succ_states,
            deterministic: succ_probs.iter().all(|&p| p == 1.0),
            succ_probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_dist(&self) -> &Array1<f64> {
        &self.start_dist
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    /// Every `(state, action)` has a single successor.
    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// Non-zero successors of `(state, action)` as `(next_state, probability)`.
    pub fn successors(&self, state: usize, action: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = state * self.num_actions + action;
        let range = self.succ_offsets[row]..self.succ_offsets[row + 1];
        self.succ_states[range.clone()]
            .iter()
            .copied()
            .zip(self.succ_probs[range].iter().copied())
    }

    /// Most likely next state; ties go to the lowest state index.
    pub fn most_likely_next(&self, state: usize, action: usize) -> usize {
        let mut best = (state, f64::NEG_INFINITY);
        for (t, p) in self.successors(state, action) {
            if p > best.1 {
                best = (t, p);
            }
        }
        best.0
    }

    /// Same dynamics with a different start distribution.
    pub fn with_start_dist(&self, start_dist: Array1<f64>) -> Result<Self> {
        validate_distribution(&start_dist.to_vec(), self.num_states)
            .map_err(|e| Error::invalid(format!("start distribution: {e}")))?;
        let mut out = self.clone();
        out.start_dist = start_dist;
        Ok(out)
    }

    #[inline]
    fn expected_next(&self, state: usize, action: usize, values: &[f64]) -> f64 {
        let row = state * self.num_actions + action;
        let (lo, hi) = (self.succ_offsets[row], self.succ_offsets[row + 1]);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += self.succ_probs[i] * values[self.succ_states[i]];
        }
        acc
    }

    pub(crate) fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(Error::invalid(format!(
                "state {state} out of range (|S| = {})",
                self.num_states
            )));
        }
        Ok(())
    }
}

fn validate_distribution(p: &[f64], n: usize) -> std::result::Result<(), String> {
    if p.len() != n {
        return Err(format!("length {} != {n}", p.len()));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err("entries must lie in [0, 1]".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Uniform distribution over the given states.
pub fn uniform_over(num_states: usize, states: &[usize]) -> Result<Array1<f64>> {
    if states.is_empty() {
        return Err(Error::Empty("state set"));
    }
    let mut d = Array1::zeros(num_states);
    for &s in states {
        if s >= num_states {
            return Err(Error::invalid(format!("state {s} out of range")));
        }
        d[s] = 1.0;
    }
    let total = d.sum();
    d.mapv_inplace(|x| x / total);
    Ok(d)
}

/// L1-normalizes `w` in place. Returns `false` (leaving `w` untouched) when
/// the norm is zero or non-finite.
pub fn l1_normalize(w: &mut [f64]) -> bool {
    let norm: f64 = w.iter().map(|x| x.abs()).sum();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    w.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Reward `R(s) = wᵀφ(s)` over a shared state-feature matrix.
#[derive(Debug, Clone)]
pub struct LinearReward {
    weights: Array1<f64>,
    features: Arc<Array2<f64>>,
}

impl LinearReward {
    pub fn new(weights: Array1<f64>, features: Arc<Array2<f64>>) -> Result<Self> {
        if weights.len() != features.ncols() {
            return Err(Error::invalid(format!(
                "weight dimension {} does not match {} features",
                weights.len(),
                features.ncols()
            )));
        }
        Ok(Self { weights, features })
    }

    /// Builds a reward whose weights are rescaled to unit L1 norm.
    pub fn normalized(mut weights: Array1<f64>, features: Arc<Array2<f64>>) -> Result<Self> {
        let w = weights.as_slice_mut().expect("contiguous");
        if !l1_normalize(w) {
            return Err(Error::invalid("cannot L1-normalize a zero weight vector"));
        }
        Self::new(weights, features)
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn features(&self) -> &Arc<Array2<f64>> {
        &self.features
    }

    pub fn num_states(&self) -> usize {
        self.features.nrows()
    }

    pub fn state_rewards(&self) -> Array1<f64> {
        self.features.dot(&self.weights)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: &self.weights * factor,
            features: Arc::clone(&self.features),
        }
    }
}

/// State values `V(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    values: Array1<f64>,
}

impl ValueFunction {
    pub fn new(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn get(&self, state: usize) -> f64 {
        self.values[state]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.values
    }
}

/// State-action values `Q(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    values: Array2<f64>,
}

impl QFunction {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[[state, action]]
    }

    pub fn num_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.values.ncols()
    }

    pub fn state_max(&self, state: usize) -> f64 {
        self.values
            .row(state)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-wise maximum, i.e. the greedy state values.
    pub fn row_max(&self) -> Array1<f64> {
        Array1::from_iter((0..self.num_states()).map(|s| self.state_max(s)))
    }

    /// Index of the best action at `state`, lowest index on ties.
    pub fn argmax(&self, state: usize) -> usize {
        argmax_lowest(self.values.row(state).iter().copied())
    }
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Stochastic policy over a finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    action_probs: Array2<f64>,
    deterministic: bool,
}

impl Policy {
    pub fn new(action_probs: Array2<f64>) -> Result<Self> {
        let mut deterministic = true;
        for (s, row) in action_probs.rows().into_iter().enumerate() {
            validate_distribution(&row.to_vec(), row.len())
                .map_err(|e| Error::invalid(format!("policy row {s}: {e}")))?;
            if row.iter().filter(|&&p| p != 0.0).count() != 1 {
                deterministic = false;
            }
        }
        Ok(Self {
            action_probs,
            deterministic,
        })
    }

    pub fn from_actions(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), num_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::invalid(format!("action {a} out of range at state {s}")));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self {
            action_probs: probs,
            deterministic: true,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            action_probs: Array2::from_elem((num_states, num_actions), 1.0 / num_actions as f64),
            deterministic: num_actions == 1,
        }
    }

    pub fn action_probs(&self) -> &Array2<f64> {
        &self.action_probs
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn num_states(&self) -> usize {
        self.action_probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.action_probs.ncols()
    }

    /// Most probable action at `state` (lowest index on ties).
    pub fn action(&self, state: usize) -> usize {
        argmax_lowest(self.action_probs.row(state).iter().copied())
    }

    pub fn actions(&self) -> Vec<usize> {
        (0..self.num_states()).map(|s| self.action(s)).collect()
    }
}

fn check_rewards(mdp: &TabularMdp, rewards: &[f64]) -> Result<()> {
    if rewards.len() != mdp.num_states {
        return Err(Error::invalid(format!(
            "reward has {} states, MDP has {}",
            rewards.len(),
            mdp.num_states
        )));
    }
    if let Some(s) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::invalid(format!("non-finite reward at state {s}")));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    Ok(())
}

fn stop_threshold(discount: f64, tol: f64) -> f64 {
    if discount == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - discount) / discount
    }
}

/// Optimal state values for raw per-state rewards, optionally warm-started.
pub fn optimal_values(
    mdp: &TabularMdp,
    rewards: &[f64],
    tol: f64,
    init: Option<&[f64]>,
) -> Result<Array1<f64>> {
    check_rewards(mdp, rewards)?;
    check_tol(tol)?;
    let n = mdp.num_states;
    let gamma = mdp.discount;
    let mut v = match init {
        Some(init) if init.len() == n && init.iter().all(|x| x.is_finite()) => init.to_vec(),
        Some(_) => return Err(Error::invalid("warm-start vector has the wrong shape")),
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let threshold = stop_threshold(gamma, tol);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        residual = 0.0;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.num_actions {
                let q = mdp.expected_next(s, a, &v);
                if q > best {
                    best = q;
                }
            }
            let value = rewards[s] + gamma * best;
            residual = f64::max(residual, (value - v[s]).abs());
            next[s] = value;
        }
        std::mem::swap(&mut v, &mut next);
        if residual <= threshold {
            return Ok(Array1::from_vec(v));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// `Q(s,a) = R(s) + γ Σ_{s'} T(s,a,s') V(s')` for raw rewards.
pub fn q_from_raw(mdp: &TabularMdp, rewards: &[f64], values: &[f64]) -> Array2<f64> {
    let gamma = mdp.discount;
    Array2::from_shape_fn((mdp.num_states, mdp.num_actions), |(s, a)| {
        rewards[s] + gamma * mdp.expected_next(s, a, values)
    })
}

/// Optimal `(V*, Q*)` for raw rewards; `Q*` is consistent with the returned `V*`.
pub fn solve_optimal(
    mdp: &TabularMdp,
    rewards: &[f64],
    tol: f64,
    init: Option<&[f64]>,
) -> Result<(ValueFunction, QFunction)> {
    let v = optimal_values(mdp, rewards, tol, init)?;
    let q = q_from_raw(mdp, rewards, v.as_slice().expect("contiguous"));
    Ok((ValueFunction::new(v), QFunction::new(q)))
}

/// Optimal state values `V*` under `reward`.
pub fn value_iteration(mdp: &TabularMdp, reward: &LinearReward, tol: f64) -> Result<ValueFunction> {
    let r = reward.state_rewards();
    optimal_values(mdp, r.as_slice().expect("contiguous"), tol, None).map(ValueFunction::new)
}

/// One-step lookahead values for an arbitrary value vector.
pub fn q_from_values(mdp: &TabularMdp, reward: &LinearReward, v: &ValueFunction) -> Result<QFunction> {
    if v.len() != mdp.num_states || reward.num_states() != mdp.num_states {
        return Err(Error::invalid(format!(
            "value function has {} states, reward {}, MDP {}",
            v.len(),
            reward.num_states(),
            mdp.num_states
        )));
    }
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("value function has non-finite entries"));
    }
    let r = reward.state_rewards();
    let q = q_from_raw(
        mdp,
        r.as_slice().expect("contiguous"),
        v.values.as_slice().expect("contiguous"),
    );
    Ok(QFunction::new(q))
}

/// Deterministic greedy policy; ties go to the lowest action index.
pub fn greedy_policy(q: &QFunction) -> Policy {
    let actions: Vec<usize> = (0..q.num_states()).map(|s| q.argmax(s)).collect();
    Policy::from_actions(&actions, q.num_actions()).expect("argmax is in range")
}

/// The Bellman optimality operator applied once to `v`.
pub fn bellman_backup(mdp: &TabularMdp, rewards: &[f64], v: &[f64]) -> Array1<f64> {
    Array1::from_iter((0..mdp.num_states).map(|s| {
        let best = (0..mdp.num_actions)
            .map(|a| mdp.expected_next(s, a, v))
            .fold(f64::NEG_INFINITY, f64::max);
        rewards[s] + mdp.discount * best
    }))
}

/// Sparse policy-averaged transition matrix `P_π` in CSR form.
struct PolicyChain {
    offsets: Vec<usize>,
    states: Vec<usize>,
    probs: Vec<f64>,
}

impl PolicyChain {
    fn new(mdp: &TabularMdp, policy: &Policy) -> Result<Self> {
        if policy.num_states() != mdp.num_states || policy.num_actions() != mdp.num_actions {
            return Err(Error::invalid(format!(
                "policy shape ({}, {}) does not match MDP ({}, {})",
                policy.num_states(),
                policy.num_actions(),
                mdp.num_states,
                mdp.num_actions
            )));
        }
        let mut offsets = vec![0];
        let mut states = Vec::new();
        let mut probs = Vec::new();
        let mut dense = vec![0.0; mdp.num_states];
        let mut touched = Vec::new();
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let pa = policy.action_probs[[s, a]];
                if pa == 0.0 {
                    continue;
                }
                for (t, p) in mdp.successors(s, a) {
                    if dense[t] == 0.0 {
                        touched.push(t);
                    }
                    dense[t] += pa * p;
                }
            }
            touched.sort_unstable();
            for &t in &touched {
                states.push(t);
                probs.push(dense[t]);
                dense[t] = 0.0;
            }
            touched.clear();
            offsets.push(states.len());
        }
        Ok(Self {
            offsets,
            states,
            probs,
        })
    }

    #[inline]
    fn row(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[s]..self.offsets[s + 1];
        self.states[range.clone()]
            .iter()
            .copied()
            .zip(self.probs[range].iter().copied())
    }
}

/// Values of `policy` for raw per-state rewards.
pub fn policy_values(mdp: &TabularMdp, rewards: &[f64], policy: &Policy, tol: f64) -> Result<Array1<f64>> {
    check_rewards(mdp, rewards)?;
    check_tol(tol)?;
    let chain = PolicyChain::new(mdp, policy)?;
    let n = mdp.num_states;
    let gamma = mdp.discount;
    let threshold = stop_threshold(gamma, tol);
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        residual = 0.0;
        for s in 0..n {
            let ev: f64 = chain.row(s).map(|(t, p)| p * v[t]).sum();
            let value = rewards[s] + gamma * ev;
            residual = f64::max(residual, (value - v[s]).abs());
            next[s] = value;
        }
        std::mem::swap(&mut v, &mut next);
        if residual <= threshold {
            return Ok(Array1::from_vec(v));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Values `V^π` of an arbitrary stochastic policy under `reward`.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    reward: &LinearReward,
    policy: &Policy,
    tol: f64,
) -> Result<ValueFunction> {
    let r = reward.state_rewards();
    policy_values(mdp, r.as_slice().expect("contiguous"), policy, tol).map(ValueFunction::new)
}

/// Discounted feature expectations `μ_π = (I − γP_π)⁻¹ Φ`, one row per start
/// state. For a linear reward, `V^π = μ_π w`, so one call replaces a policy
/// evaluation per weight vector. Accurate to `tol` per unit of `‖w‖₁`.
pub fn feature_expectations(
    mdp: &TabularMdp,
    features: &Array2<f64>,
    policy: &Policy,
    tol: f64,
) -> Result<Array2<f64>> {
    check_tol(tol)?;
    if features.nrows() != mdp.num_states {
        return Err(Error::invalid(format!(
            "feature matrix has {} rows, MDP has {} states",
            features.nrows(),
            mdp.num_states
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("feature matrix has non-finite entries"));
    }
    let chain = PolicyChain::new(mdp, policy)?;
    let d = features.ncols();
    let gamma = mdp.discount;
    let threshold = stop_threshold(gamma, tol);
    let phi = features.as_standard_layout();
    let phi = phi.as_slice().expect("standard layout");
    let mut x = vec![0.0; phi.len()];
    let mut next = vec![0.0; phi.len()];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        residual = 0.0;
        for s in 0..mdp.num_states {
            let out = &mut next[s * d..(s + 1) * d];
            out.copy_from_slice(&phi[s * d..(s + 1) * d]);
            for (t, p) in chain.row(s) {
                let gp = gamma * p;
                for (o, &xt) in out.iter_mut().zip(&x[t * d..(t + 1) * d]) {
                    *o += gp * xt;
                }
            }
            for (o, &old) in out.iter().zip(&x[s * d..(s + 1) * d]) {
                residual = f64::max(residual, (o - old).abs());
            }
        }
        std::mem::swap(&mut x, &mut next);
        if residual <= threshold {
            return Ok(Array2::from_shape_vec((mdp.num_states, d), x).expect("shape"));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// `V^π_R = E_{s₀∼d₀}[V(s₀)]`.
pub fn expected_return(v: &ValueFunction, mdp: &TabularMdp) -> f64 {
    mdp.start_dist.dot(&v.values)
}

/// Random MDP with `branching` successors per state-action pair; used by
/// property tests and benchmarks.
pub fn random_mdp<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    discount: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let branching = branching.clamp(1, num_states);
    let mut t = Array3::zeros((num_states, num_actions, num_states));
    for s in 0..num_states {
        for a in 0..num_actions {
            let mut total = 0.0;
            for _ in 0..branching {
                let next = rng.random_range(0..num_states);
                let w: f64 = rng.random::<f64>() + 0.05;
                t[[s, a, next]] += w;
                total += w;
            }
            for next in 0..num_states {
                t[[s, a, next]] /= total;
            }
        }
    }
    let start = Array1::from_elem(num_states, 1.0 / num_states as f64);
    TabularMdp::new(t, discount, start, 1.0)
}

/// On-disk MDP description: dynamics plus the state-feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    #[serde(default = "default_reward_bound")]
    pub reward_bound: f64,
    pub start_dist: Vec<f64>,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `features[s][k]`.
    pub features: Vec<Vec<f64>>,
}

fn default_reward_bound() -> f64 {
    1.0
}

impl MdpFile {
    pub fn from_parts(mdp: &TabularMdp, features: &Array2<f64>) -> Self {
        let transition = (0..mdp.num_states)
            .map(|s| {
                (0..mdp.num_actions)
                    .map(|a| mdp.transition.slice(ndarray::s![s, a, ..]).to_vec())
                    .collect()
            })
            .collect();
        Self {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            discount: mdp.discount,
            reward_bound: mdp.reward_bound,
            start_dist: mdp.start_dist.to_vec(),
            transition,
            features: features.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(TabularMdp, Array2<f64>)> {
        let (n, m) = (self.num_states, self.num_actions);
        if self.transition.len() != n
            || self.transition.iter().any(|rows| {
                rows.len() != m || rows.iter().any(|row| row.len() != n)
            })
        {
            return Err(Error::invalid("transition array does not match num_states/num_actions"));
        }
        let flat: Vec<f64> = self.transition.into_iter().flatten().flatten().collect();
        let t = Array3::from_shape_vec((n, m, n), flat).map_err(|e| Error::invalid(e.to_string()))?;
        let d = self.features.first().map_or(0, Vec::len);
        if self.features.len() != n || self.features.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("features must be a num_states × d array"));
        }
        let phi = Array2::from_shape_vec((n, d), self.features.into_iter().flatten().collect())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mdp = TabularMdp::new(t, self.discount, Array1::from_vec(self.start_dist), self.reward_bound)?;
        Ok((mdp, phi))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_state(discount: f64, actions: usize) -> TabularMdp {
        TabularMdp::new(Array3::ones((1, actions, 1)), discount, array![1.0], 1.0).unwrap()
    }

    /// s0 --step--> s1, s0 --stay--> s0, s1 absorbing under both actions.
    pub(crate) fn chain(discount: f64) -> TabularMdp {
        let mut t = Array3::zeros((2, 2, 2));
        t[[0, 0, 0]] = 1.0; // stay
        t[[0, 1, 1]] = 1.0; // step
        t[[1, 0, 1]] = 1.0;
        t[[1, 1, 1]] = 1.0;
        TabularMdp::new(t, discount, array![1.0, 0.0], 1.0).unwrap()
    }

    fn reward(weights: Array1<f64>, features: Array2<f64>) -> LinearReward {
        LinearReward::new(weights, Arc::new(features)).unwrap()
    }

    fn identity_reward(r: &[f64]) -> LinearReward {
        let n = r.len();
        reward(Array1::from_vec(r.to_vec()), Array2::eye(n))
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = single_state(0.9, 1);
        let v = value_iteration(&mdp, &identity_reward(&[1.0]), DEFAULT_TOL).unwrap();
        assert!((v.get(0) - 10.0).abs() <= DEFAULT_TOL);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(7, 3, 2, 0.95, &mut rng).unwrap();
        let v = value_iteration(&mdp, &identity_reward(&[0.0; 7]), DEFAULT_TOL).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_state_chain_values() {
        let mdp = chain(0.5);
        let r = identity_reward(&[0.0, 1.0]);
        let v = value_iteration(&mdp, &r, DEFAULT_TOL).unwrap();
        assert!((v.get(0) - 1.0).abs() <= DEFAULT_TOL);
        assert!((v.get(1) - 2.0).abs() <= DEFAULT_TOL);
    }

    #[test]
    fn non_finite_reward_rejected() {
        let mdp = chain(0.5);
        let err = value_iteration(&mdp, &identity_reward(&[f64::NAN, 1.0]), DEFAULT_TOL).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn q_from_values_examples() {
        let mdp = chain(0.5);
        let ones = identity_reward(&[1.0, 1.0]);
        let q = q_from_values(&mdp, &ones, &ValueFunction::new(Array1::zeros(2))).unwrap();
        assert!(q.values().iter().all(|&x| x == 1.0));

        let r = identity_reward(&[0.0, 1.0]);
        let q = q_from_values(&mdp, &r, &ValueFunction::new(array![1.0, 2.0])).unwrap();
        assert_eq!(q.get(0, 1), 1.0);

        let myopic = chain(0.0);
        let q = q_from_values(&myopic, &r, &ValueFunction::new(array![5.0, 7.0])).unwrap();
        assert_eq!(q.values(), &array![[0.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn q_from_values_shape_mismatch() {
        let mdp = chain(0.5);
        let r = identity_reward(&[0.0, 1.0]);
        assert!(q_from_values(&mdp, &r, &ValueFunction::new(Array1::zeros(3))).is_err());
    }

    #[test]
    fn greedy_tie_breaking() {
        let p = greedy_policy(&QFunction::new(array![[0.3, 0.9, 0.1]]));
        assert_eq!(p.action(0), 1);
        let p = greedy_policy(&QFunction::new(array![[0.5, 0.5]]));
        assert_eq!(p.action(0), 0);
        let p = greedy_policy(&QFunction::new(Array2::zeros((5, 4))));
        assert!(p.actions().iter().all(|&a| a == 0));
        assert!(p.is_deterministic());
    }

    #[test]
    fn evaluate_policy_examples() {
        let mdp = single_state(0.9, 3);
        let v = evaluate_policy(&mdp, &identity_reward(&[1.0]), &Policy::uniform(1, 3), DEFAULT_TOL).unwrap();
        assert!((v.get(0) - 10.0).abs() <= DEFAULT_TOL);

        let mdp = chain(0.5);
        let v = evaluate_policy(&mdp, &identity_reward(&[0.0, 0.0]), &Policy::uniform(2, 2), DEFAULT_TOL).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expected_return_examples() {
        let mdp = TabularMdp::new(Array3::from_elem((4, 1, 4), 0.25), 0.9, array![0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        let v = ValueFunction::new(array![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(expected_return(&v, &mdp), 4.0);
        let mdp2 = chain(0.5).with_start_dist(array![0.5, 0.5]).unwrap();
        assert_eq!(expected_return(&ValueFunction::new(array![1.0, 3.0]), &mdp2), 2.0);
        assert_eq!(expected_return(&ValueFunction::new(Array1::zeros(2)), &mdp2), 0.0);
    }

    #[test]
    fn invalid_mdps_rejected() {
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 0]] = 0.5;
        t[[1, 0, 1]] = 1.0;
        assert!(TabularMdp::new(t, 0.9, array![1.0, 0.0], 1.0).is_err());
        assert!(TabularMdp::new(Array3::ones((1, 1, 1)), 1.0, array![1.0], 1.0).is_err());
        assert!(TabularMdp::new(Array3::ones((1, 1, 1)), 0.5, array![0.5], 1.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(5, 2, 3, 0.9, &mut rng).unwrap();
        let phi = Array2::from_shape_fn((5, 3), |(s, k)| (s * 3 + k) as f64 / 15.0);
        let file = MdpFile::from_parts(&mdp, &phi);
        let json = file.to_json().unwrap();
        let back = MdpFile::from_json(&json).unwrap();
        assert_eq!(back, file);
        let (mdp2, phi2) = back.into_parts().unwrap();
        assert_eq!(mdp2.transition(), mdp.transition());
        assert_eq!(phi2, phi);
    }

    #[test]
    fn feature_expectations_match_policy_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(12, 3, 3, 0.9, &mut rng).unwrap();
        let phi = Array2::from_shape_fn((12, 4), |_| rng.random::<f64>());
        let w = array![0.4, -0.3, 0.2, -0.1];
        let policy = Policy::uniform(12, 3);
        let mu = feature_expectations(&mdp, &phi, &policy, 1e-10).unwrap();
        let direct = evaluate_policy(&mdp, &reward(w.clone(), phi), &policy, 1e-10).unwrap();
        for s in 0..12 {
            assert!((mu.row(s).dot(&w) - direct.get(s)).abs() < 1e-9);
        }
    }

    fn random_rewards(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bellman_backup_is_a_contraction(seed in 0u64..10_000, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(n, 3, 3, 0.9, &mut rng).unwrap();
            let r = random_rewards(&mut rng, n);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let before = u.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let bu = bellman_backup(&mdp, &r, &u);
            let bw = bellman_backup(&mdp, &r, &w);
            let after = bu.iter().zip(&bw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(after <= 0.9 * before + 1e-12);
        }

        #[test]
        fn greedy_policy_of_optimal_q_attains_optimal_values(seed in 0u64..10_000, n in 1usize..=50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(n, 4, 2, 0.95, &mut rng).unwrap();
            let r = identity_reward(&random_rewards(&mut rng, n));
            let v = value_iteration(&mdp, &r, DEFAULT_TOL).unwrap();
            let q = q_from_values(&mdp, &r, &v).unwrap();
            let pi = greedy_policy(&q);
            let vp = evaluate_policy(&mdp, &r, &pi, DEFAULT_TOL).unwrap();
            for s in 0..n {
                prop_assert!((vp.get(s) - v.get(s)).abs() <= 2.0 * DEFAULT_TOL);
            }
        }

        #[test]
        fn q_row_max_equals_bellman_backup(seed in 0u64..10_000, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(n, 3, 4, 0.8, &mut rng).unwrap();
            let rv = random_rewards(&mut rng, n);
            let r = identity_reward(&rv);
            let v = ValueFunction::new(Array1::from_iter((0..n).map(|_| rng.random_range(-3.0..3.0))));
            let q = q_from_values(&mdp, &r, &v).unwrap();
            let backup = bellman_backup(&mdp, &rv, v.values().as_slice().unwrap());
            for s in 0..n {
                prop_assert!((q.state_max(s) - backup[s]).abs() <= 1e-9);
            }
        }
    }
}
