//! Finite discrete MDPs with deterministic transitions, discounted trajectory
//! evaluation, the exact KL-regularized solver, and reward shaping.
//!
//! Everything here is brute-forceable: partition functions are finite sums,
//! trajectories are enumerable, and the regularized optimal policy
//! `pi*(a|s) = exp(r(s,a)/C) pi_I(a|s) / Z(s)` has a closed form per state.
//! This tier exists so that each identity used by the training loss can be
//! checked against direct evaluation.

use serde::Deserialize;
use thiserror::Error;

/// Default cap on `n_actions^horizon * n_states` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Largest `x` with `exp(x) <= 1 + x + x^2` (positive branch).
///
/// The ordering argument for partition functions bounds `exp(r/C)` by the
/// quadratic `1 + r/C + (r/C)^2`, which is valid only while `r/C` stays at or
/// below this root. Solved to full double precision by bisection on
/// `exp(x) - (1 + x + x^2)`.
pub const EXP_QUADRATIC_ROOT: f64 = 1.793_282_132_900_761_3;

/// Tolerance for "probabilities sum to one" checks on user input.
const DIST_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("{field}: {message}")]
    InvalidField { field: String, message: String },
    #[error("mdp document error at line {line}, column {column}: {message}")]
    Document {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("regularization coefficient must be positive, got {0}")]
    InvalidCoefficient(f64),
    #[error("trajectory step {step}: state {state} / action {action} out of range")]
    InvalidTrajectory {
        step: usize,
        state: usize,
        action: usize,
    },
    #[error("trajectory step {step}: state {found} does not follow the transition table (expected {expected})")]
    BrokenTransition {
        step: usize,
        found: usize,
        expected: usize,
    },
    #[error("zero base-policy probability at state {state}, action {action}")]
    UndefinedRatio { state: usize, action: usize },
    #[error("enumeration would need {required} trajectories, cap is {cap}")]
    EnumerationTooLarge { required: u128, cap: u128 },
    #[error("ranked trajectories {a} and {b} cross at step {step}")]
    CrossingTrajectories { a: usize, b: usize, step: usize },
    #[error("tied trajectory evaluations at ranks {a} and {b}")]
    AmbiguousOrdering { a: usize, b: usize },
    #[error("ranked trajectories not sorted by descending evaluation at ranks {a} and {b}")]
    NotDescending { a: usize, b: usize },
    #[error("shaping coefficient {c} rejected: requires r_max/C <= {root}", root = EXP_QUADRATIC_ROOT)]
    ShapingCoefficient { c: f64 },
    #[error("shaping infeasible: adjacent constraint {index} still violated after construction")]
    ShapingInfeasible { index: usize },
}

fn field_err(field: &str, message: impl Into<String>) -> MdpError {
    MdpError::InvalidField {
        field: field.to_string(),
        message: message.into(),
    }
}

/// One generation trajectory: an ordered list of `(state, action)` steps.
///
/// Step `i = 0` is the first (noisiest) step; a trajectory has exactly
/// `horizon` steps and its quality is `sum_i gamma^i r(s_i, a_i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(prompt_id: usize, steps: Vec<(usize, usize)>) -> Self {
        Self { prompt_id, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A row-stochastic policy table over `state x action`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    /// Validates that every row is a probability vector (entries >= 0,
    /// sum within `1e-12` of one).
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(field_err(
                "policy",
                format!(
                    "expected {} entries, got {}",
                    n_states * n_actions,
                    probs.len()
                ),
            ));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(field_err(
                    "policy",
                    format!("row {s} contains a negative or non-finite probability"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > DIST_SUM_TOL {
                return Err(field_err(
                    "policy",
                    format!("row {s} sums to {sum}, expected 1 within {DIST_SUM_TOL:e}"),
                ));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Point-mass policy: in state `s` the single action `actions[s]` has
    /// probability one.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action index out of range");
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

/// Per-state optimal regularized policy and log partition values.
#[derive(Debug, Clone)]
pub struct RegularizedSolution {
    pi_star: PolicyTable,
    log_z: Vec<f64>,
}

impl RegularizedSolution {
    pub fn pi_star(&self) -> &PolicyTable {
        &self.pi_star
    }

    pub fn log_z(&self, state: usize) -> f64 {
        self.log_z[state]
    }

    pub fn log_z_table(&self) -> &[f64] {
        &self.log_z
    }

    /// Discounted log partition aggregate `log Z(tau) = sum_i gamma^i log Z(s_i)`.
    pub fn log_z_trajectory(&self, traj: &Trajectory, gamma: f64) -> f64 {
        let mut weight = 1.0;
        let mut acc = 0.0;
        for &(s, _) in &traj.steps {
            acc += weight * self.log_z[s];
            weight *= gamma;
        }
        acc
    }

    /// Recovers the reward table from the solved policy:
    /// `r(s,a) = C log(pi*(a|s)/pi_I(a|s)) + C log Z(s)`.
    ///
    /// Round-trips the solver input within 1e-8. Fails with
    /// [`MdpError::UndefinedRatio`] if the base policy puts zero mass on any
    /// action, since the ratio is undefined there.
    pub fn implied_reward(&self, pi_i: &PolicyTable, c: f64) -> Result<Vec<f64>, MdpError> {
        if c <= 0.0 || !c.is_finite() {
            return Err(MdpError::InvalidCoefficient(c));
        }
        let (ns, na) = (self.pi_star.n_states, self.pi_star.n_actions);
        let mut reward = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let base = pi_i.prob(s, a);
                if base == 0.0 {
                    return Err(MdpError::UndefinedRatio { state: s, action: a });
                }
                let ratio = (self.pi_star.prob(s, a) / base).ln();
                reward[s * na + a] = c * ratio + c * self.log_z[s];
            }
        }
        Ok(reward)
    }

    /// Expresses the discounted trajectory evaluation through the solved
    /// policy: `e(tau) = C sum_i gamma^i log(pi*(a_i|s_i)/pi_I(a_i|s_i)) + C log Z(tau)`.
    pub fn trajectory_evaluation(
        &self,
        traj: &Trajectory,
        pi_i: &PolicyTable,
        c: f64,
        gamma: f64,
    ) -> Result<f64, MdpError> {
        let mut weight = 1.0;
        let mut ratio_sum = 0.0;
        for &(s, a) in &traj.steps {
            let base = pi_i.prob(s, a);
            if base == 0.0 {
                return Err(MdpError::UndefinedRatio { state: s, action: a });
            }
            ratio_sum += weight * (self.pi_star.prob(s, a) / base).ln();
            weight *= gamma;
        }
        Ok(c * ratio_sum + c * self.log_z_trajectory(traj, gamma))
    }
}

/// State-only shaping term `Phi`: the shaped reward is `r'(s,a) = r(s,a) + Phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapingFunction {
    pub phi: Vec<f64>,
}

impl ShapingFunction {
    pub fn new(phi: Vec<f64>) -> Result<Self, MdpError> {
        if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
            return Err(field_err("phi", format!("entry {i} is not finite")));
        }
        Ok(Self { phi })
    }

    pub fn zero(n_states: usize) -> Self {
        Self {
            phi: vec![0.0; n_states],
        }
    }

    /// Discounted sum of `Phi` along a trajectory's states.
    pub fn discounted_sum(&self, traj: &Trajectory, gamma: f64) -> f64 {
        let mut weight = 1.0;
        let mut acc = 0.0;
        for &(s, _) in &traj.steps {
            acc += weight * self.phi[s];
            weight *= gamma;
        }
        acc
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    reward: Vec<f64>,
    transition: Vec<usize>,
    horizon: usize,
    initial_dist: Vec<f64>,
}

/// Finite-horizon MDP with a bounded reward table and deterministic
/// transitions.
///
/// Base rewards live in `[0, 1]`. Shaped copies produced by [`Self::shape`]
/// carry unconstrained rewards and are flagged via [`Self::is_shaped`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMdp {
    n_states: usize,
    n_actions: usize,
    reward: Vec<f64>,
    transition: Vec<usize>,
    horizon: usize,
    initial_dist: Vec<f64>,
    shaped: bool,
}

impl DiscreteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        reward: Vec<f64>,
        transition: Vec<usize>,
        horizon: usize,
        initial_dist: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if n_states == 0 {
            return Err(field_err("n_states", "must be positive"));
        }
        if n_actions == 0 {
            return Err(field_err("n_actions", "must be positive"));
        }
        if horizon == 0 {
            return Err(field_err("horizon", "must be positive"));
        }
        if reward.len() != n_states * n_actions {
            return Err(field_err(
                "reward",
                format!("expected {} entries, got {}", n_states * n_actions, reward.len()),
            ));
        }
        for (i, r) in reward.iter().enumerate() {
            if !r.is_finite() || !(0.0..=1.0).contains(r) {
                return Err(field_err(
                    "reward",
                    format!("entry {i} is {r}, outside [0, 1]"),
                ));
            }
        }
        if transition.len() != n_states * n_actions {
            return Err(field_err(
                "transition",
                format!(
                    "expected {} entries, got {}",
                    n_states * n_actions,
                    transition.len()
                ),
            ));
        }
        for (i, t) in transition.iter().enumerate() {
            if *t >= n_states {
                return Err(field_err(
                    "transition",
                    format!("entry {i} is {t}, not a valid state index (< {n_states})"),
                ));
            }
        }
        if initial_dist.len() != n_states {
            return Err(field_err(
                "initial_dist",
                format!("expected {n_states} entries, got {}", initial_dist.len()),
            ));
        }
        if initial_dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(field_err(
                "initial_dist",
                "contains a negative or non-finite probability",
            ));
        }
        let sum: f64 = initial_dist.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(field_err(
                "initial_dist",
                format!("sums to {sum}, expected 1 within {DIST_SUM_TOL:e}"),
            ));
        }
        Ok(Self {
            n_states,
            n_actions,
            reward,
            transition,
            horizon,
            initial_dist,
            shaped: false,
        })
    }

    /// Parses the JSON document form:
    /// `{"n_states", "n_actions", "reward", "transition", "horizon", "initial_dist"}`
    /// with row-major `state x action` tables.
    pub fn from_json_str(text: &str) -> Result<Self, MdpError> {
        let doc: MdpDocument = serde_json::from_str(text).map_err(|e| MdpError::Document {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::new(
            doc.n_states,
            doc.n_actions,
            doc.reward,
            doc.transition,
            doc.horizon,
            doc.initial_dist,
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.n_actions + action]
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        self.transition[state * self.n_actions + action]
    }

    /// Whether this MDP came out of [`Self::shape`]; shaped rewards may leave
    /// `[0, 1]`.
    pub fn is_shaped(&self) -> bool {
        self.shaped
    }

    /// Checks index validity and transition consistency of a trajectory.
    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<(), MdpError> {
        for (i, &(s, a)) in traj.steps.iter().enumerate() {
            if s >= self.n_states || a >= self.n_actions {
                return Err(MdpError::InvalidTrajectory {
                    step: i,
                    state: s,
                    action: a,
                });
            }
            if i + 1 < traj.steps.len() {
                let expected = self.next_state(s, a);
                let found = traj.steps[i + 1].0;
                if found != expected {
                    return Err(MdpError::BrokenTransition {
                        step: i + 1,
                        found,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }

    /// Discounted return `e(tau) = sum_i gamma^i r(s_i, a_i)`.
    pub fn discounted_return(&self, traj: &Trajectory, gamma: f64) -> Result<f64, MdpError> {
        debug_assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1]");
        let mut weight = 1.0;
        let mut acc = 0.0;
        for (i, &(s, a)) in traj.steps.iter().enumerate() {
            if s >= self.n_states || a >= self.n_actions {
                return Err(MdpError::InvalidTrajectory {
                    step: i,
                    state: s,
                    action: a,
                });
            }
            acc += weight * self.reward(s, a);
            weight *= gamma;
        }
        Ok(acc)
    }

    /// Exact per-state solution of the KL-regularized policy search:
    /// `pi*(a|s) = exp(r(s,a)/C) pi_I(a|s) / Z(s)` with
    /// `Z(s) = sum_a exp(r(s,a)/C) pi_I(a|s)`.
    ///
    /// `log Z` is computed by log-sum-exp over the actions the base policy
    /// supports, so a deterministic base policy yields `log Z(s) = r(s,a)/C`
    /// exactly.
    pub fn solve_regularized(
        &self,
        pi_i: &PolicyTable,
        c: f64,
    ) -> Result<RegularizedSolution, MdpError> {
        if c <= 0.0 || !c.is_finite() {
            return Err(MdpError::InvalidCoefficient(c));
        }
        assert_eq!(pi_i.n_states, self.n_states, "policy/mdp state mismatch");
        assert_eq!(pi_i.n_actions, self.n_actions, "policy/mdp action mismatch");

        let na = self.n_actions;
        let mut probs = vec![0.0; self.n_states * na];
        let mut log_z = vec![0.0; self.n_states];
        for s in 0..self.n_states {
            let mut max_scaled = f64::NEG_INFINITY;
            for a in 0..na {
                if pi_i.prob(s, a) > 0.0 {
                    max_scaled = max_scaled.max(self.reward(s, a) / c);
                }
            }
            let mut z_shifted = 0.0;
            for a in 0..na {
                let p = pi_i.prob(s, a);
                if p > 0.0 {
                    z_shifted += p * ((self.reward(s, a) / c) - max_scaled).exp();
                }
            }
            let lz = max_scaled + z_shifted.ln();
            log_z[s] = lz;
            for a in 0..na {
                let p = pi_i.prob(s, a);
                probs[s * na + a] = if p > 0.0 {
                    p * ((self.reward(s, a) / c) - lz).exp()
                } else {
                    0.0
                };
            }
        }
        Ok(RegularizedSolution {
            pi_star: PolicyTable {
                n_states: self.n_states,
                n_actions: na,
                probs,
            },
            log_z,
        })
    }

    /// New MDP with rewards shifted per state by `phi`; the result is flagged
    /// shaped and its rewards are unconstrained reals.
    pub fn shape(&self, phi: &ShapingFunction) -> Self {
        assert_eq!(phi.phi.len(), self.n_states, "phi/mdp state mismatch");
        let mut shifted = self.reward.clone();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                shifted[s * self.n_actions + a] += phi.phi[s];
            }
        }
        Self {
            reward: shifted,
            shaped: true,
            ..self.clone()
        }
    }

    /// All trajectories reachable from states with nonzero initial
    /// probability, each exactly once. Deterministic transitions mean a
    /// trajectory is identified by `(s0, action sequence)`; trajectories are
    /// emitted in lexicographic order of that identifier.
    pub fn enumerate_trajectories(&self, cap: u128) -> Result<Vec<Trajectory>, MdpError> {
        let per_start = (self.n_actions as u128)
            .checked_pow(self.horizon as u32)
            .unwrap_or(u128::MAX);
        let required = per_start.saturating_mul(self.n_states as u128);
        if required > cap {
            return Err(MdpError::EnumerationTooLarge { required, cap });
        }
        let mut out = Vec::new();
        let mut actions = vec![0usize; self.horizon];
        for s0 in 0..self.n_states {
            if self.initial_dist[s0] == 0.0 {
                continue;
            }
            actions.iter_mut().for_each(|a| *a = 0);
            loop {
                let mut steps = Vec::with_capacity(self.horizon);
                let mut s = s0;
                for &a in actions.iter() {
                    steps.push((s, a));
                    s = self.next_state(s, a);
                }
                out.push(Trajectory::new(0, steps));

                // advance the action odometer
                let mut i = self.horizon;
                loop {
                    if i == 0 {
                        break;
                    }
                    i -= 1;
                    actions[i] += 1;
                    if actions[i] < self.n_actions {
                        break;
                    }
                    actions[i] = 0;
                }
                if actions.iter().all(|&a| a == 0) {
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Accepts a regularization coefficient iff `r_max / C` stays inside the
/// region where `exp(x) <= 1 + x + x^2`, the bound the partition-ordering
/// argument needs. With `r_max = 1` this accepts `C = 0.56` and rejects
/// `C = 0.5`.
pub fn validate_c(c: f64, r_max: f64) -> bool {
    debug_assert!(r_max > 0.0, "r_max must be positive");
    c > 0.0 && c.is_finite() && r_max / c <= EXP_QUADRATIC_ROOT
}

/// Adjacent-pair lower bound `((C+1)/C) * (1 - gamma^n) / (1 - gamma)` on the
/// discounted shaping difference between consecutively ranked trajectories.
pub fn shaping_threshold(c: f64, gamma: f64, n_steps: usize) -> f64 {
    (c + 1.0) / c * discount_mass(gamma, n_steps)
}

/// `sum_{t=0}^{n-1} gamma^t`, with the `gamma = 1` limit handled exactly.
pub fn discount_mass(gamma: f64, n_steps: usize) -> f64 {
    if gamma == 1.0 {
        n_steps as f64
    } else {
        (1.0 - gamma.powi(n_steps as i32)) / (1.0 - gamma)
    }
}

/// Builds a canonical shaping function that restores the partition ordering
/// for a strictly ranked set of pairwise non-crossing trajectories.
///
/// `ranked` must be sorted by strictly descending discounted return. `Phi`
/// stays zero on the lowest-ranked trajectory's states; each higher-ranked
/// trajectory's states are raised uniformly until its adjacent constraint
/// `sum_t gamma^t (Phi(s^k_t) - Phi(s^{k+1}_t)) >= threshold` holds with a
/// `+1` margin. The greedy lift is exact when ranked trajectories share no
/// states; if sharing erodes a constraint the construction reports
/// [`MdpError::ShapingInfeasible`].
pub fn construct_ordering_shaping(
    mdp: &DiscreteMdp,
    ranked: &[Trajectory],
    c: f64,
    gamma: f64,
) -> Result<ShapingFunction, MdpError> {
    if !validate_c(c, 1.0) {
        return Err(MdpError::ShapingCoefficient { c });
    }
    let k = ranked.len();
    if k <= 1 {
        return Ok(ShapingFunction::zero(mdp.n_states()));
    }

    let mut evals = Vec::with_capacity(k);
    for traj in ranked {
        mdp.check_trajectory(traj)?;
        evals.push(mdp.discounted_return(traj, gamma)?);
    }
    for i in 0..k - 1 {
        if evals[i] == evals[i + 1] {
            return Err(MdpError::AmbiguousOrdering { a: i, b: i + 1 });
        }
        if evals[i] < evals[i + 1] {
            return Err(MdpError::NotDescending { a: i, b: i + 1 });
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            for t in 0..mdp.horizon() {
                if ranked[i].steps[t].0 == ranked[j].steps[t].0 {
                    return Err(MdpError::CrossingTrajectories { a: i, b: j, step: t });
                }
            }
        }
    }

    let threshold = shaping_threshold(c, gamma, mdp.horizon());
    let mass = discount_mass(gamma, mdp.horizon());
    let mut phi = ShapingFunction::zero(mdp.n_states());

    // Lift from the second-lowest rank upward; the lowest stays at zero.
    for rank in (0..k - 1).rev() {
        let margin =
            phi.discounted_sum(&ranked[rank], gamma) - phi.discounted_sum(&ranked[rank + 1], gamma);
        let deficit = threshold + 1.0 - margin;
        if deficit > 0.0 {
            let lift = deficit / mass;
            let mut states: Vec<usize> = ranked[rank].steps.iter().map(|&(s, _)| s).collect();
            states.sort_unstable();
            states.dedup();
            for s in states {
                phi.phi[s] += lift;
            }
        }
    }

    for rank in 0..k - 1 {
        let margin =
            phi.discounted_sum(&ranked[rank], gamma) - phi.discounted_sum(&ranked[rank + 1], gamma);
        if margin < threshold {
            return Err(MdpError::ShapingInfeasible { index: rank });
        }
    }
    Ok(phi)
}
