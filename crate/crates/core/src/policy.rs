//! Policy-evaluation traits shared by the preference model and the training
//! loss, plus the tabular softmax policy used to cross-check gradients.
//!
//! Both tiers expose the same two capabilities: per-step log density ratios
//! `log(pi_theta(a_t|s_t) / pi_I(a_t|s_t))` along a stored trajectory, and
//! (for trainable policies) the parameter gradient of `log pi_theta` at a
//! step. The loss is written against these traits so the discrete and
//! diffusion tiers share one code path.

use thiserror::Error;

use crate::mdp::{PolicyTable, RegularizedSolution, Trajectory};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("zero base-policy probability at step {step}")]
    UndefinedRatio { step: usize },
    #[error("step {step} out of range (horizon {horizon})")]
    StepOutOfRange { step: usize, horizon: usize },
    #[error("non-finite log density at step {step}")]
    NonFinite { step: usize },
    #[error("degenerate density: zero variance at stochastic step {step}")]
    DegenerateDensity { step: usize },
}

/// Anything that behaves as an ordered list of generation steps under one
/// prompt.
pub trait TrajectoryLike {
    fn n_steps(&self) -> usize;
    fn prompt(&self) -> usize;
}

impl TrajectoryLike for Trajectory {
    fn n_steps(&self) -> usize {
        self.len()
    }

    fn prompt(&self) -> usize {
        self.prompt_id
    }
}

/// Per-step log density ratio against a frozen base policy.
pub trait RatioPolicy<T: TrajectoryLike> {
    /// `log(pi(a_step | s_step) / pi_I(a_step | s_step))` for the stored step.
    fn log_ratio(&self, traj: &T, step: usize) -> Result<f64, PolicyError>;
}

/// A trainable policy that can also accumulate `scale * grad log pi_theta`
/// over its parameter vector at a given step.
pub trait DifferentiableRatioPolicy<T: TrajectoryLike>: RatioPolicy<T> {
    fn n_trainable(&self) -> usize;

    fn add_scaled_log_prob_grad(
        &self,
        traj: &T,
        step: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError>;
}

/// Ratio view of an exactly solved MDP: the "policy" is the closed-form
/// optimal `pi*` and the base is the solver's `pi_I`.
pub struct SolvedRatio<'a> {
    sol: &'a RegularizedSolution,
    base: &'a PolicyTable,
}

impl<'a> SolvedRatio<'a> {
    pub fn new(sol: &'a RegularizedSolution, base: &'a PolicyTable) -> Self {
        Self { sol, base }
    }
}

impl RatioPolicy<Trajectory> for SolvedRatio<'_> {
    fn log_ratio(&self, traj: &Trajectory, step: usize) -> Result<f64, PolicyError> {
        let &(s, a) = traj
            .steps
            .get(step)
            .ok_or(PolicyError::StepOutOfRange {
                step,
                horizon: traj.len(),
            })?;
        let base = self.base.prob(s, a);
        if base == 0.0 {
            return Err(PolicyError::UndefinedRatio { step });
        }
        Ok((self.sol.pi_star().prob(s, a) / base).ln())
    }
}

/// Tabular policy `pi_theta(a|s) = softmax(theta(s, .))(a)` over a frozen
/// base table, trainable through its logits.
///
/// `grad log pi(a|s)` with respect to the logit row of `s` is
/// `one_hot(a) - pi(.|s)`; other rows receive zero.
#[derive(Debug, Clone)]
pub struct TabularSoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
    base_log_prob: Vec<f64>,
}

impl TabularSoftmaxPolicy {
    /// Starts at the base policy itself (logits = log pi_I), so every log
    /// ratio is zero until the logits move.
    pub fn at_base(base: &PolicyTable) -> Self {
        let n_states = base.n_states();
        let n_actions = base.n_actions();
        let mut logits = Vec::with_capacity(n_states * n_actions);
        let mut base_log_prob = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let p = base.prob(s, a);
                base_log_prob.push(p.ln());
                logits.push(if p > 0.0 { p.ln() } else { -30.0 });
            }
        }
        Self {
            n_states,
            n_actions,
            logits,
            base_log_prob,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row_log_softmax(&self, state: usize, action: usize) -> f64 {
        let row = &self.logits[state * self.n_actions..(state + 1) * self.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row[action] - lse
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.row_log_softmax(state, action)
    }
}

impl RatioPolicy<Trajectory> for TabularSoftmaxPolicy {
    fn log_ratio(&self, traj: &Trajectory, step: usize) -> Result<f64, PolicyError> {
        let &(s, a) = traj
            .steps
            .get(step)
            .ok_or(PolicyError::StepOutOfRange {
                step,
                horizon: traj.len(),
            })?;
        let base = self.base_log_prob[s * self.n_actions + a];
        if base == f64::NEG_INFINITY {
            return Err(PolicyError::UndefinedRatio { step });
        }
        Ok(self.row_log_softmax(s, a) - base)
    }
}

impl DifferentiableRatioPolicy<Trajectory> for TabularSoftmaxPolicy {
    fn n_trainable(&self) -> usize {
        self.logits.len()
    }

    fn add_scaled_log_prob_grad(
        &self,
        traj: &Trajectory,
        step: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let &(s, a) = traj
            .steps
            .get(step)
            .ok_or(PolicyError::StepOutOfRange {
                step,
                horizon: traj.len(),
            })?;
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for b in 0..self.n_actions {
            let p = exps[b] / z;
            let indicator = if b == a { 1.0 } else { 0.0 };
            grad[s * self.n_actions + b] += scale * (indicator - p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_policy_starts_at_base() {
        let base = PolicyTable::new(2, 2, vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        let pol = TabularSoftmaxPolicy::at_base(&base);
        let traj = Trajectory::new(0, vec![(0, 1), (1, 0)]);
        for step in 0..2 {
            assert!(pol.log_ratio(&traj, step).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_grad_row_sums_to_zero() {
        let base = PolicyTable::uniform(1, 3);
        let mut pol = TabularSoftmaxPolicy::at_base(&base);
        pol.logits_mut().copy_from_slice(&[0.2, -0.4, 1.1]);
        let traj = Trajectory::new(0, vec![(0, 2)]);
        let mut grad = vec![0.0; 3];
        pol.add_scaled_log_prob_grad(&traj, 0, 1.0, &mut grad)
            .unwrap();
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!(grad[2] > 0.0);
    }

    #[test]
    fn solved_ratio_rejects_zero_base() {
        let mdp = crate::mdp::DiscreteMdp::new(1, 2, vec![0.3, 0.6], vec![0, 0], 1, vec![1.0])
            .unwrap();
        let base = PolicyTable::deterministic(&[0], 2);
        let sol = mdp.solve_regularized(&base, 1.0).unwrap();
        let view = SolvedRatio::new(&sol, &base);
        let traj = Trajectory::new(0, vec![(0, 1)]);
        assert!(matches!(
            view.log_ratio(&traj, 0),
            Err(PolicyError::UndefinedRatio { step: 0 })
        ));
    }
}
