//! Pairwise Bradley-Terry preference model: the partition-exact form on
//! solved discrete MDPs, its tractable lower bound, preference simulation
//! from a scorer, and the paired win-rate metric.

use thiserror::Error;

use crate::mdp::{PolicyTable, RegularizedSolution, Trajectory};
use crate::policy::{PolicyError, RatioPolicy, TrajectoryLike};

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("non-finite trajectory evaluation")]
    NonFiniteEvaluation,
    #[error("paired lists have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("preference pair: trajectories belong to prompts {a} and {b}")]
    PromptMismatch { a: usize, b: usize },
    #[error("preference pair: trajectories have lengths {a} and {b}")]
    UnequalHorizons { a: usize, b: usize },
    #[error("preference pair: better score {better} does not exceed worse score {worse}")]
    ScoreOrder { better: f64, worse: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Numerically stable logistic function, exact for arguments out to the
/// `exp` overflow range (|x| ~ 700).
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// An oriented preference between two equal-length trajectories of one
/// prompt: `better` strictly outscored `worse`.
#[derive(Debug, Clone)]
pub struct PreferencePair<T> {
    pub prompt_id: usize,
    pub better: T,
    pub worse: T,
    pub better_score: f64,
    pub worse_score: f64,
}

impl<T: TrajectoryLike> PreferencePair<T> {
    pub fn new(
        better: T,
        worse: T,
        better_score: f64,
        worse_score: f64,
    ) -> Result<Self, PreferenceError> {
        if better.prompt() != worse.prompt() {
            return Err(PreferenceError::PromptMismatch {
                a: better.prompt(),
                b: worse.prompt(),
            });
        }
        if better.n_steps() != worse.n_steps() {
            return Err(PreferenceError::UnequalHorizons {
                a: better.n_steps(),
                b: worse.n_steps(),
            });
        }
        if !(better_score > worse_score) {
            return Err(PreferenceError::ScoreOrder {
                better: better_score,
                worse: worse_score,
            });
        }
        let prompt_id = better.prompt();
        Ok(Self {
            prompt_id,
            better,
            worse,
            better_score,
            worse_score,
        })
    }

    pub fn horizon(&self) -> usize {
        self.better.n_steps()
    }
}

/// Bradley-Terry probability that the first trajectory is preferred:
/// `sigma(e1 - e2)`.
pub fn bt_probability(e1: f64, e2: f64) -> Result<f64, PreferenceError> {
    if !e1.is_finite() || !e2.is_finite() {
        return Err(PreferenceError::NonFiniteEvaluation);
    }
    Ok(sigmoid(e1 - e2))
}

/// The partition-function form of the pair probability on a solved MDP:
///
/// ```text
/// exp(C sum_t g^t log(pi*/pi_I) on tau1) * Z(tau1)^C
/// ----------------------------------------------------
///      sum_i exp(C sum_t g^t log(pi*/pi_I) on tau_i) * Z(tau_i)^C
/// ```
///
/// evaluated in log space. Agrees with `sigma(e(tau1) - e(tau2))` computed
/// from raw rewards within 1e-8.
pub fn bt_probability_exact(
    pair: &PreferencePair<Trajectory>,
    sol: &RegularizedSolution,
    pi_i: &PolicyTable,
    c: f64,
    gamma: f64,
) -> Result<f64, PreferenceError> {
    let eval = |traj: &Trajectory| -> Result<f64, PreferenceError> {
        let mut weight = 1.0;
        let mut ratio_sum = 0.0;
        for (step, &(s, a)) in traj.steps.iter().enumerate() {
            let base = pi_i.prob(s, a);
            if base == 0.0 {
                return Err(PolicyError::UndefinedRatio { step }.into());
            }
            ratio_sum += weight * (sol.pi_star().prob(s, a) / base).ln();
            weight *= gamma;
        }
        Ok(c * ratio_sum + c * sol.log_z_trajectory(traj, gamma))
    };
    let a1 = eval(&pair.better)?;
    let a2 = eval(&pair.worse)?;
    if !a1.is_finite() || !a2.is_finite() {
        return Err(PreferenceError::NonFiniteEvaluation);
    }
    Ok(sigmoid(a1 - a2))
}

/// Tractable lower bound of the pair probability with the partition factors
/// dropped: a two-way softmax over `C sum_t g^t log(pi/pi_I)` per trajectory.
pub fn bt_lower_bound<T: TrajectoryLike>(
    pair: &PreferencePair<T>,
    policy: &impl RatioPolicy<T>,
    c: f64,
    gamma: f64,
) -> Result<f64, PreferenceError> {
    let discounted = |traj: &T| -> Result<f64, PreferenceError> {
        let mut weight = 1.0;
        let mut acc = 0.0;
        for step in 0..traj.n_steps() {
            acc += weight * policy.log_ratio(traj, step)?;
            weight *= gamma;
        }
        Ok(c * acc)
    };
    let a1 = discounted(&pair.better)?;
    let a2 = discounted(&pair.worse)?;
    if !a1.is_finite() || !a2.is_finite() {
        return Err(PreferenceError::NonFiniteEvaluation);
    }
    Ok(sigmoid(a1 - a2))
}

/// Forms all better-first pairs among one prompt's sampled trajectories.
/// Pairs with exactly tied scores are dropped.
pub fn simulate_preferences<T: TrajectoryLike + Clone>(
    trajs: &[T],
    scores: &[f64],
) -> Result<Vec<PreferencePair<T>>, PreferenceError> {
    if trajs.len() != scores.len() {
        return Err(PreferenceError::LengthMismatch {
            a: trajs.len(),
            b: scores.len(),
        });
    }
    let mut pairs = Vec::new();
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            if scores[i] == scores[j] {
                continue;
            }
            let (bi, wi) = if scores[i] > scores[j] { (i, j) } else { (j, i) };
            pairs.push(PreferencePair::new(
                trajs[bi].clone(),
                trajs[wi].clone(),
                scores[bi],
                scores[wi],
            )?);
        }
    }
    Ok(pairs)
}

/// Fraction of paired indices where `a` beats `b`; ties count one half.
pub fn win_rate(scores_a: &[f64], scores_b: &[f64]) -> Result<f64, PreferenceError> {
    if scores_a.len() != scores_b.len() {
        return Err(PreferenceError::LengthMismatch {
            a: scores_a.len(),
            b: scores_b.len(),
        });
    }
    if scores_a.is_empty() {
        return Ok(0.5);
    }
    let mut wins = 0.0;
    for (a, b) in scores_a.iter().zip(scores_b) {
        if a > b {
            wins += 1.0;
        } else if a == b {
            wins += 0.5;
        }
    }
    Ok(wins / scores_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::DiscreteMdp;

    #[test]
    fn bt_probability_basics() {
        assert_eq!(bt_probability(1.3, 1.3).unwrap(), 0.5);
        let p = bt_probability(3.0_f64.ln(), 0.0).unwrap();
        assert!((p - 0.75).abs() < 1e-14);
        let tiny = bt_probability(0.0, 50.0).unwrap();
        assert!(tiny > 0.0 && (tiny - 1.928_749_847_963_918e-22).abs() < 1e-30);
        assert!(bt_probability(f64::NAN, 0.0).is_err());
        assert!(bt_probability(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn bt_probability_is_translation_invariant_and_complementary() {
        for (x, y) in [(0.4, -1.0), (12.0, 3.5), (-7.0, -7.5)] {
            let p = bt_probability(x, y).unwrap();
            let q = bt_probability(y, x).unwrap();
            assert!((p + q - 1.0).abs() < 1e-12);
            let shifted = bt_probability(x + 100.0, y + 100.0).unwrap();
            assert!((p - shifted).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_form_matches_raw_rewards() {
        let mdp = DiscreteMdp::new(
            3,
            2,
            vec![0.2, 0.8, 0.5, 0.1, 0.9, 0.3],
            vec![1, 2, 2, 0, 0, 1],
            3,
            vec![0.5, 0.5, 0.0],
        )
        .unwrap();
        let pi = PolicyTable::new(3, 2, vec![0.6, 0.4, 0.25, 0.75, 0.5, 0.5]).unwrap();
        let (c, gamma) = (1.3, 0.9);
        let sol = mdp.solve_regularized(&pi, c).unwrap();
        let trajs = mdp.enumerate_trajectories(1 << 20).unwrap();
        for i in 0..trajs.len() {
            for j in 0..trajs.len() {
                let e1 = mdp.discounted_return(&trajs[i], gamma).unwrap();
                let e2 = mdp.discounted_return(&trajs[j], gamma).unwrap();
                if !(e1 > e2) {
                    continue;
                }
                let pair =
                    PreferencePair::new(trajs[i].clone(), trajs[j].clone(), e1, e2).unwrap();
                let exact = bt_probability_exact(&pair, &sol, &pi, c, gamma).unwrap();
                let raw = bt_probability(e1, e2).unwrap();
                assert!((exact - raw).abs() < 1e-8, "exact {exact} raw {raw}");
            }
        }
    }

    #[test]
    fn exact_form_carries_shaping_through_partitions() {
        let mdp = DiscreteMdp::new(
            2,
            2,
            vec![0.9, 0.1, 0.4, 0.6],
            vec![1, 0, 0, 1],
            2,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = PolicyTable::uniform(2, 2);
        let (c, gamma) = (1.0, 0.9);
        let trajs = mdp.enumerate_trajectories(1 << 10).unwrap();
        let e: Vec<f64> = trajs
            .iter()
            .map(|t| mdp.discounted_return(t, gamma).unwrap())
            .collect();
        let (bi, wi) = (0, 1);
        let (bi, wi) = if e[bi] > e[wi] { (bi, wi) } else { (wi, bi) };
        let pair = PreferencePair::new(trajs[bi].clone(), trajs[wi].clone(), e[bi], e[wi]).unwrap();

        let sol = mdp.solve_regularized(&pi, c).unwrap();
        let p_base = bt_probability_exact(&pair, &sol, &pi, c, gamma).unwrap();
        assert!((p_base - sigmoid(e[bi] - e[wi])).abs() < 1e-10);

        // A state-constant shift moves both trajectories' Z(tau) equally, so
        // the exact probability is unchanged.
        let const_phi = crate::mdp::ShapingFunction::new(vec![1.7, 1.7]).unwrap();
        let sol_const = mdp.shape(&const_phi).solve_regularized(&pi, c).unwrap();
        let p_const = bt_probability_exact(&pair, &sol_const, &pi, c, gamma).unwrap();
        assert!((p_const - p_base).abs() < 1e-8);

        // A general shift enters only through the partition factors: the
        // shaped value equals sigma(delta_e + delta of the discounted Phi sums).
        let phi = crate::mdp::ShapingFunction::new(vec![3.0, -0.7]).unwrap();
        let sol_shaped = mdp.shape(&phi).solve_regularized(&pi, c).unwrap();
        let p_shaped = bt_probability_exact(&pair, &sol_shaped, &pi, c, gamma).unwrap();
        let shift = phi.discounted_sum(&pair.better, gamma)
            - phi.discounted_sum(&pair.worse, gamma);
        let expected = sigmoid((e[bi] - e[wi]) + shift);
        assert!((p_shaped - expected).abs() < 1e-8);
    }

    #[test]
    fn lower_bound_symmetry_cases() {
        let base = PolicyTable::uniform(2, 2);
        let pol = crate::policy::TabularSoftmaxPolicy::at_base(&base);
        let t1 = Trajectory::new(0, vec![(0, 0), (1, 1)]);
        let t2 = Trajectory::new(0, vec![(1, 0), (0, 1)]);
        let pair = PreferencePair::new(t1, t2, 1.0, 0.0).unwrap();
        // pi = pi_I: all ratios zero.
        let p = bt_lower_bound(&pair, &pol, 2.0, 0.9).unwrap();
        assert!((p - 0.5).abs() < 1e-14);
    }

    #[test]
    fn simulate_preferences_counts() {
        let mk = |p| Trajectory::new(p, vec![(0, 0)]);
        let trajs = vec![mk(3), mk(3)];
        let pairs = simulate_preferences(&trajs, &[3.0, 1.0]).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].better_score, 3.0);

        assert!(simulate_preferences(&trajs, &[5.0, 5.0]).unwrap().is_empty());

        let five: Vec<Trajectory> = (0..5).map(|_| mk(0)).collect();
        let pairs = simulate_preferences(&five, &[0.1, 0.5, 0.3, 0.9, 0.7]).unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|p| p.better_score > p.worse_score));

        assert!(simulate_preferences(&five, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn win_rate_cases() {
        assert_eq!(win_rate(&[1.0, 2.0], &[0.0, 3.0]).unwrap(), 0.5);
        assert_eq!(win_rate(&[4.0, 4.0], &[4.0, 4.0]).unwrap(), 0.5);
        assert_eq!(win_rate(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(win_rate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pair_validation() {
        let t1 = Trajectory::new(0, vec![(0, 0)]);
        let t2 = Trajectory::new(1, vec![(0, 0)]);
        assert!(matches!(
            PreferencePair::new(t1.clone(), t2, 1.0, 0.0),
            Err(PreferenceError::PromptMismatch { .. })
        ));
        let short = Trajectory::new(0, vec![]);
        assert!(matches!(
            PreferencePair::new(t1.clone(), short, 1.0, 0.0),
            Err(PreferenceError::UnequalHorizons { .. })
        ));
        assert!(matches!(
            PreferencePair::new(t1.clone(), t1, 0.0, 0.0),
            Err(PreferenceError::ScoreOrder { .. })
        ));
    }
}
