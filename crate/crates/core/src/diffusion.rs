//! Conditional Gaussian diffusion over 2-D data: linear beta schedule,
//! denoising pretraining of the base policy, trajectory sampling with stored
//! latents, exact per-step Gaussian log densities, optional classifier-free
//! guidance, and the synthetic mixture-density preference scorer.
//!
//! MDP step `i` (0-based, `i = 0` noisiest) corresponds to diffusion time
//! `t = N - i`: the step observes latent `x_t` and emits `x_{t-1}`. A stored
//! trajectory keeps the full latent sequence `x_N .. x_0` plus the generating
//! policy's per-step means, so any policy's log density of any stored step
//! can be recomputed exactly later.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::nn::{adamw_step, AdamWState, Activation, DenseNet, LowRankAdapter, NnError};
use crate::policy::{DifferentiableRatioPolicy, PolicyError, RatioPolicy, TrajectoryLike};
use crate::preference::win_rate;
use crate::rngutil::{derive_seed, StreamKind};

/// Data dimensionality of the toy tier.
pub const DATA_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got ({start}, {end})")]
    ScheduleBounds { start: f64, end: f64 },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),
    #[error("sampling diverged: non-finite latent at step {step}")]
    SamplingDiverged { step: usize },
    #[error("pretraining diverged: non-finite loss at iteration {iter}")]
    PretrainDiverged { iter: usize },
    #[error("prompt set: {0}")]
    InvalidPromptSet(String),
    #[error("prompt document error at line {line}, column {column}: {message}")]
    Document {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Linear beta schedule with derived `alpha`, cumulative `alpha_bar`, and the
/// per-step reverse variance.
///
/// Index `t - 1` holds the quantities for diffusion time `t` in `1..=N`. The
/// reverse variance is the posterior `beta_tilde_t`; at `t = 1` the posterior
/// is exactly zero (it would make the final action a point mass), so `beta_1`
/// is used there to keep every step's density proper.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub n_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if n_steps == 0 {
            return Err(DiffusionError::EmptySchedule);
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::ScheduleBounds {
                start: beta_start,
                end: beta_end,
            });
        }
        let mut beta = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let frac = if n_steps == 1 {
                0.0
            } else {
                i as f64 / (n_steps - 1) as f64
            };
            beta.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n_steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut sigma2 = Vec::with_capacity(n_steps);
        for t in 1..=n_steps {
            if t == 1 {
                sigma2.push(beta[0]);
            } else {
                sigma2.push((1.0 - alpha_bar[t - 2]) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]);
            }
        }
        Ok(Self {
            n_steps,
            beta,
            alpha,
            alpha_bar,
            sigma2,
        })
    }

    /// Reverse variance for MDP step `i` (`0..n_steps`).
    pub fn step_sigma2(&self, step: usize) -> f64 {
        self.sigma2[self.n_steps - 1 - step]
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub name: String,
    pub components: Vec<MixtureComponent>,
}

/// Named 2-D Gaussian-mixture targets; one per prompt. The mixture doubles as
/// data source for pretraining and as the preference scorer (log density of a
/// final sample, higher is better).
#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self, DiffusionError> {
        if prompts.is_empty() {
            return Err(DiffusionError::InvalidPromptSet("no prompts".into()));
        }
        for p in &prompts {
            if p.components.is_empty() {
                return Err(DiffusionError::InvalidPromptSet(format!(
                    "prompt {:?} has no components",
                    p.name
                )));
            }
            let mut weight_sum = 0.0;
            for (i, c) in p.components.iter().enumerate() {
                if c.mean.len() != DATA_DIM {
                    return Err(DiffusionError::InvalidPromptSet(format!(
                        "prompt {:?} component {i}: mean must have {DATA_DIM} entries",
                        p.name
                    )));
                }
                if !(c.std > 0.0) {
                    return Err(DiffusionError::InvalidPromptSet(format!(
                        "prompt {:?} component {i}: std must be positive",
                        p.name
                    )));
                }
                if !(c.weight >= 0.0) {
                    return Err(DiffusionError::InvalidPromptSet(format!(
                        "prompt {:?} component {i}: weight must be non-negative",
                        p.name
                    )));
                }
                weight_sum += c.weight;
            }
            if (weight_sum - 1.0).abs() > 1e-9 {
                return Err(DiffusionError::InvalidPromptSet(format!(
                    "prompt {:?}: weights sum to {weight_sum}, expected 1",
                    p.name
                )));
            }
        }
        Ok(Self { prompts })
    }

    /// Four desk-scale targets graded by the scorer: one blob, four blobs,
    /// two separated blobs, one off-center blob.
    pub fn builtin_default() -> Self {
        let comp = |mx: f64, my: f64, std: f64, weight: f64| MixtureComponent {
            mean: vec![mx, my],
            std,
            weight,
        };
        Self::new(vec![
            Prompt {
                name: "single".into(),
                components: vec![comp(2.0, 2.0, 0.5, 1.0)],
            },
            Prompt {
                name: "four".into(),
                components: vec![
                    comp(2.0, 2.0, 0.5, 0.25),
                    comp(-2.0, 2.0, 0.5, 0.25),
                    comp(-2.0, -2.0, 0.5, 0.25),
                    comp(2.0, -2.0, 0.5, 0.25),
                ],
            },
            Prompt {
                name: "pair".into(),
                components: vec![comp(-2.5, 0.0, 0.5, 0.5), comp(2.5, 0.0, 0.5, 0.5)],
            },
            Prompt {
                name: "offcenter".into(),
                components: vec![comp(3.0, -1.5, 0.6, 1.0)],
            },
        ])
        .expect("builtin prompt set is valid")
    }

    /// Parses `[{name, components: [{mean, std, weight}]}]`.
    pub fn from_json_str(text: &str) -> Result<Self, DiffusionError> {
        let prompts: Vec<Prompt> =
            serde_json::from_str(text).map_err(|e| DiffusionError::Document {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        Self::new(prompts)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, prompt_id: usize) -> Result<&Prompt, DiffusionError> {
        self.prompts
            .get(prompt_id)
            .ok_or(DiffusionError::UnknownPrompt(prompt_id))
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    /// Scorer: log density of a final sample under the prompt's target
    /// mixture. Higher is more preferred.
    pub fn score(&self, prompt_id: usize, x0: &[f64]) -> Result<f64, DiffusionError> {
        let prompt = self.get(prompt_id)?;
        let d = DATA_DIM as f64;
        let mut max_term = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(prompt.components.len());
        for c in &prompt.components {
            let var = c.std * c.std;
            let sq: f64 = x0
                .iter()
                .zip(&c.mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum();
            let log_term = if c.weight > 0.0 {
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                    - sq / (2.0 * var)
            } else {
                f64::NEG_INFINITY
            };
            max_term = max_term.max(log_term);
            terms.push(log_term);
        }
        Ok(max_term + terms.iter().map(|t| (t - max_term).exp()).sum::<f64>().ln())
    }

    /// Draws a sample from the prompt's target mixture.
    pub fn sample_target(
        &self,
        prompt_id: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, DiffusionError> {
        let prompt = self.get(prompt_id)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = prompt.components.len() - 1;
        for (i, c) in prompt.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &prompt.components[chosen];
        Ok((0..DATA_DIM)
            .map(|k| c.mean[k] + c.std * standard_normal(rng))
            .collect())
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One stored reverse chain: every latent `x_N .. x_0`, the generating
/// policy's per-step means, and the seed that produced it.
#[derive(Debug, Clone)]
pub struct DiffusionTrajectory {
    pub prompt_id: usize,
    pub latents: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub seed: u64,
}

impl DiffusionTrajectory {
    pub fn final_sample(&self) -> &[f64] {
        self.latents.last().expect("trajectory has latents")
    }
}

impl TrajectoryLike for DiffusionTrajectory {
    fn n_steps(&self) -> usize {
        self.latents.len() - 1
    }

    fn prompt(&self) -> usize {
        self.prompt_id
    }
}

/// Noise-predictor policy: a dense net over
/// `(x, sinusoidal time embedding, prompt one-hot)` with an optional
/// low-rank adapter and classifier-free guidance weight.
///
/// Without an adapter (or with a zero-initialized one) the policy is exactly
/// the base `pi_I`.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub net: DenseNet,
    pub adapter: Option<LowRankAdapter>,
    pub guidance: f64,
    pub schedule: DiffusionSchedule,
    pub n_prompts: usize,
    pub time_emb_dim: usize,
}

impl DiffusionPolicy {
    pub fn new(
        schedule: DiffusionSchedule,
        n_prompts: usize,
        hidden: &[usize],
        time_emb_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(time_emb_dim % 2 == 0, "time embedding dim must be even");
        let mut widths = vec![DATA_DIM + time_emb_dim + n_prompts];
        widths.extend_from_slice(hidden);
        widths.push(DATA_DIM);
        let net = DenseNet::random(widths, activation, rng);
        Self {
            net,
            adapter: None,
            guidance: 1.0,
            schedule,
            n_prompts,
            time_emb_dim,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.schedule.n_steps
    }

    /// A view of the frozen base: same net and schedule, no adapter.
    pub fn base_clone(&self) -> Self {
        Self {
            adapter: None,
            ..self.clone()
        }
    }

    fn embed(&self, x: &[f64], t: usize, prompt: Option<usize>) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.net.input_width());
        input.extend_from_slice(x);
        let half = self.time_emb_dim / 2;
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half.max(1) as f64);
            input.push((t as f64 * freq).sin());
            input.push((t as f64 * freq).cos());
        }
        let mut one_hot = vec![0.0; self.n_prompts];
        if let Some(p) = prompt {
            one_hot[p] = 1.0;
        }
        input.extend_from_slice(&one_hot);
        input
    }

    fn predict(&self, use_adapter: bool, x: &[f64], t: usize, prompt: Option<usize>) -> Vec<f64> {
        let input = self.embed(x, t, prompt);
        let adapter = if use_adapter {
            self.adapter.as_ref()
        } else {
            None
        };
        self.net
            .forward(adapter, &input)
            .expect("embedding width matches the net input")
    }

    /// Classifier-free-guided noise prediction
    /// `eps_uncond + w (eps_cond - eps_uncond)`; `w = 1` is conditional only.
    fn guided_noise(&self, use_adapter: bool, x: &[f64], t: usize, prompt_id: usize) -> Vec<f64> {
        let cond = self.predict(use_adapter, x, t, Some(prompt_id));
        if self.guidance == 1.0 {
            return cond;
        }
        let uncond = self.predict(use_adapter, x, t, None);
        cond.iter()
            .zip(&uncond)
            .map(|(c, u)| u + self.guidance * (c - u))
            .collect()
    }

    /// Posterior mean `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
    fn step_mean_inner(
        &self,
        use_adapter: bool,
        x: &[f64],
        t: usize,
        prompt_id: usize,
    ) -> Vec<f64> {
        let eps = self.guided_noise(use_adapter, x, t, prompt_id);
        let beta = self.schedule.beta[t - 1];
        let abar = self.schedule.alpha_bar[t - 1];
        let alpha = self.schedule.alpha[t - 1];
        let coef = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        x.iter()
            .zip(&eps)
            .map(|(xi, ei)| (xi - coef * ei) * inv_sqrt_alpha)
            .collect()
    }

    /// Sampling-distribution mean at diffusion time `t` under the current
    /// parameters (adapter included when present).
    pub fn step_mean(&self, x: &[f64], t: usize, prompt_id: usize) -> Vec<f64> {
        self.step_mean_inner(true, x, t, prompt_id)
    }

    /// Samples one reverse chain from `x_N ~ N(0, I)`. Deterministic given
    /// `seed`; latents and generating means are all stored.
    pub fn sample_trajectory(
        &self,
        prompt_id: usize,
        seed: u64,
    ) -> Result<DiffusionTrajectory, DiffusionError> {
        if prompt_id >= self.n_prompts {
            return Err(DiffusionError::UnknownPrompt(prompt_id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_steps();
        let mut latents = Vec::with_capacity(n + 1);
        let mut means = Vec::with_capacity(n);
        let mut x: Vec<f64> = (0..DATA_DIM).map(|_| standard_normal(&mut rng)).collect();
        latents.push(x.clone());
        for i in 0..n {
            let t = n - i;
            let mean = self.step_mean(&x, t, prompt_id);
            let sigma = self.schedule.step_sigma2(i).sqrt();
            let next: Vec<f64> = if sigma > 0.0 {
                mean.iter()
                    .map(|m| m + sigma * standard_normal(&mut rng))
                    .collect()
            } else {
                mean.clone()
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::SamplingDiverged { step: i });
            }
            means.push(mean);
            latents.push(next.clone());
            x = next;
        }
        Ok(DiffusionTrajectory {
            prompt_id,
            latents,
            means,
            seed,
        })
    }

    fn gaussian_log_density(action: &[f64], mean: &[f64], sigma2: f64) -> f64 {
        let d = DATA_DIM as f64;
        let sq: f64 = action
            .iter()
            .zip(mean)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * sigma2).ln() - sq / (2.0 * sigma2)
    }

    fn step_log_prob_inner(
        &self,
        use_adapter: bool,
        traj: &DiffusionTrajectory,
        step: usize,
    ) -> Result<f64, PolicyError> {
        let n = traj.n_steps();
        if step >= n {
            return Err(PolicyError::StepOutOfRange { step, horizon: n });
        }
        let sigma2 = self.schedule.step_sigma2(step);
        if sigma2 <= 0.0 {
            return Err(PolicyError::DegenerateDensity { step });
        }
        let t = n - step;
        let mean = self.step_mean_inner(use_adapter, &traj.latents[step], t, traj.prompt_id);
        let lp = Self::gaussian_log_density(&traj.latents[step + 1], &mean, sigma2);
        if !lp.is_finite() {
            return Err(PolicyError::NonFinite { step });
        }
        Ok(lp)
    }

    /// Exact diagonal-Gaussian log density of the stored action at `step`
    /// under this policy's mean and the schedule's variance.
    pub fn step_log_prob(
        &self,
        traj: &DiffusionTrajectory,
        step: usize,
    ) -> Result<f64, PolicyError> {
        self.step_log_prob_inner(true, traj, step)
    }

    /// Same density under the frozen base (adapter ignored).
    pub fn step_log_prob_base(
        &self,
        traj: &DiffusionTrajectory,
        step: usize,
    ) -> Result<f64, PolicyError> {
        self.step_log_prob_inner(false, traj, step)
    }

    /// Denoising pretraining of the base net (no adapter): regresses
    /// predicted noise onto the true forward-noising noise, conditioned on
    /// the prompt with occasional unconditional (dropped-prompt) batches so
    /// guidance has a trained branch.
    pub fn pretrain_base(
        &mut self,
        prompt_set: &PromptSet,
        cfg: &PretrainConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, DiffusionError> {
        assert!(
            self.adapter.is_none(),
            "pretraining trains the base; detach the adapter first"
        );
        assert_eq!(prompt_set.len(), self.n_prompts, "prompt set size mismatch");
        let n_params = self.net.n_params();
        let mut opt = AdamWState::new(n_params);
        let mut losses = Vec::with_capacity(cfg.n_iters);
        let n = self.n_steps();
        for iter in 0..cfg.n_iters {
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let prompt_id = rng.gen_range(0..self.n_prompts);
                let drop_cond = rng.gen::<f64>() < cfg.cond_dropout;
                let x0 = prompt_set.sample_target(prompt_id, rng)?;
                let t = rng.gen_range(1..=n);
                let abar = self.schedule.alpha_bar[t - 1];
                let noise: Vec<f64> = (0..DATA_DIM).map(|_| standard_normal(rng)).collect();
                let xt: Vec<f64> = x0
                    .iter()
                    .zip(&noise)
                    .map(|(x, e)| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
                    .collect();
                let prompt = if drop_cond { None } else { Some(prompt_id) };
                let input = self.embed(&xt, t, prompt);
                let pred = self.net.forward(None, &input)?;
                let residual: Vec<f64> = pred.iter().zip(&noise).map(|(p, e)| p - e).collect();
                batch_loss +=
                    residual.iter().map(|r| r * r).sum::<f64>() / DATA_DIM as f64;
                // d(mean residual^2)/d(pred) = 2 residual / d, averaged over the batch
                let upstream: Vec<f64> = residual
                    .iter()
                    .map(|r| 2.0 * r / (DATA_DIM as f64 * cfg.batch_size as f64))
                    .collect();
                self.net
                    .backward_accumulate(None, &input, &upstream, 1.0, &mut grad)?;
            }
            batch_loss /= cfg.batch_size as f64;
            if !batch_loss.is_finite() {
                return Err(DiffusionError::PretrainDiverged { iter });
            }
            adamw_step(
                &mut self.net.params,
                &grad,
                &mut opt,
                cfg.lr,
                cfg.weight_decay,
            )?;
            losses.push(batch_loss);
        }
        Ok(losses)
    }
}

/// Pretraining hyperparameters for the base noise predictor.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub n_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_iters: 3000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            cond_dropout: 0.1,
        }
    }
}

impl RatioPolicy<DiffusionTrajectory> for DiffusionPolicy {
    fn log_ratio(&self, traj: &DiffusionTrajectory, step: usize) -> Result<f64, PolicyError> {
        if self.adapter.is_none() {
            // Policy is exactly the base.
            let n = traj.n_steps();
            if step >= n {
                return Err(PolicyError::StepOutOfRange { step, horizon: n });
            }
            if self.schedule.step_sigma2(step) <= 0.0 {
                return Err(PolicyError::DegenerateDensity { step });
            }
            return Ok(0.0);
        }
        let lp = self.step_log_prob(traj, step)?;
        let lp_base = self.step_log_prob_base(traj, step)?;
        Ok(lp - lp_base)
    }
}

impl DifferentiableRatioPolicy<DiffusionTrajectory> for DiffusionPolicy {
    fn n_trainable(&self) -> usize {
        self.adapter
            .as_ref()
            .map_or(self.net.n_params(), |a| a.n_params())
    }

    fn add_scaled_log_prob_grad(
        &self,
        traj: &DiffusionTrajectory,
        step: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let n = traj.n_steps();
        if step >= n {
            return Err(PolicyError::StepOutOfRange { step, horizon: n });
        }
        let sigma2 = self.schedule.step_sigma2(step);
        if sigma2 <= 0.0 {
            return Err(PolicyError::DegenerateDensity { step });
        }
        let t = n - step;
        let x = &traj.latents[step];
        let action = &traj.latents[step + 1];
        let mean = self.step_mean(x, t, traj.prompt_id);

        // d logp / d mu = (a - mu) / sigma^2 and d mu / d eps_hat = -coef.
        let beta = self.schedule.beta[t - 1];
        let abar = self.schedule.alpha_bar[t - 1];
        let alpha = self.schedule.alpha[t - 1];
        let coef = beta / (alpha.sqrt() * (1.0 - abar).sqrt());
        let upstream: Vec<f64> = action
            .iter()
            .zip(&mean)
            .map(|(a, m)| -scale * coef * (a - m) / sigma2)
            .collect();

        let backprop = |prompt: Option<usize>,
                        weight: f64,
                        grad: &mut [f64]|
         -> Result<(), NnError> {
            if weight == 0.0 {
                return Ok(());
            }
            let input = self.embed(x, t, prompt);
            self.net
                .backward_accumulate(self.adapter.as_ref(), &input, &upstream, weight, grad)
                .map(|_| ())
        };
        let run = if self.guidance == 1.0 {
            backprop(Some(traj.prompt_id), 1.0, grad)
        } else {
            backprop(Some(traj.prompt_id), self.guidance, grad)
                .and_then(|_| backprop(None, 1.0 - self.guidance, grad))
        };
        run.map_err(|_| PolicyError::NonFinite { step })
    }
}

/// Evaluation summary against a baseline with seed-paired sampling.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub per_prompt_mean: Vec<(usize, f64)>,
    pub mean_score: f64,
    pub baseline_mean_score: f64,
    pub win_rate: f64,
    pub n_samples: usize,
}

/// Scores `n_samples` generations per prompt for `policy` and `baseline`,
/// sharing the trajectory seed per `(prompt, index)` pair so the win rate is
/// a paired comparison. Sampling is parallel; results are keyed by task index
/// so thread count cannot change them.
pub fn evaluate_policy(
    policy: &DiffusionPolicy,
    baseline: &DiffusionPolicy,
    prompt_set: &PromptSet,
    prompt_ids: &[usize],
    n_samples: usize,
    master_seed: u64,
) -> Result<EvalMetrics, DiffusionError> {
    assert!(n_samples >= 1);
    let tasks: Vec<(usize, usize)> = prompt_ids
        .iter()
        .flat_map(|&p| (0..n_samples).map(move |j| (p, j)))
        .collect();
    let scored: Vec<Result<(f64, f64), DiffusionError>> = tasks
        .par_iter()
        .map(|&(p, j)| {
            let seed = derive_seed(master_seed, StreamKind::Eval, &[p as u64, j as u64]);
            let ours = policy.sample_trajectory(p, seed)?;
            let theirs = baseline.sample_trajectory(p, seed)?;
            Ok((
                prompt_set.score(p, ours.final_sample())?,
                prompt_set.score(p, theirs.final_sample())?,
            ))
        })
        .collect();

    let mut ours = Vec::with_capacity(tasks.len());
    let mut theirs = Vec::with_capacity(tasks.len());
    for r in scored {
        let (a, b) = r?;
        ours.push(a);
        theirs.push(b);
    }

    let mut per_prompt_mean = Vec::with_capacity(prompt_ids.len());
    for (pi, &p) in prompt_ids.iter().enumerate() {
        let slice = &ours[pi * n_samples..(pi + 1) * n_samples];
        per_prompt_mean.push((p, slice.iter().sum::<f64>() / n_samples as f64));
    }
    let mean_score = ours.iter().sum::<f64>() / ours.len() as f64;
    let baseline_mean_score = theirs.iter().sum::<f64>() / theirs.len() as f64;
    let win = win_rate(&ours, &theirs).expect("equal lengths by construction");
    Ok(EvalMetrics {
        per_prompt_mean,
        mean_score,
        baseline_mean_score,
        win_rate: win,
        n_samples,
    })
}
