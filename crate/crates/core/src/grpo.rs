//! Group-relative policy optimization: standardized group advantages, the
//! clipped token-level surrogate with a KL penalty, and the ascent step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{accumulate_grad, sequence_logprobs, Context, PolicyParams};
use crate::protocol::Trajectory;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrpoError {
    #[error("log-prob sequences differ in length ({new} vs {old})")]
    LengthMismatch { new: usize, old: usize },
}

/// How token terms are averaged into the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One mean over every unmasked token of every rollout.
    #[default]
    Token,
    /// Mean within each rollout, then mean over rollouts.
    Rollout,
}

impl std::str::FromStr for Averaging {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "token" => Ok(Self::Token),
            "rollout" => Ok(Self::Rollout),
            _ => Err(format!("unknown averaging `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub eps_std: f64,
    pub lr: f64,
    pub averaging: Averaging,
    pub optimizer: Optimizer,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_eps: 0.2,
            beta: 1e-3,
            eps_std: 1e-8,
            lr: 1e-2,
            averaging: Averaging::Token,
            optimizer: Optimizer::Adam,
        }
    }
}

/// `(σ_i − mean) / (population std + eps_std)`; exactly zero for a group
/// of identical rewards.
pub fn compute_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_std;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

pub fn importance_ratio(new_lp: &[f64], old_lp: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if new_lp.len() != old_lp.len() {
        return Err(GrpoError::LengthMismatch {
            new: new_lp.len(),
            old: old_lp.len(),
        });
    }
    Ok(new_lp.iter().zip(old_lp).map(|(n, o)| (n - o).exp()).collect())
}

/// One sampled rollout with the bookkeeping the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Prompt tokens and conditioning images.
    pub context: Context,
    /// Generated stream, retrieve segments included.
    pub tokens: Vec<TokenId>,
    /// `true` where the token is excluded from the loss.
    pub mask: Vec<bool>,
    /// Log-probs under the sampling policy.
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn from_trajectory(traj: &Trajectory, theta_old: &PolicyParams, reward: f64) -> Self {
        let context = Context {
            tokens: traj.prompt_tokens.clone(),
            images: traj.images.clone(),
        };
        let old_logprobs = sequence_logprobs(theta_old, &context, &traj.tokens);
        Rollout {
            context,
            tokens: traj.tokens.clone(),
            mask: traj.loss_mask(),
            old_logprobs,
            reward,
        }
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

/// Rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(rollouts: Vec<Rollout>) -> Self {
        assert!(rollouts.len() >= 2, "a group needs at least two rollouts");
        RolloutGroup { rollouts }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn advantages(&self, eps_std: f64) -> Vec<f64> {
        compute_advantages(&self.rewards(), eps_std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// Surrogate minus β times the KL estimate.
    pub j: f64,
    pub surrogate: f64,
    /// Mean per-token KL estimate.
    pub kl: f64,
    pub gradient: PolicyParams,
    pub tokens: usize,
}

/// Per-token KL estimator `r − ln r − 1` with `r = π_ref / π`.
pub fn kl_estimate(logp: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp;
    d.exp() - d - 1.0
}

/// Clipped surrogate term and its derivative with respect to `log π`.
fn clipped(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let bounded = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= bounded {
        (unclipped, unclipped)
    } else {
        (bounded, 0.0)
    }
}

struct Partial {
    surrogate: f64,
    kl: f64,
    grad: PolicyParams,
}

pub fn grpo_objective(group: &RolloutGroup, theta: &PolicyParams, theta_ref: &PolicyParams, cfg: &GrpoConfig) -> Objective {
    batch_objective(std::slice::from_ref(group), theta, theta_ref, cfg)
}

/// Objective over several groups, averaged jointly. Advantages are
/// standardized within each group.
pub fn batch_objective(groups: &[RolloutGroup], theta: &PolicyParams, theta_ref: &PolicyParams, cfg: &GrpoConfig) -> Objective {
    let mut work = Vec::new();
    for g in groups {
        for (r, a) in g.rollouts.iter().zip(g.advantages(cfg.eps_std)) {
            work.push((r, a));
        }
    }
    let total_tokens: usize = work.iter().map(|(r, _)| r.unmasked()).sum();
    let rollouts_with_tokens = work.iter().filter(|(r, _)| r.unmasked() > 0).count();
    let scale = |r: &Rollout| -> f64 {
        match cfg.averaging {
            Averaging::Token if total_tokens > 0 => 1.0 / total_tokens as f64,
            Averaging::Rollout if r.unmasked() > 0 => 1.0 / (rollouts_with_tokens * r.unmasked()) as f64,
            _ => 0.0,
        }
    };

    let parts: Vec<Partial> = work
        .par_iter()
        .map(|&(r, adv)| {
            let s = scale(r);
            let lp = sequence_logprobs(theta, &r.context, &r.tokens);
            let lp_ref = sequence_logprobs(theta_ref, &r.context, &r.tokens);
            let mut weights = vec![0.0; r.tokens.len()];
            let (mut surrogate, mut kl) = (0.0, 0.0);
            for t in 0..r.tokens.len() {
                if r.mask[t] {
                    continue;
                }
                let ratio = (lp[t] - r.old_logprobs[t]).exp();
                let (term, dterm) = clipped(ratio, adv, cfg.clip_eps);
                let k = kl_estimate(lp[t], lp_ref[t]);
                let dk = 1.0 - (lp_ref[t] - lp[t]).exp();
                surrogate += s * term;
                kl += s * k;
                weights[t] = s * (dterm - cfg.beta * dk);
            }
            let mut grad = theta.zeros_like();
            accumulate_grad(theta, &r.context, &r.tokens, &weights, &mut grad);
            Partial { surrogate, kl, grad }
        })
        .collect();

    let mut gradient = theta.zeros_like();
    let (mut surrogate, mut kl) = (0.0, 0.0);
    for p in parts {
        surrogate += p.surrogate;
        kl += p.kl;
        gradient.axpy(1.0, &p.grad);
    }
    Objective {
        j: surrogate - cfg.beta * kl,
        surrogate,
        kl,
        gradient,
        tokens: total_tokens,
    }
}

/// Gradient ascent: `θ + lr · ∇J`.
pub fn policy_step(theta: &PolicyParams, gradient: &PolicyParams, lr: f64) -> PolicyParams {
    let mut next = theta.clone();
    next.axpy(lr, gradient);
    next
}

/// Adam state over a parameter vector.
pub struct Adam {
    m: PolicyParams,
    v: PolicyParams,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(theta: &PolicyParams) -> Self {
        Adam {
            m: theta.zeros_like(),
            v: theta.zeros_like(),
            t: 0,
        }
    }

    /// Ascent step along `grad`.
    pub fn step(&mut self, theta: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let updates = self.m.values_mut().zip(self.v.values_mut()).zip(grad.values());
        for (x, ((m, v), &g)) in theta.values_mut().zip(updates) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *x += lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Update rule applied to the objective gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer `{s}`")),
        }
    }
}
