//! Group-relative policy optimization of the block reasoner.
//!
//! Each step samples a group of outputs per prompt from a frozen snapshot of
//! the policy, scores them with the verifiable reward, normalizes the rewards
//! within the group and ascends the clipped surrogate objective.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BlockLabelSet;
use crate::policy::{group_logprobs_graph, BlockFeatures, PolicyError, PolicySample, ReasonerPolicy};
use crate::reward::{total_reward, RewardConfig};
use crate::tensor::{adam_step, AdamConfig, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("grpo config: {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("prompt batch is empty")]
    EmptyBatch,
    #[error("{ratios} ratios but {advantages} advantages")]
    Length { ratios: usize, advantages: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_std: f64,
    pub eps_clip: f64,
    pub updates_per_group: usize,
    pub kl_coef: f64,
    pub lr: f64,
    pub steps: usize,
    /// Prompts whose groups are pooled into one update.
    pub prompts_per_step: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_std: 1e-8,
            eps_clip: 0.2,
            updates_per_group: 1,
            kl_coef: 0.0,
            lr: 1e-2,
            steps: 200,
            prompts_per_step: 8,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, msg: impl Into<String>) -> GrpoError {
    GrpoError::Config { field, msg: msg.into() }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size == 0 {
            return Err(bad("group_size", "must be at least 1"));
        }
        if !(self.eps_std > 0.0) {
            return Err(bad("eps_std", format!("must be > 0, got {}", self.eps_std)));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(bad("eps_clip", format!("must lie in (0, 1), got {}", self.eps_clip)));
        }
        if self.updates_per_group == 0 {
            return Err(bad("updates_per_group", "must be at least 1"));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(bad("kl_coef", format!("must be >= 0, got {}", self.kl_coef)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be >= 0, got {}", self.lr)));
        }
        if self.prompts_per_step == 0 {
            return Err(bad("prompts_per_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// `(r_i - μ) / max(σ, eps_std)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    // A summed mean of equal values can miss them by an ulp, which the
    // eps_std floor would then blow up.
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(eps_std);
    rewards.iter().map(|r| (r - mu) / denom).collect()
}

/// `mean_i min(ρ_i Â_i, clip(ρ_i, 1-ε, 1+ε) Â_i)`.
pub fn clipped_objective(ratios: &[f64], advantages: &[f64], eps_clip: f64) -> Result<f64, GrpoError> {
    if ratios.len() != advantages.len() {
        return Err(GrpoError::Length {
            ratios: ratios.len(),
            advantages: advantages.len(),
        });
    }
    if ratios.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a))
        .sum();
    Ok(total / ratios.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Prompt {
    pub id: String,
    pub features: BlockFeatures,
    pub gt: BlockLabelSet,
}

#[derive(Debug, Clone)]
pub struct SampleGroup {
    pub prompt_id: String,
    pub samples: Vec<PolicySample>,
    pub rewards: Vec<f64>,
    pub recalls: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_logprobs: Vec<f64>,
}

/// Draws `group_size` outputs for `prompt` from `snapshot` and scores them.
pub fn sample_group(
    snapshot: &ReasonerPolicy,
    prompt: &Prompt,
    cfg: &GrpoConfig,
    reward: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleGroup, GrpoError> {
    let mut samples = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        samples.push(snapshot.sample(&prompt.features, rng)?);
    }
    let scores: Vec<_> = samples.iter().map(|s| total_reward(&s.output.raw, &prompt.gt, reward)).collect();
    let rewards: Vec<f64> = scores.iter().map(|b| b.total).collect();
    Ok(SampleGroup {
        prompt_id: prompt.id.clone(),
        advantages: group_advantages(&rewards, cfg.eps_std),
        recalls: scores.iter().map(|b| b.recall).collect(),
        old_logprobs: samples.iter().map(|s| s.logprob).collect(),
        rewards,
        samples,
    })
}

/// Records the surrogate to be minimized: the negated clipped objective
/// averaged over groups, plus the optional log-ratio penalty. Also returns
/// the per-sample ratio variables.
fn surrogate_graph(
    g: &mut Graph,
    policy: &ReasonerPolicy,
    prompts: &[&Prompt],
    groups: &[SampleGroup],
    cfg: &GrpoConfig,
) -> Result<(Var, Vec<Var>, Var), GrpoError> {
    let mut objectives = Vec::with_capacity(groups.len());
    let mut penalties = Vec::with_capacity(groups.len());
    let mut ratio_vars = Vec::with_capacity(groups.len());
    for (prompt, group) in prompts.iter().zip(groups) {
        let n = group.samples.len();
        let z = policy.logits_graph(g, &prompt.features)?;
        let flags: Vec<Vec<bool>> = group.samples.iter().map(|s| s.blocks.to_flags()).collect();
        let lp = group_logprobs_graph(g, z, &flags)?;
        let old = g.input(Tensor::new(vec![n, 1], group.old_logprobs.clone())?);
        let log_ratio = g.sub(lp, old)?;
        let ratio = g.exp(log_ratio);
        let adv = g.input(Tensor::new(vec![n, 1], group.advantages.clone())?);
        let plain = g.mul(ratio, adv)?;
        let clipped = g.clamp(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip);
        let clipped = g.mul(clipped, adv)?;
        let term = g.minimum(plain, clipped)?;
        objectives.push(g.mean(term));
        penalties.push(g.mean(log_ratio));
        ratio_vars.push(ratio);
    }
    let parts = objectives.iter().map(|&v| g.reshape(v, &[1])).collect::<Result<Vec<_>, _>>()?;
    let obj_parts = g.concat(&parts, 0)?;
    let objective = g.mean(obj_parts);
    let mut loss = g.neg(objective);
    if cfg.kl_coef > 0.0 {
        let parts = penalties.iter().map(|&v| g.reshape(v, &[1])).collect::<Result<Vec<_>, _>>()?;
        let pen_parts = g.concat(&parts, 0)?;
        let pen = g.mean(pen_parts);
        let pen = g.scale(pen, cfg.kl_coef);
        loss = g.add(loss, pen)?;
    }
    Ok((loss, ratio_vars, objective))
}

/// Objective value and its gradient with respect to every policy parameter,
/// flattened in parameter order, for fixed groups.
pub fn objective_gradient(
    policy: &ReasonerPolicy,
    prompts: &[&Prompt],
    groups: &[SampleGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>), GrpoError> {
    let mut g = Graph::new();
    let (loss, _, objective) = surrogate_graph(&mut g, policy, prompts, groups, cfg)?;
    let mut scratch = policy.clone();
    scratch.params_mut().zero_grad();
    g.backward(loss)?.accumulate(scratch.params_mut());
    let grads = scratch
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter().map(|v| -v))
        .collect();
    Ok((g.value(objective).item(), grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_recall: f64,
    pub clip_frac: f64,
    pub objective: f64,
}

/// One optimization step over `prompts`: sample groups from `snapshot`,
/// then apply `updates_per_group` Adam updates to `policy`. A step whose
/// gradient is identically zero leaves the parameters untouched.
pub fn grpo_step(
    policy: &mut ReasonerPolicy,
    snapshot: &ReasonerPolicy,
    prompts: &[&Prompt],
    cfg: &GrpoConfig,
    reward: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats, GrpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let groups = prompts
        .iter()
        .map(|p| sample_group(snapshot, p, cfg, reward, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let count = (groups.len() * cfg.group_size) as f64;
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / count;
    let mean_recall = groups.iter().flat_map(|g| &g.recalls).sum::<f64>() / count;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut first = None;
    for _ in 0..cfg.updates_per_group {
        let mut g = Graph::new();
        let (loss, ratios, objective) = surrogate_graph(&mut g, policy, prompts, &groups, cfg)?;
        if first.is_none() {
            let clipped = ratios
                .iter()
                .flat_map(|&r| g.value(r).data().to_vec())
                .filter(|r| (r - 1.0).abs() > cfg.eps_clip)
                .count();
            first = Some((clipped as f64 / count, g.value(objective).item()));
        }
        let store = policy.params_mut();
        store.zero_grad();
        g.backward(loss)?.accumulate(store);
        if store.total_grad_norm() == 0.0 {
            break;
        }
        adam_step(store, &adam);
    }
    let (clip_frac, objective) = first.expect("at least one update");
    Ok(StepStats {
        step: 0,
        mean_reward,
        mean_recall,
        clip_frac,
        objective,
    })
}

/// Runs `cfg.steps` steps over shuffled prompt batches, refreshing the
/// snapshot before every step. Each step's statistics are appended to `log`
/// as one JSON line.
pub fn grpo_train(
    policy: &mut ReasonerPolicy,
    prompts: &[Prompt],
    cfg: &GrpoConfig,
    reward: &RewardConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>, GrpoError> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if prompts.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.prompts_per_step);
        while batch.len() < cfg.prompts_per_step {
            if order.is_empty() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&prompts[order.pop().expect("refilled")]);
        }
        let snapshot = policy.clone();
        let mut stats = grpo_step(policy, &snapshot, &batch, cfg, reward, &mut rng)?;
        stats.step = step;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &stats).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        history.push(stats);
    }
    Ok(history)
}
