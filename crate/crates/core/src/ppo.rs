//! Clipped-surrogate PPO with GAE over fixed-length rollouts.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::digest::config_digest;
use crate::env::{SupplyChainConfig, SupplyChainEnv};
use crate::error::{Error, IoContext, Result};
use crate::netcore::{clip_grad_norm, Adam, AdamConfig, Parameters, Workspace};
use crate::policy::{
    gaussian_action, gaussian_entropy, to_env_action, ActionMode, Actor, ActorConfig, Checkpoint, CheckpointMeta,
    CriticParams, Standardizer,
};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_range: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub n_steps: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_timesteps: u64,
    pub max_grad_norm: f64,
    /// Multiplier applied to rewards seen by the learner only.
    pub reward_scale: f64,
    pub normalize_advantage: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_range: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            ent_coef: 0.01,
            vf_coef: 0.5,
            n_steps: 2048,
            n_epochs: 10,
            batch_size: 64,
            learning_rate: 3e-4,
            total_timesteps: 300_000,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            normalize_advantage: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("ppo.{field}"), reason))
            }
        };
        check(self.clip_range > 0.0 && self.clip_range < 1.0, "clip_range", "must lie in (0, 1)")?;
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda", "must lie in [0, 1]")?;
        check(self.ent_coef >= 0.0 && self.ent_coef.is_finite(), "ent_coef", "must be non-negative")?;
        check(self.vf_coef >= 0.0 && self.vf_coef.is_finite(), "vf_coef", "must be non-negative")?;
        check(self.n_steps >= 1, "n_steps", "must be at least 1")?;
        check(self.n_epochs >= 1, "n_epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.batch_size <= self.n_steps, "batch_size", "must not exceed n_steps")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be positive",
        )?;
        check(self.total_timesteps >= 1, "total_timesteps", "must be at least 1")?;
        check(self.max_grad_norm > 0.0, "max_grad_norm", "must be positive")?;
        check(
            self.reward_scale > 0.0 && self.reward_scale.is_finite(),
            "reward_scale",
            "must be positive",
        )?;
        Ok(())
    }

    pub fn num_updates(&self) -> u64 {
        self.total_timesteps.div_ceil(self.n_steps as u64).max(1)
    }
}

/// Rollout storage; advantages and returns are filled by [`finalize`](Self::finalize).
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Standardised observations, row-major.
    pub observations: Vec<f64>,
    /// Raw (standardised, unclipped) Gaussian actions, row-major.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl TrajectoryBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], log_prob: f64, reward: f64, value: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.act_dim);
        self.observations.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    pub fn finalize(&mut self, last_value: f64, gamma: f64, lambda: f64) -> Result<()> {
        let (adv, ret) = compute_gae(&self.rewards, &self.values, &self.dones, last_value, gamma, lambda)?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }

    pub fn observation(&self, k: usize) -> &[f64] {
        &self.observations[k * self.obs_dim..(k + 1) * self.obs_dim]
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.actions[k * self.act_dim..(k + 1) * self.act_dim]
    }
}

/// Generalised advantage estimates and returns.
///
/// `dones[t]` marks that step `t` ended its episode, so nothing is
/// bootstrapped across it. `last_value` is the value of the state after the
/// final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("cannot compute advantages of an empty buffer".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Contract("rewards, values and dones differ in length".into()));
    }
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { last_value } else { values[t + 1] };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-sample quantities entering the PPO objective.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub old_log_probs: &'a [f64],
    pub new_log_probs: &'a [f64],
    /// Already normalised if normalisation is enabled.
    pub advantages: &'a [f64],
    pub entropies: &'a [f64],
    pub values: &'a [f64],
    pub returns: &'a [f64],
}

/// Loss value, diagnostics, and gradients with respect to the per-sample
/// log-probabilities, entropies and values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub d_log_probs: Vec<f64>,
    pub d_entropies: Vec<f64>,
    pub d_values: Vec<f64>,
}

pub fn ppo_loss(batch: &LossBatch<'_>, cfg: &PpoConfig) -> Result<LossTerms> {
    let n = batch.old_log_probs.len();
    let lens = [
        batch.new_log_probs.len(),
        batch.advantages.len(),
        batch.entropies.len(),
        batch.values.len(),
        batch.returns.len(),
    ];
    if n == 0 || lens.iter().any(|&l| l != n) {
        return Err(Error::Contract("loss batch is empty or ragged".into()));
    }
    let inv_n = 1.0 / n as f64;
    let eps = cfg.clip_range;
    let mut out = LossTerms {
        loss: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        clip_fraction: 0.0,
        approx_kl: 0.0,
        d_log_probs: vec![0.0; n],
        d_entropies: vec![-cfg.ent_coef * inv_n; n],
        d_values: vec![0.0; n],
    };
    for k in 0..n {
        let ratio = (batch.new_log_probs[k] - batch.old_log_probs[k]).exp();
        if !ratio.is_finite() {
            return Err(Error::Training(format!("non-finite probability ratio at sample {k}")));
        }
        let a = batch.advantages[k];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        if unclipped <= clipped {
            out.policy_loss -= unclipped * inv_n;
            out.d_log_probs[k] = -unclipped * inv_n;
        } else {
            out.policy_loss -= clipped * inv_n;
        }
        if (ratio - 1.0).abs() > eps {
            out.clip_fraction += inv_n;
        }
        out.approx_kl += ((ratio - 1.0) - ratio.ln()) * inv_n;
        let err = batch.values[k] - batch.returns[k];
        out.value_loss += err * err * inv_n;
        out.d_values[k] = 2.0 * cfg.vf_coef * err * inv_n;
        out.entropy += batch.entropies[k] * inv_n;
    }
    out.loss = out.policy_loss + cfg.vf_coef * out.value_loss - cfg.ent_coef * out.entropy;
    if !out.loss.is_finite() {
        return Err(Error::Training("loss is not finite".into()));
    }
    Ok(out)
}

/// Diagnostics of one rollout-plus-optimisation cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub timesteps: u64,
    pub episodes: u64,
    /// Mean undiscounted, unscaled return of episodes completed in this rollout.
    pub mean_episode_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub log_std: Vec<f64>,
}

/// Rows of one optimisation step; observations are standardised and the
/// advantages already normalised if that is wanted.
pub struct Minibatch<'a> {
    pub observations: &'a [f64],
    pub actions: &'a [f64],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

pub struct MinibatchGradients {
    pub terms: LossTerms,
    pub actor: Actor,
    pub critic: CriticParams,
}

/// Loss and unclipped parameter gradients for one minibatch.
pub fn minibatch_gradients(actor: &Actor, critic: &CriticParams, mb: &Minibatch<'_>, cfg: &PpoConfig) -> Result<MinibatchGradients> {
    let b = mb.old_log_probs.len();
    let act_dim = actor.output_dim();
    if mb.observations.len() != b * actor.input_dim()
        || mb.actions.len() != b * act_dim
        || mb.advantages.len() != b
        || mb.returns.len() != b
    {
        return Err(Error::Contract("minibatch arrays disagree on the batch size".into()));
    }
    let (means, mut actor_tape) = actor.record(mb.observations, b)?;
    let (values, mut critic_tape) = critic.net.record(mb.observations, b)?;
    let log_std = actor.log_std().to_vec();
    let sigma: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let entropy = gaussian_entropy(&log_std);
    let mut z = vec![0.0; b * act_dim];
    let mut new_log_probs = vec![0.0; b];
    for r in 0..b {
        let mut lp = 0.0;
        for d in 0..act_dim {
            let zz = (mb.actions[r * act_dim + d] - means[r * act_dim + d]) / sigma[d];
            z[r * act_dim + d] = zz;
            lp += -0.5 * zz * zz - log_std[d];
        }
        new_log_probs[r] = lp - act_dim as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let entropies = vec![entropy; b];
    let terms = ppo_loss(
        &LossBatch {
            old_log_probs: mb.old_log_probs,
            new_log_probs: &new_log_probs,
            advantages: mb.advantages,
            entropies: &entropies,
            values: &values,
            returns: mb.returns,
        },
        cfg,
    )?;

    let mut d_means = vec![0.0; b * act_dim];
    let mut d_log_std = vec![0.0; act_dim];
    for r in 0..b {
        let g = terms.d_log_probs[r];
        for d in 0..act_dim {
            let zz = z[r * act_dim + d];
            d_means[r * act_dim + d] = g * zz / sigma[d];
            d_log_std[d] += g * (zz * zz - 1.0) + terms.d_entropies[r];
        }
    }
    let mut actor_grads = actor.zeros_like();
    actor.backward(&mut actor_tape, &d_means, &d_log_std, &mut actor_grads)?;
    let mut critic_grads = critic.zeros_like();
    critic_tape.backward(&terms.d_values, &mut critic_grads.net)?;
    Ok(MinibatchGradients {
        terms,
        actor: actor_grads,
        critic: critic_grads,
    })
}

pub fn write_log_jsonl(path: &Path, records: &[UpdateRecord]) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format("training log", e))?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_log_jsonl(path: &Path) -> Result<Vec<UpdateRecord>> {
    let file = std::fs::File::open(path).at(path)?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.at(path)?;
            serde_json::from_str(&line).map_err(|e| Error::format(format!("training log {}", path.display()), e))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final checkpoint, or the last one with finite parameters if aborted.
    pub checkpoint: Checkpoint,
    pub log: Vec<UpdateRecord>,
    pub aborted: Option<String>,
}

struct Learner {
    env_config: SupplyChainConfig,
    cfg: PpoConfig,
    seed: u64,
    obs_std: Standardizer,
    act_std: Standardizer,
    actor: Actor,
    critic: CriticParams,
    actor_opt: Adam,
    critic_opt: Adam,
    noise: rng::SimRng,
    env: SupplyChainEnv,
    obs: Vec<f64>,
    episode: u64,
    episode_return: f64,
    timesteps: u64,
}

/// Trains an actor-critic pair on `env_config` from `seed`.
pub fn train(env_config: &SupplyChainConfig, actor_config: &ActorConfig, cfg: &PpoConfig, seed: u64) -> Result<TrainOutcome> {
    env_config.validate()?;
    actor_config.validate()?;
    cfg.validate()?;
    let obs_dim = env_config.obs_dim();
    let act_dim = env_config.num_stages;
    let actor = Actor::init(actor_config, obs_dim, act_dim, &mut rng::stream(seed, &[tag::POLICY_INIT, 0]))?;
    let critic = CriticParams::init(obs_dim, &mut rng::stream(seed, &[tag::POLICY_INIT, 1]))?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let (env, obs) = SupplyChainEnv::new(env_config.clone(), rng::derive_seed(seed, &[tag::EPISODE, 0]))?;
    let mut learner = Learner {
        env_config: env_config.clone(),
        cfg: cfg.clone(),
        seed,
        obs_std: Standardizer::for_observations(env_config)?,
        act_std: Standardizer::for_actions(env_config)?,
        actor_opt: Adam::for_params(adam, &actor),
        critic_opt: Adam::for_params(adam, &critic),
        actor,
        critic,
        noise: rng::stream(seed, &[tag::ACTION_NOISE]),
        env,
        obs,
        episode: 0,
        episode_return: 0.0,
        timesteps: 0,
    };

    let mut log = Vec::new();
    let mut last_good = (learner.actor.clone(), learner.critic.clone());
    let mut aborted = None;
    for update in 0..cfg.num_updates() {
        match learner.update(update) {
            Ok(record) => {
                if learner.actor.flatten().iter().all(|v| v.is_finite())
                    && learner.critic.flatten().iter().all(|v| v.is_finite())
                {
                    last_good = (learner.actor.clone(), learner.critic.clone());
                    log.push(record);
                } else {
                    aborted = Some(format!("non-finite parameters after update {update}"));
                    break;
                }
            }
            Err(Error::Training(msg)) => {
                aborted = Some(format!("update {update}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let meta = CheckpointMeta {
        label: actor_config.kind.to_string(),
        seed,
        timesteps: log.last().map_or(0, |r| r.timesteps),
        updates: log.len() as u64,
        env_digest: config_digest(env_config),
    };
    let checkpoint = Checkpoint::new(env_config, last_good.0, last_good.1, meta)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        aborted,
    })
}

impl Learner {
    fn update(&mut self, update: u64) -> Result<UpdateRecord> {
        let (buffer, finished) = self.collect()?;
        let stats = self.optimise(&buffer, update)?;
        let episodes = finished.len() as u64;
        let mean_episode_return = (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / episodes as f64);
        Ok(UpdateRecord {
            update,
            timesteps: self.timesteps,
            episodes,
            mean_episode_return,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            actor_grad_norm: stats.actor_grad_norm,
            critic_grad_norm: stats.critic_grad_norm,
            log_std: self.actor.log_std().to_vec(),
        })
    }

    fn collect(&mut self) -> Result<(TrajectoryBuffer, Vec<f64>)> {
        let obs_dim = self.obs_std.dim();
        let act_dim = self.act_std.dim();
        let mut buffer = TrajectoryBuffer::new(obs_dim, act_dim);
        let mut finished = Vec::new();
        let mut ws = Workspace::default();
        for _ in 0..self.cfg.n_steps {
            let x = self.obs_std.transform(&self.obs);
            let means = self.actor.means(&x, &mut ws);
            let value = self.critic.value_with(&x, &mut ws);
            let (raw, log_prob) = gaussian_action(&means, self.actor.log_std(), &mut self.noise, ActionMode::Sample);
            if !raw.iter().all(|v| v.is_finite()) || !value.is_finite() {
                return Err(Error::Training("non-finite action or value during rollout".into()));
            }
            let orders = to_env_action(&raw, &self.act_std, &self.env_config);
            let step = self.env.step(&orders)?;
            self.timesteps += 1;
            self.episode_return += step.reward;
            buffer.push(&x, &raw, log_prob, step.reward * self.cfg.reward_scale, value, step.done);
            if step.done {
                finished.push(self.episode_return);
                self.episode_return = 0.0;
                self.episode += 1;
                let env_seed = rng::derive_seed(self.seed, &[tag::EPISODE, self.episode]);
                let (env, obs) = SupplyChainEnv::new(self.env_config.clone(), env_seed)?;
                self.env = env;
                self.obs = obs;
            } else {
                self.obs = step.observation;
            }
        }
        let last_value = if *buffer.dones.last().unwrap_or(&true) {
            0.0
        } else {
            self.critic.value_with(&self.obs_std.transform(&self.obs), &mut ws)
        };
        buffer.finalize(last_value, self.cfg.gamma, self.cfg.gae_lambda)?;
        Ok((buffer, finished))
    }

    fn optimise(&mut self, buffer: &TrajectoryBuffer, update: u64) -> Result<OptimStats> {
        let n = buffer.len();
        let obs_dim = buffer.obs_dim;
        let act_dim = buffer.act_dim;
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = OptimStats::default();
        let mut batches = 0usize;
        for epoch in 0..self.cfg.n_epochs {
            order.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, update, epoch as u64]));
            for chunk in order.chunks(self.cfg.batch_size) {
                let b = chunk.len();
                let mut xs = Vec::with_capacity(b * obs_dim);
                let mut actions = Vec::with_capacity(b * act_dim);
                for &k in chunk {
                    xs.extend_from_slice(buffer.observation(k));
                    actions.extend_from_slice(buffer.action(k));
                }
                let old_log_probs: Vec<f64> = chunk.iter().map(|&k| buffer.log_probs[k]).collect();
                let returns: Vec<f64> = chunk.iter().map(|&k| buffer.returns[k]).collect();
                let mut advantages: Vec<f64> = chunk.iter().map(|&k| buffer.advantages[k]).collect();
                if self.cfg.normalize_advantage {
                    normalize(&mut advantages);
                }

                let MinibatchGradients {
                    terms,
                    actor: mut actor_grads,
                    critic: mut critic_grads,
                } = minibatch_gradients(
                    &self.actor,
                    &self.critic,
                    &Minibatch {
                        observations: &xs,
                        actions: &actions,
                        old_log_probs: &old_log_probs,
                        advantages: &advantages,
                        returns: &returns,
                    },
                    &self.cfg,
                )?;

                let an = clip_grad_norm(&mut actor_grads, self.cfg.max_grad_norm);
                let cn = clip_grad_norm(&mut critic_grads, self.cfg.max_grad_norm);
                self.actor_opt.step(&mut self.actor, &actor_grads)?;
                self.critic_opt.step(&mut self.critic, &critic_grads)?;

                stats.policy_loss += terms.policy_loss;
                stats.value_loss += terms.value_loss;
                stats.entropy += terms.entropy;
                stats.approx_kl += terms.approx_kl;
                stats.clip_fraction += terms.clip_fraction;
                stats.actor_grad_norm += an;
                stats.critic_grad_norm += cn;
                batches += 1;
            }
        }
        stats.scale(1.0 / batches.max(1) as f64);
        Ok(stats)
    }
}

#[derive(Debug, Default)]
struct OptimStats {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    approx_kl: f64,
    clip_fraction: f64,
    actor_grad_norm: f64,
    critic_grad_norm: f64,
}

impl OptimStats {
    fn scale(&mut self, f: f64) {
        self.policy_loss *= f;
        self.value_loss *= f;
        self.entropy *= f;
        self.approx_kl *= f;
        self.clip_fraction *= f;
        self.actor_grad_norm *= f;
        self.critic_grad_norm *= f;
    }
}

/// Zero mean, unit (population) standard deviation; single samples are left alone.
fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for x in v.iter_mut() {
        *x = (*x - mean) / denom;
    }
}
