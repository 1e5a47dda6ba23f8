//! Rollout evaluation with interquartile means and bootstrap intervals.

use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::config_digest;
use crate::env::{StepResult, SupplyChainConfig, SupplyChainEnv};
use crate::error::{Error, IoContext, Result};
use crate::policy::{ActionMode, Checkpoint, OrderPolicy};
use crate::rng::{self, tag, SimRng};

/// Interquartile mean with fractional trimming.
///
/// Sorted value `k` (1-based) covers the quantile interval `[(k-1)/n, k/n]`
/// and is weighted by its overlap with `[1/4, 3/4]`.
pub fn iqm(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Contract("interquartile mean of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Work in units of 1/(4n) so the overlaps are integers.
    let (lo, hi) = (n as u64, 3 * n as u64);
    let mut acc = 0.0;
    for (k, x) in sorted.iter().enumerate() {
        let a = 4 * k as u64;
        let b = a + 4;
        let overlap = b.min(hi).saturating_sub(a.max(lo));
        if overlap > 0 {
            acc += x * overlap as f64;
        }
    }
    Ok(acc / (2 * n) as f64)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap interval `(5th, 95th)` of `statistic`.
pub fn bootstrap_ci_with<F>(values: &[f64], statistic: F, resamples: usize, rng: &mut SimRng) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = values.len();
    if n < 2 {
        return Err(Error::Contract("bootstrap needs at least two values".into()));
    }
    if resamples < 100 {
        return Err(Error::Contract("bootstrap needs at least 100 resamples".into()));
    }
    let mut sample = vec![0.0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = values[rng.random_range(0..n)];
        }
        stats.push(statistic(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, 0.05), percentile(&stats, 0.95)))
}

pub fn bootstrap_ci(values: &[f64], resamples: usize, rng: &mut SimRng) -> Result<(f64, f64)> {
    bootstrap_ci_with(values, iqm, resamples, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollouts_per_seed: usize,
    pub eval_seed: u64,
    pub bootstrap_resamples: usize,
    pub mode: ActionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts_per_seed: 50,
            eval_seed: 1_000_003,
            bootstrap_resamples: 2000,
            mode: ActionMode::Deterministic,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts_per_seed == 0 {
            return Err(Error::config("eval.rollouts_per_seed", "must be at least 1"));
        }
        if self.bootstrap_resamples < 100 {
            return Err(Error::config("eval.bootstrap_resamples", "must be at least 100"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Cumulative reward per rollout, policy-major.
    pub returns: Vec<f64>,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub num_seeds: usize,
    pub rollouts_per_seed: usize,
    pub horizon: usize,
    pub mode: ActionMode,
    pub bootstrap_resamples: usize,
    pub eval_seed: u64,
    pub env_digest: String,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("evaluation report", e))?;
        std::fs::write(path, text + "\n").at(path)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("evaluation report {}", path.display()), e))
    }

    /// One row per rollout: `seed_index, rollout, return`.
    pub fn write_returns_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["seed_index", "rollout", "return"]).map_err(|e| csv_error(path, e))?;
        for (k, r) in self.returns.iter().enumerate() {
            let (p, j) = (k / self.rollouts_per_seed, k % self.rollouts_per_seed);
            w.write_record([p.to_string(), j.to_string(), r.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().at(path)
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(format!("csv {}", path.display()), e)
    }
}

/// Per-step rewards of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed_index: usize,
    pub rollout: usize,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn total(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub trajectories: Vec<Trajectory>,
}

/// Seed of the environment used for rollout `rollout` of policy `seed_index`.
pub fn rollout_env_seed(eval_seed: u64, seed_index: usize, rollout: usize) -> u64 {
    rng::derive_seed(eval_seed, &[tag::EVAL, seed_index as u64, rollout as u64])
}

fn rollout_action_stream(eval_seed: u64, seed_index: usize, rollout: usize) -> SimRng {
    rng::stream(eval_seed, &[tag::EVAL, seed_index as u64, rollout as u64, tag::ACTION_NOISE])
}

/// Runs one full episode and returns every step.
pub fn run_episode(policy: &dyn OrderPolicy, config: &SupplyChainConfig, env_seed: u64, actions: &mut SimRng) -> Result<Vec<StepResult>> {
    let (mut env, mut obs) = SupplyChainEnv::new(config.clone(), env_seed)?;
    let mut steps = Vec::with_capacity(config.horizon);
    while !env.is_done() {
        let orders = policy.orders(&obs, actions);
        let step = env.step(&orders)?;
        obs = step.observation.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// Evaluates each policy `rollouts_per_seed` times on independent environments.
pub fn evaluate(
    label: &str,
    policies: &[&dyn OrderPolicy],
    config: &SupplyChainConfig,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    config.validate()?;
    eval.validate()?;
    if policies.is_empty() {
        return Err(Error::Contract("no policies to evaluate".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..policies.len())
        .flat_map(|p| (0..eval.rollouts_per_seed).map(move |r| (p, r)))
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(p, r)| {
            let mut actions = rollout_action_stream(eval.eval_seed, p, r);
            let steps = run_episode(policies[p], config, rollout_env_seed(eval.eval_seed, p, r), &mut actions)?;
            Ok(Trajectory {
                seed_index: p,
                rollout: r,
                rewards: steps.iter().map(|s| s.reward).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = trajectories.iter().map(Trajectory::total).collect();
    if let Some(k) = returns.iter().position(|r| !r.is_finite()) {
        return Err(Error::Contract(format!("rollout {k} produced a non-finite return")));
    }
    let point = iqm(&returns)?;
    let (ci_lo, ci_hi) = if returns.len() >= 2 {
        let mut boot = rng::stream(eval.eval_seed, &[tag::BOOTSTRAP]);
        bootstrap_ci(&returns, eval.bootstrap_resamples, &mut boot)?
    } else {
        (point, point)
    };
    Ok(Evaluation {
        report: EvalReport {
            label: label.to_string(),
            returns,
            iqm: point,
            ci_lo,
            ci_hi,
            num_seeds: policies.len(),
            rollouts_per_seed: eval.rollouts_per_seed,
            horizon: config.horizon,
            mode: eval.mode,
            bootstrap_resamples: eval.bootstrap_resamples,
            eval_seed: eval.eval_seed,
            env_digest: config_digest(config),
        },
        trajectories,
    })
}

/// Evaluates trained checkpoints in the configured action mode.
pub fn evaluate_checkpoints(
    label: &str,
    checkpoints: &[Checkpoint],
    config: &SupplyChainConfig,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let policies: Vec<_> = checkpoints.iter().map(|c| c.policy(eval.mode)).collect();
    let refs: Vec<&dyn OrderPolicy> = policies.iter().map(|p| p as &dyn OrderPolicy).collect();
    evaluate(label, &refs, config, eval)
}

/// Loads one checkpoint per training seed; a missing file names its seed.
pub fn load_checkpoints(paths: &[(u64, PathBuf)]) -> Result<Vec<Checkpoint>> {
    paths
        .iter()
        .map(|(seed, path)| {
            if !path.exists() {
                return Err(Error::io(
                    path.clone(),
                    io::Error::new(io::ErrorKind::NotFound, format!("checkpoint for seed {seed} not found")),
                ));
            }
            Checkpoint::load(path)
        })
        .collect()
}

/// Long-format per-step rewards: `seed_index, rollout, t, reward, cumulative`.
pub fn write_trajectories_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["seed_index", "rollout", "t", "reward", "cumulative"])
        .map_err(|e| csv_error(path, e))?;
    for tr in trajectories {
        let mut cum = 0.0;
        for (t, r) in tr.rewards.iter().enumerate() {
            cum += r;
            w.write_record([
                tr.seed_index.to_string(),
                tr.rollout.to_string(),
                t.to_string(),
                r.to_string(),
                cum.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().at(path)
}

/// Per-step IQM of the cumulative reward across all rollouts.
pub fn cumulative_iqm_curve(trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    let horizon = trajectories.iter().map(|t| t.rewards.len()).max().unwrap_or(0);
    let mut sums: Vec<Vec<f64>> = vec![Vec::with_capacity(trajectories.len()); horizon];
    for tr in trajectories {
        let mut cum = 0.0;
        for (t, r) in tr.rewards.iter().enumerate() {
            cum += r;
            sums[t].push(cum);
        }
    }
    sums.iter().map(|v| iqm(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replicates every value four times so the quartile cuts fall on
    /// element boundaries, then averages the middle half.
    fn replicated_iqm(values: &[f64]) -> f64 {
        let n = values.len();
        let mut rep: Vec<f64> = values.iter().flat_map(|&v| [v; 4]).collect();
        rep.sort_by(f64::total_cmp);
        rep[n..3 * n].iter().sum::<f64>() / (2 * n) as f64
    }

    #[test]
    fn iqm_small_cases() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[7.0]).unwrap(), 7.0);
        assert_eq!(iqm(&[3.25; 9]).unwrap(), 3.25);
        assert!(matches!(iqm(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn iqm_fractional_hand_case() {
        // n = 5: weights 0, 3/4, 1, 3/4, 0 (in units of 1/n), normalised by 5/2.
        let v = [10.0, 1.0, 3.0, 2.0, 100.0];
        let expected = (0.75 * 2.0 + 3.0 + 0.75 * 10.0) / 2.5;
        assert!((iqm(&v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn iqm_matches_replication_oracle() {
        let mut g = rng::stream(10, &[]);
        for _ in 0..500 {
            let n = g.random_range(1..=8);
            let v: Vec<f64> = (0..n).map(|_| g.random_range(-100.0..100.0)).collect();
            assert!((iqm(&v).unwrap() - replicated_iqm(&v)).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 8.0);
        assert!((percentile(&v, 0.5) - 3.0).abs() < 1e-15);
        assert!((percentile(&v, 0.05) - 1.15).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_and_replay() {
        let mut g = rng::stream(11, &[]);
        assert_eq!(bootstrap_ci(&[4.5; 20], 200, &mut g).unwrap(), (4.5, 4.5));
        let data: Vec<f64> = (0..50).map(|k| ((k * 37) % 11) as f64).collect();
        let a = bootstrap_ci(&data, 500, &mut rng::stream(3, &[])).unwrap();
        let b = bootstrap_ci(&data, 500, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.0 <= a.1);
        assert!(matches!(bootstrap_ci(&[1.0], 500, &mut g), Err(Error::Contract(_))));
        assert!(matches!(bootstrap_ci(&[1.0, 2.0], 50, &mut g), Err(Error::Contract(_))));
    }

    struct Zero;
    impl OrderPolicy for Zero {
        fn orders(&self, _obs: &[f64], _rng: &mut SimRng) -> Vec<i64> {
            vec![0, 0, 0]
        }
    }

    #[test]
    fn counts_match_seeds_times_rollouts() {
        let config = SupplyChainConfig::default();
        let eval = EvalConfig {
            rollouts_per_seed: 3,
            bootstrap_resamples: 100,
            ..Default::default()
        };
        let out = evaluate("zero", &[&Zero, &Zero], &config, &eval).unwrap();
        assert_eq!(out.report.returns.len(), 6);
        assert_eq!(out.trajectories.len(), 6);
        assert!(out.trajectories.iter().all(|t| t.rewards.len() == 60));
    }

    #[test]
    fn zero_policy_without_demand_pays_only_holding() {
        let mut config = SupplyChainConfig::default();
        config.demand.base_lambda = 1e-300;
        let eval = EvalConfig {
            rollouts_per_seed: 4,
            bootstrap_resamples: 100,
            ..Default::default()
        };
        let out = evaluate("zero", &[&Zero], &config, &eval).unwrap();
        for (r, ret) in out.report.returns.iter().enumerate() {
            let (env, _) = SupplyChainEnv::new(config.clone(), rollout_env_seed(eval.eval_seed, 0, r)).unwrap();
            let inv = &env.state().inventory;
            let per_period: f64 = (0..3).map(|i| config.holding_cost[i] * inv[i] as f64).sum();
            assert!((ret + 60.0 * per_period).abs() < 1e-9, "{ret} vs {}", -60.0 * per_period);
        }
    }

    #[test]
    fn missing_checkpoint_names_seed() {
        let err = load_checkpoints(&[(17, PathBuf::from("/nonexistent/ckpt.json"))]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seed 17") && msg.contains("/nonexistent/ckpt.json"), "{msg}");
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn cumulative_curve_ends_at_return_iqm() {
        let tr = vec![
            Trajectory { seed_index: 0, rollout: 0, rewards: vec![1.0, 2.0] },
            Trajectory { seed_index: 0, rollout: 1, rewards: vec![3.0, -1.0] },
        ];
        let curve = cumulative_iqm_curve(&tr).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1], iqm(&[3.0, 2.0]).unwrap());
    }
}
