//! Reproducible experiment drivers: random search, benchmark, horizon and
//! disruption sweeps, hardened retraining, and manifests that replay them.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::digest::config_digest;
use crate::env::{SupplyChainConfig, SupplyChainEnv};
use crate::error::{Error, IoContext, Result};
use crate::evalstats::{
    csv_error, evaluate, evaluate_checkpoints, load_checkpoints, write_trajectories_csv, EvalConfig, EvalReport,
    Evaluation,
};
use crate::interpret::{aggregate_importance, collect_states, compile_lookup_policy, feature_importance, lookup_fidelity, trace_shape_functions, ExplanationBundle};
use crate::policy::{ActorConfig, Checkpoint, OrderPolicy, PolicyKind, RandomPolicy};
use crate::ppo::{train, write_log_jsonl, PpoConfig, TrainOutcome};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Linear,
    Log,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
    pub scaling: Scaling,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64, scaling: Scaling) -> Self {
        Self { lo, hi, scaling }
    }

    pub const fn fixed(v: f64) -> Self {
        Self::new(v, v, Scaling::Fixed)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.scaling {
            Scaling::Fixed => self.lo,
            Scaling::Linear => {
                let u: f64 = rng.random();
                self.lo + u * (self.hi - self.lo)
            }
            Scaling::Log => {
                let u: f64 = rng.random();
                (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self.scaling {
            Scaling::Fixed => v == self.lo,
            _ => v >= self.lo && v <= self.hi,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let field = format!("search.space.{name}");
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::config(field, "needs finite lo <= hi"));
        }
        if self.scaling == Scaling::Log && self.lo <= 0.0 {
            return Err(Error::config(field, "log scaling needs a positive lower bound"));
        }
        if self.scaling == Scaling::Fixed && self.lo != self.hi {
            return Err(Error::config(field, "fixed parameters need lo == hi"));
        }
        Ok(())
    }
}

/// Ranges of the searched hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub learning_rate: ParamRange,
    pub batch_size: ParamRange,
    pub actor_layers: ParamRange,
    pub actor_width: ParamRange,
    pub n_epochs: ParamRange,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: ParamRange::new(1e-4, 1e-3, Scaling::Log),
            batch_size: ParamRange::new(32.0, 128.0, Scaling::Linear),
            actor_layers: ParamRange::new(1.0, 4.0, Scaling::Linear),
            actor_width: ParamRange::new(8.0, 32.0, Scaling::Linear),
            n_epochs: ParamRange::new(2.0, 51.0, Scaling::Linear),
        }
    }
}

/// One sampled hyperparameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub n_epochs: usize,
}

impl TrialConfig {
    pub fn apply(&self, actor: &ActorConfig, ppo: &PpoConfig) -> (ActorConfig, PpoConfig) {
        (
            ActorConfig {
                hidden_layers: self.hidden_layers,
                width: self.width,
                ..actor.clone()
            },
            PpoConfig {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                n_epochs: self.n_epochs,
                ..ppo.clone()
            },
        )
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        self.learning_rate.validate("learning_rate")?;
        self.batch_size.validate("batch_size")?;
        self.actor_layers.validate("actor_layers")?;
        self.actor_width.validate("actor_width")?;
        self.n_epochs.validate("n_epochs")?;
        for (name, r) in [
            ("batch_size", &self.batch_size),
            ("actor_layers", &self.actor_layers),
            ("actor_width", &self.actor_width),
            ("n_epochs", &self.n_epochs),
        ] {
            if r.lo < 1.0 {
                return Err(Error::config(format!("search.space.{name}"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialConfig {
        let int = |r: &ParamRange, rng: &mut R| r.sample(rng).round().clamp(r.lo, r.hi) as usize;
        TrialConfig {
            learning_rate: self.learning_rate.sample(rng),
            batch_size: int(&self.batch_size, rng),
            hidden_layers: int(&self.actor_layers, rng),
            width: int(&self.actor_width, rng),
            n_epochs: int(&self.n_epochs, rng),
        }
    }

    pub fn sample_configs(&self, n: usize, seed: u64) -> Vec<TrialConfig> {
        let mut g = rng::stream(seed, &[tag::SEARCH]);
        (0..n).map(|_| self.sample(&mut g)).collect()
    }

    pub fn contains(&self, c: &TrialConfig) -> bool {
        self.learning_rate.contains(c.learning_rate)
            && self.batch_size.contains(c.batch_size as f64)
            && self.actor_layers.contains(c.hidden_layers as f64)
            && self.actor_width.contains(c.width as f64)
            && self.n_epochs.contains(c.n_epochs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_configs: usize,
    pub seeds_per_config: usize,
    pub validation_seed: u64,
    /// Environment steps per trial training run.
    pub trial_timesteps: u64,
    pub search_seed: u64,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_configs: 30,
            seeds_per_config: 3,
            validation_seed: 4,
            trial_timesteps: 100_000,
            search_seed: 2_024,
            space: SearchSpace::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_configs == 0 {
            return Err(Error::config("search.n_configs", "must be at least 1"));
        }
        if self.seeds_per_config == 0 {
            return Err(Error::config("search.seeds_per_config", "must be at least 1"));
        }
        if self.trial_timesteps == 0 {
            return Err(Error::config("search.trial_timesteps", "must be at least 1"));
        }
        self.space.validate()
    }

    /// Training seeds shared by every trial: `1..=seeds_per_config`.
    pub fn train_seeds(&self) -> Vec<u64> {
        (1..=self.seeds_per_config as u64).collect()
    }
}

/// Outcome of one sampled configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: TrialConfig,
    pub seeds: Vec<u64>,
    /// Validation return of each trained policy.
    pub seed_returns: Vec<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Mean validation return; failed trials score negative infinity.
    pub fn score(&self) -> f64 {
        if self.error.is_some() || self.seed_returns.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.seed_returns.iter().sum::<f64>() / self.seed_returns.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<TrialRecord>,
    pub incumbent: usize,
}

impl SearchResult {
    pub fn incumbent_config(&self) -> TrialConfig {
        self.trials[self.incumbent].config
    }

    /// Trial indices by decreasing score, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.trials.len()).collect();
        idx.sort_by(|&a, &b| self.trials[b].score().total_cmp(&self.trials[a].score()).then(a.cmp(&b)));
        idx
    }

    pub fn write_leaderboard(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "rank",
            "trial",
            "score",
            "learning_rate",
            "batch_size",
            "hidden_layers",
            "width",
            "n_epochs",
            "error",
        ])
        .map_err(|e| csv_error(path, e))?;
        for (rank, &k) in self.ranking().iter().enumerate() {
            let t = &self.trials[k];
            w.write_record([
                (rank + 1).to_string(),
                k.to_string(),
                t.score().to_string(),
                t.config.learning_rate.to_string(),
                t.config.batch_size.to_string(),
                t.config.hidden_layers.to_string(),
                t.config.width.to_string(),
                t.config.n_epochs.to_string(),
                t.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().at(path)
    }
}

/// Undiscounted return of one deterministic episode on `env_seed`.
pub fn validation_return(checkpoint: &Checkpoint, config: &SupplyChainConfig, env_seed: u64) -> Result<f64> {
    let (mut env, mut obs) = SupplyChainEnv::new(config.clone(), env_seed)?;
    let mut total = 0.0;
    while !env.is_done() {
        let step = env.step(&checkpoint.deterministic_orders(&obs))?;
        total += step.reward;
        obs = step.observation;
    }
    Ok(total)
}

fn run_trial(
    index: usize,
    trial: TrialConfig,
    env: &SupplyChainConfig,
    actor: &ActorConfig,
    ppo: &PpoConfig,
    search: &SearchConfig,
) -> TrialRecord {
    let (actor, mut ppo) = trial.apply(actor, ppo);
    ppo.total_timesteps = search.trial_timesteps;
    let seeds = search.train_seeds();
    let mut record = TrialRecord {
        index,
        config: trial,
        seeds: seeds.clone(),
        seed_returns: Vec::new(),
        error: None,
    };
    for seed in seeds {
        let outcome = train(env, &actor, &ppo, seed).and_then(|o| match o.aborted {
            Some(msg) => Err(Error::Training(msg)),
            None => Ok(o),
        });
        match outcome.and_then(|o| validation_return(&o.checkpoint, env, search.validation_seed)) {
            Ok(r) => record.seed_returns.push(r),
            Err(e) => {
                record.error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    record
}

/// Samples and scores `n_configs` settings; a failing trial scores negative
/// infinity and the search continues.
pub fn random_search(env: &SupplyChainConfig, actor: &ActorConfig, ppo: &PpoConfig, search: &SearchConfig) -> Result<SearchResult> {
    search.validate()?;
    let configs = search.space.sample_configs(search.n_configs, search.search_seed);
    let trials: Vec<TrialRecord> = configs
        .par_iter()
        .enumerate()
        .map(|(k, c)| run_trial(k, *c, env, actor, ppo, search))
        .collect();
    let incumbent = (0..trials.len())
        .max_by(|&a, &b| trials[a].score().total_cmp(&trials[b].score()).then(b.cmp(&a)))
        .expect("at least one trial");
    if trials[incumbent].score() == f64::NEG_INFINITY {
        return Err(Error::Training("every search trial failed".into()));
    }
    Ok(SearchResult { trials, incumbent })
}

/// Training recipe of one benchmarked architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub label: String,
    pub actor: ActorConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub total_timesteps: u64,
}

impl ArchitectureConfig {
    pub fn ppo(&self, base: &PpoConfig) -> PpoConfig {
        PpoConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            n_epochs: self.n_epochs,
            total_timesteps: self.total_timesteps,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub architectures: Vec<ArchitectureConfig>,
    pub random_baseline: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            architectures: vec![
                ArchitectureConfig {
                    label: "nam".into(),
                    actor: ActorConfig {
                        kind: PolicyKind::Nam,
                        hidden_layers: 1,
                        width: 8,
                        num_subnets: 30,
                    },
                    learning_rate: 3e-4,
                    batch_size: 64,
                    n_epochs: 5,
                    total_timesteps: 300_000,
                },
                ArchitectureConfig {
                    label: "mlp".into(),
                    actor: ActorConfig {
                        kind: PolicyKind::Mlp,
                        hidden_layers: 2,
                        width: 32,
                        num_subnets: 30,
                    },
                    learning_rate: 3e-4,
                    batch_size: 64,
                    n_epochs: 10,
                    total_timesteps: 300_000,
                },
            ],
            random_baseline: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut labels = std::collections::BTreeSet::new();
        for (k, a) in self.architectures.iter().enumerate() {
            if a.label.is_empty() || !labels.insert(a.label.as_str()) {
                return Err(Error::config(
                    format!("benchmark.architectures[{k}].label"),
                    "labels must be non-empty and unique",
                ));
            }
            a.actor.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self, label: &str) -> Option<&ArchitectureConfig> {
        self.architectures.iter().find(|a| a.label == label)
    }
}

/// Seeds and grids shared by the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub n_seeds: usize,
    pub seed_base: u64,
    pub horizons: Vec<usize>,
    pub strengths: Vec<f64>,
    /// Onset of disruptions; half the horizon when absent.
    pub disruption_start: Option<usize>,
    pub hardened_strength: f64,
    pub hardened_seeds: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            n_seeds: 20,
            seed_base: 0,
            horizons: vec![30, 60, 120, 180, 240, 300, 360, 420],
            strengths: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            disruption_start: None,
            hardened_strength: 1.0,
            hardened_seeds: 5,
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::config("experiment.n_seeds", "must be at least 1"));
        }
        if self.horizons.iter().any(|&h| h == 0) {
            return Err(Error::config("experiment.horizons", "horizons must be positive"));
        }
        if self.strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("experiment.strengths", "strengths must be non-negative"));
        }
        if !(self.hardened_strength.is_finite() && self.hardened_strength >= 0.0) {
            return Err(Error::config("experiment.hardened_strength", "must be non-negative"));
        }
        if self.hardened_seeds == 0 {
            return Err(Error::config("experiment.hardened_seeds", "must be at least 1"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.seed_base + k).collect()
    }
}

/// Trains one policy per seed.
pub fn train_many(env: &SupplyChainConfig, actor: &ActorConfig, ppo: &PpoConfig, seeds: &[u64]) -> Result<Vec<TrainOutcome>> {
    seeds.par_iter().map(|&s| train(env, actor, ppo, s)).collect()
}

fn require_clean(outcomes: &[TrainOutcome]) -> Result<Vec<Checkpoint>> {
    outcomes
        .iter()
        .map(|o| match &o.aborted {
            Some(msg) => Err(Error::Training(format!("seed {}: {msg}", o.checkpoint.meta.seed))),
            None => Ok(o.checkpoint.clone()),
        })
        .collect()
}

/// Evaluation of uniformly random orders on the same environment seeds.
pub fn random_baseline(num_policies: usize, config: &SupplyChainConfig, eval: &EvalConfig) -> Result<Evaluation> {
    let random = RandomPolicy::new(config);
    let policies: Vec<&dyn OrderPolicy> = vec![&random; num_policies];
    evaluate("random", &policies, config, eval)
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub checkpoints: Vec<(String, Vec<TrainOutcome>)>,
    pub evaluations: Vec<Evaluation>,
}

/// Retrains every architecture on `seeds` and evaluates each set.
pub fn run_benchmark(config: &Config, seeds: &[u64]) -> Result<BenchmarkOutput> {
    let mut out = BenchmarkOutput {
        checkpoints: Vec::new(),
        evaluations: Vec::new(),
    };
    for arch in &config.benchmark.architectures {
        let outcomes = train_many(&config.env, &arch.actor, &arch.ppo(&config.ppo), seeds)?;
        let ckpts = require_clean(&outcomes)?;
        out.evaluations
            .push(evaluate_checkpoints(&arch.label, &ckpts, &config.env, &config.eval)?);
        out.checkpoints.push((arch.label.clone(), outcomes));
    }
    if config.benchmark.random_baseline {
        out.evaluations.push(random_baseline(seeds.len(), &config.env, &config.eval)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    /// Horizon or disruption strength, depending on the sweep.
    pub setting: f64,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub profitable: bool,
    pub returns: usize,
}

impl SweepRow {
    fn from_report(setting: f64, r: &EvalReport) -> Self {
        Self {
            label: r.label.clone(),
            setting,
            iqm: r.iqm,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            profitable: r.iqm > 0.0,
            returns: r.returns.len(),
        }
    }
}

pub fn write_sweep_csv(path: &Path, setting_name: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["label", setting_name, "iqm", "ci_lo", "ci_hi", "profitable", "returns"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.setting.to_string(),
            r.iqm.to_string(),
            r.ci_lo.to_string(),
            r.ci_hi.to_string(),
            r.profitable.to_string(),
            r.returns.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

/// Re-evaluates fixed checkpoints at every horizon without retraining.
pub fn temporal_stability(
    label: &str,
    checkpoints: &[Checkpoint],
    env: &SupplyChainConfig,
    horizons: &[usize],
    eval: &EvalConfig,
) -> Result<Vec<(SweepRow, Evaluation)>> {
    horizons
        .iter()
        .map(|&h| {
            let e = evaluate_checkpoints(label, checkpoints, &env.with_horizon(h), eval)?;
            Ok((SweepRow::from_report(h as f64, &e.report), e))
        })
        .collect()
}

/// Evaluates under disruption demand of each strength, starting at `start`
/// (half the horizon when absent).
pub fn disruption_eval(
    label: &str,
    checkpoints: &[Checkpoint],
    env: &SupplyChainConfig,
    strengths: &[f64],
    start: Option<usize>,
    eval: &EvalConfig,
) -> Result<Vec<(SweepRow, Evaluation)>> {
    let c = start.unwrap_or(env.horizon / 2);
    strengths
        .iter()
        .map(|&s| {
            let disrupted = SupplyChainConfig {
                demand: env.demand.with_disruption(s, c),
                ..env.clone()
            };
            let e = evaluate_checkpoints(label, checkpoints, &disrupted, eval)?;
            Ok((SweepRow::from_report(s, &e.report), e))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardenedRow {
    pub strength: f64,
    pub default: Option<SweepRow>,
    pub hardened: SweepRow,
}

#[derive(Debug, Clone)]
pub struct HardenedOutput {
    pub outcomes: Vec<TrainOutcome>,
    pub rows: Vec<HardenedRow>,
    pub evaluations: Vec<Evaluation>,
}

/// Retrains with disruptions active, then sweeps strengths; joins with the
/// default checkpoints when given.
#[allow(clippy::too_many_arguments)]
pub fn hardened_training(
    label: &str,
    env: &SupplyChainConfig,
    actor: &ActorConfig,
    ppo: &PpoConfig,
    strength: f64,
    start: Option<usize>,
    seeds: &[u64],
    strengths: &[f64],
    eval: &EvalConfig,
    default_checkpoints: Option<&[Checkpoint]>,
) -> Result<HardenedOutput> {
    let c = start.unwrap_or(env.horizon / 2);
    let train_env = SupplyChainConfig {
        demand: env.demand.with_disruption(strength, c),
        ..env.clone()
    };
    let outcomes = train_many(&train_env, actor, ppo, seeds)?;
    let ckpts = require_clean(&outcomes)?;
    let hardened_label = format!("{label}-hardened");
    let hardened = disruption_eval(&hardened_label, &ckpts, env, strengths, Some(c), eval)?;
    let defaults = match default_checkpoints {
        Some(d) => Some(disruption_eval(label, d, env, strengths, Some(c), eval)?),
        None => None,
    };
    let rows = hardened
        .iter()
        .enumerate()
        .map(|(k, (row, _))| HardenedRow {
            strength: row.setting,
            default: defaults.as_ref().map(|d| d[k].0.clone()),
            hardened: row.clone(),
        })
        .collect();
    Ok(HardenedOutput {
        outcomes,
        rows,
        evaluations: hardened.into_iter().map(|(_, e)| e).collect(),
    })
}

pub fn write_hardened_csv(path: &Path, rows: &[HardenedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "strength",
        "default_iqm",
        "default_ci_lo",
        "default_ci_hi",
        "hardened_iqm",
        "hardened_ci_lo",
        "hardened_ci_hi",
    ])
    .map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.strength.to_string(),
            opt(r.default.as_ref().map(|d| d.iqm)),
            opt(r.default.as_ref().map(|d| d.ci_lo)),
            opt(r.default.as_ref().map(|d| d.ci_hi)),
            r.hardened.iqm.to_string(),
            r.hardened.ci_lo.to_string(),
            r.hardened.ci_hi.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Train,
    Evaluate,
    Sweep,
    Benchmark,
    Stability,
    Disrupt,
    Harden,
    Explain,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string tag"))
    }
}

pub const MANIFEST_FORMAT: &str = "echelon-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to replay an experiment. The only non-reproducible
/// fields are the timestamp and the source revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format: String,
    pub kind: ExperimentKind,
    pub created_unix: u64,
    pub version: String,
    pub revision: Option<String>,
    pub config: Config,
    pub config_digest: String,
    pub train_seeds: Vec<u64>,
    pub eval_seed: u64,
    pub checkpoints: Vec<PathBuf>,
    pub layout: Vec<String>,
}

impl ExperimentManifest {
    pub fn new(kind: ExperimentKind, config: &Config, checkpoints: &[PathBuf]) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let revision = std::process::Command::new("git")
            .args(["rev-parse", "--short", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
        Self {
            format: MANIFEST_FORMAT.into(),
            kind,
            created_unix,
            version: env!("CARGO_PKG_VERSION").into(),
            revision,
            config: config.clone(),
            config_digest: config_digest(config),
            train_seeds: config.experiment.seeds(),
            eval_seed: config.eval.eval_seed,
            checkpoints: checkpoints.to_vec(),
            layout: layout(kind),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("manifest", e))?;
        std::fs::write(path, text + "\n").at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest {}", path.display()), e))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format("manifest", format!("unknown format `{}`", m.format)));
        }
        m.config.validate()?;
        if config_digest(&m.config) != m.config_digest {
            return Err(Error::format("manifest", "configuration digest does not match its content"));
        }
        Ok(m)
    }
}

fn layout(kind: ExperimentKind) -> Vec<String> {
    let v: &[&str] = match kind {
        ExperimentKind::Train => &["checkpoints/", "logs/"],
        ExperimentKind::Evaluate => &["eval_report.json", "returns.csv", "trajectories/"],
        ExperimentKind::Sweep => &["leaderboard.csv", "trials/", "incumbent.toml"],
        ExperimentKind::Benchmark => &["checkpoints/", "logs/", "eval_report.json", "benchmark.csv", "trajectories/"],
        ExperimentKind::Stability => &["eval_report.json", "stability.csv", "trajectories/"],
        ExperimentKind::Disrupt => &["eval_report.json", "disruption.csv", "trajectories/"],
        ExperimentKind::Harden => &["checkpoints/", "logs/", "eval_report.json", "hardened.csv", "trajectories/"],
        ExperimentKind::Explain => &["shapes/", "importance.csv", "importance_median.csv", "explanation.json"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn mkdir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).at(path)?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("report", e))?;
    std::fs::write(path, text + "\n").at(path)
}

fn save_outcomes(out: &Path, label: &str, outcomes: &[TrainOutcome]) -> Result<Vec<PathBuf>> {
    let ckpt_dir = mkdir(&out.join("checkpoints"))?;
    let log_dir = mkdir(&out.join("logs"))?;
    outcomes
        .iter()
        .map(|o| {
            let seed = o.checkpoint.meta.seed;
            let path = ckpt_dir.join(format!("{label}_seed{seed}.json"));
            o.checkpoint.save(&path)?;
            write_log_jsonl(&log_dir.join(format!("{label}_seed{seed}.jsonl")), &o.log)?;
            Ok(path)
        })
        .collect()
}

fn save_evaluations(out: &Path, evaluations: &[(String, &Evaluation)]) -> Result<()> {
    let traj = mkdir(&out.join("trajectories"))?;
    for (name, e) in evaluations {
        write_trajectories_csv(&traj.join(format!("{name}.csv")), &e.trajectories)?;
    }
    let reports: Vec<&EvalReport> = evaluations.iter().map(|(_, e)| &e.report).collect();
    write_json(&out.join("eval_report.json"), &reports)
}

fn label_of(checkpoints: &[Checkpoint]) -> String {
    checkpoints.first().map_or_else(|| "policy".to_string(), |c| c.meta.label.clone())
}

/// Uses the given checkpoints, or trains `config.actor` on the experiment seeds.
fn checkpoints_or_train(config: &Config, paths: &[PathBuf], out: &Path) -> Result<Vec<Checkpoint>> {
    if !paths.is_empty() {
        let seeded: Vec<(u64, PathBuf)> = paths.iter().enumerate().map(|(k, p)| (k as u64, p.clone())).collect();
        return load_checkpoints(&seeded);
    }
    let outcomes = train_many(&config.env, &config.actor, &config.ppo, &config.experiment.seeds())?;
    save_outcomes(out, &config.actor.kind.to_string(), &outcomes)?;
    require_clean(&outcomes)
}

/// Writes the manifest, then runs the experiment into `out`.
pub fn run_experiment(kind: ExperimentKind, config: &Config, checkpoints: &[PathBuf], out: &Path) -> Result<ExperimentManifest> {
    config.validate()?;
    mkdir(out)?;
    let manifest = ExperimentManifest::new(kind, config, checkpoints);
    manifest.save(&out.join(MANIFEST_FILE))?;
    execute(&manifest, out)?;
    Ok(manifest)
}

/// Replays a manifest into `out` (its own directory when absent).
pub fn rerun_manifest(path: &Path, out: Option<&Path>) -> Result<ExperimentManifest> {
    let manifest = ExperimentManifest::load(path)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    mkdir(&dir)?;
    if dir.join(MANIFEST_FILE) != path {
        manifest.save(&dir.join(MANIFEST_FILE))?;
    }
    execute(&manifest, &dir)?;
    Ok(manifest)
}

fn execute(manifest: &ExperimentManifest, out: &Path) -> Result<()> {
    let config = &manifest.config;
    let paths = &manifest.checkpoints;
    match manifest.kind {
        ExperimentKind::Train => {
            let outcomes = train_many(&config.env, &config.actor, &config.ppo, &manifest.train_seeds)?;
            save_outcomes(out, &config.actor.kind.to_string(), &outcomes)?;
            require_clean(&outcomes)?;
        }
        ExperimentKind::Evaluate => {
            if paths.is_empty() {
                return Err(Error::config("checkpoints", "evaluate needs at least one checkpoint"));
            }
            let seeded: Vec<(u64, PathBuf)> = paths
                .iter()
                .enumerate()
                .map(|(k, p)| (manifest.train_seeds.get(k).copied().unwrap_or(k as u64), p.clone()))
                .collect();
            let ckpts = load_checkpoints(&seeded)?;
            let label = label_of(&ckpts);
            let e = evaluate_checkpoints(&label, &ckpts, &config.env, &config.eval)?;
            e.report.write_returns_csv(&out.join("returns.csv"))?;
            save_evaluations(out, &[(label, &e)])?;
        }
        ExperimentKind::Sweep => {
            let result = random_search(&config.env, &config.actor, &config.ppo, &config.search)?;
            result.write_leaderboard(&out.join("leaderboard.csv"))?;
            let trials = mkdir(&out.join("trials"))?;
            for t in &result.trials {
                write_json(&trials.join(format!("trial_{:02}.json", t.index)), t)?;
            }
            let (actor, ppo) = result.incumbent_config().apply(&config.actor, &config.ppo);
            let incumbent = Config {
                actor,
                ppo: PpoConfig {
                    total_timesteps: config.ppo.total_timesteps,
                    ..ppo
                },
                ..config.clone()
            };
            incumbent.save(&out.join("incumbent.toml"))?;
        }
        ExperimentKind::Benchmark => {
            let result = run_benchmark(config, &manifest.train_seeds)?;
            for (label, outcomes) in &result.checkpoints {
                save_outcomes(out, label, outcomes)?;
            }
            let named: Vec<(String, &Evaluation)> =
                result.evaluations.iter().map(|e| (e.report.label.clone(), e)).collect();
            save_evaluations(out, &named)?;
            let rows: Vec<SweepRow> = result
                .evaluations
                .iter()
                .map(|e| SweepRow::from_report(config.env.horizon as f64, &e.report))
                .collect();
            write_sweep_csv(&out.join("benchmark.csv"), "horizon", &rows)?;
        }
        ExperimentKind::Stability => {
            let ckpts = checkpoints_or_train(config, paths, out)?;
            let label = label_of(&ckpts);
            let rows = temporal_stability(&label, &ckpts, &config.env, &config.experiment.horizons, &config.eval)?;
            write_sweep_csv(&out.join("stability.csv"), "horizon", &rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
            let named: Vec<(String, &Evaluation)> =
                rows.iter().map(|(r, e)| (format!("{label}_h{}", r.setting), e)).collect();
            save_evaluations(out, &named)?;
        }
        ExperimentKind::Disrupt => {
            let ckpts = checkpoints_or_train(config, paths, out)?;
            let label = label_of(&ckpts);
            let rows = disruption_eval(
                &label,
                &ckpts,
                &config.env,
                &config.experiment.strengths,
                config.experiment.disruption_start,
                &config.eval,
            )?;
            write_sweep_csv(&out.join("disruption.csv"), "strength", &rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
            let named: Vec<(String, &Evaluation)> =
                rows.iter().map(|(r, e)| (format!("{label}_sd{}", r.setting), e)).collect();
            save_evaluations(out, &named)?;
        }
        ExperimentKind::Harden => {
            let defaults = if paths.is_empty() {
                None
            } else {
                let seeded: Vec<(u64, PathBuf)> = paths.iter().enumerate().map(|(k, p)| (k as u64, p.clone())).collect();
                Some(load_checkpoints(&seeded)?)
            };
            let seeds: Vec<u64> = (0..config.experiment.hardened_seeds as u64)
                .map(|k| config.experiment.seed_base + k)
                .collect();
            let label = config.actor.kind.to_string();
            let result = hardened_training(
                &label,
                &config.env,
                &config.actor,
                &config.ppo,
                config.experiment.hardened_strength,
                config.experiment.disruption_start,
                &seeds,
                &config.experiment.strengths,
                &config.eval,
                defaults.as_deref(),
            )?;
            save_outcomes(out, &format!("{label}-hardened"), &result.outcomes)?;
            write_hardened_csv(&out.join("hardened.csv"), &result.rows)?;
            let named: Vec<(String, &Evaluation)> = result
                .rows
                .iter()
                .zip(&result.evaluations)
                .map(|(r, e)| (format!("{label}-hardened_sd{}", r.strength), e))
                .collect();
            save_evaluations(out, &named)?;
        }
        ExperimentKind::Explain => {
            if paths.is_empty() {
                return Err(Error::config("checkpoints", "explain needs a checkpoint"));
            }
            let seeded: Vec<(u64, PathBuf)> = paths.iter().enumerate().map(|(k, p)| (k as u64, p.clone())).collect();
            let ckpts = load_checkpoints(&seeded)?;
            explain_into(&ckpts[0], config, out)?;
            if ckpts.len() > 1 {
                let ic = &config.interpret;
                let reports = ckpts
                    .iter()
                    .map(|c| feature_importance(c, &collect_states(c, &config.env, ic.num_rollouts, ic.state_seed)?))
                    .collect::<Result<Vec<_>>>()?;
                aggregate_importance(&reports)?.write_csv(&out.join("importance_median.csv"))?;
            }
        }
    }
    Ok(())
}

/// Traces shapes, importances and the lookup policy of a NAM checkpoint
/// and writes them under `out`.
pub fn explain_into(ckpt: &Checkpoint, config: &Config, out: &Path) -> Result<ExplanationBundle> {
    if ckpt.kind() != PolicyKind::Nam {
        return Err(Error::Contract(
            "interpretation requires a NAM checkpoint; this checkpoint holds an MLP actor".into(),
        ));
    }
    let ic = &config.interpret;
    let states = collect_states(ckpt, &config.env, ic.num_rollouts, ic.state_seed)?;
    let shapes = trace_shape_functions(ckpt, &states, &config.env.feature_names(), ic.grid_points, ic.bins)?;
    let importance = feature_importance(ckpt, &states)?;
    let lookup = compile_lookup_policy(shapes.clone())?;
    let fidelity = if ic.fidelity_probes > 0 {
        Some(lookup_fidelity(ckpt, &lookup, ic.fidelity_probes, ic.state_seed)?)
    } else {
        None
    };
    shapes.write_csv(&out.join("shapes"))?;
    importance.write_csv(&out.join("importance.csv"))?;
    let bundle = ExplanationBundle {
        shapes,
        importance,
        lookup_fidelity: fidelity,
    };
    write_json(&out.join("explanation.json"), &bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_space_gives_identical_configs() {
        let space = SearchSpace {
            learning_rate: ParamRange::fixed(3e-4),
            batch_size: ParamRange::fixed(64.0),
            actor_layers: ParamRange::fixed(2.0),
            actor_width: ParamRange::fixed(16.0),
            n_epochs: ParamRange::fixed(10.0),
        };
        let configs = space.sample_configs(30, 1);
        assert_eq!(configs.len(), 30);
        assert!(configs.iter().all(|c| *c == configs[0]));
    }

    #[test]
    fn log_uniform_median() {
        let space = SearchSpace::default();
        let mut lrs: Vec<f64> = space.sample_configs(10_000, 3).iter().map(|c| c.learning_rate).collect();
        lrs.sort_by(f64::total_cmp);
        let median = 0.5 * (lrs[4999] + lrs[5000]);
        let expected = (1e-4f64 * 1e-3).sqrt();
        assert!((median / expected - 1.0).abs() < 0.1, "{median}");
    }

    #[test]
    fn sampled_configs_stay_in_range_and_replay() {
        let space = SearchSpace::default();
        let a = space.sample_configs(500, 9);
        assert!(a.iter().all(|c| space.contains(c)));
        assert_eq!(a, space.sample_configs(500, 9));
        assert_ne!(a, space.sample_configs(500, 10));
        assert!(a.iter().any(|c| c.n_epochs == 51) || a.iter().any(|c| c.n_epochs == 50));
    }

    #[test]
    fn failed_trial_scores_negative_infinity() {
        let t = TrialRecord {
            index: 0,
            config: SearchSpace::default().sample(&mut rng::stream(0, &[])),
            seeds: vec![1],
            seed_returns: vec![],
            error: Some("boom".into()),
        };
        assert_eq!(t.score(), f64::NEG_INFINITY);
        let ok = TrialRecord {
            seed_returns: vec![1.0, 2.0, 6.0],
            error: None,
            ..t
        };
        assert_eq!(ok.score(), 3.0);
    }

    #[test]
    fn search_survives_failing_trials() {
        let env = SupplyChainConfig::default().with_horizon(8);
        let ppo = PpoConfig {
            n_steps: 16,
            batch_size: 8,
            n_epochs: 1,
            ..Default::default()
        };
        let mut search = SearchConfig {
            n_configs: 3,
            seeds_per_config: 1,
            trial_timesteps: 16,
            ..Default::default()
        };
        search.space.batch_size = ParamRange::fixed(8.0);
        // an absurd learning rate can blow up some trials but never aborts the sweep
        search.space.learning_rate = ParamRange::new(1e-4, 1e3, Scaling::Log);
        let actor = ActorConfig {
            kind: PolicyKind::Mlp,
            ..Default::default()
        };
        let result = random_search(&env, &actor, &ppo, &search);
        match result {
            Ok(r) => assert_eq!(r.trials.len(), 3),
            Err(e) => assert!(matches!(e, Error::Training(_))),
        }
    }

    #[test]
    fn settings_seeds() {
        let s = ExperimentSettings {
            n_seeds: 3,
            seed_base: 10,
            ..Default::default()
        };
        assert_eq!(s.seeds(), vec![10, 11, 12]);
    }

    #[test]
    fn kind_display_matches_serde() {
        assert_eq!(ExperimentKind::Stability.to_string(), "stability");
    }
}
