//! Discrete-time simulator of a serial multi-echelon inventory chain.
//!
//! Stage 0 is the retailer facing customer demand; stage `num_stages - 1`
//! replenishes from a virtual source with unlimited stock. Each period runs
//! five phases in a fixed order:
//!
//! 1. pipeline arrivals scheduled for this period land on hand;
//! 2. every stage places an order, clipped to its capacity and to its
//!    supplier's on-hand stock; the supplier ships immediately and the units
//!    enter the pipeline for `lead_time` periods;
//! 3. customer demand is drawn and the retailer serves backlog plus new
//!    demand from stock, carrying the rest forward as backlog;
//! 4. every stage books `sales - procurement - holding`, and the retailer
//!    additionally pays a per-unit penalty on the carried backlog;
//! 5. the executed orders are pushed into the action history.
//!
//! Rewards are undiscounted; discounting belongs to the learner.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::rng::{self, tag, SimRng};

/// Parameters of the customer demand process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Poisson rate of regular customer demand.
    pub base_lambda: f64,
    /// Disruption rate as a multiple of `base_lambda`.
    pub disruption_strength: f64,
    /// First period that carries disruption demand; `None` disables it.
    pub disruption_start: Option<usize>,
    /// Per-period decay applied to disruption samples.
    pub attenuation: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            base_lambda: 20.0,
            disruption_strength: 0.0,
            disruption_start: None,
            attenuation: 0.8,
        }
    }
}

impl DemandConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lambda > 0.0 && self.base_lambda.is_finite()) {
            return Err(Error::config("demand.base_lambda", "must be a positive finite rate"));
        }
        if !(self.disruption_strength >= 0.0 && self.disruption_strength.is_finite()) {
            return Err(Error::config("demand.disruption_strength", "must be finite and >= 0"));
        }
        if !(self.attenuation > 0.0 && self.attenuation < 1.0) {
            return Err(Error::config("demand.attenuation", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Configuration with a disruption of strength `strength` starting at `start`.
    pub fn with_disruption(&self, strength: f64, start: usize) -> Self {
        Self {
            disruption_strength: strength,
            disruption_start: Some(start),
            ..self.clone()
        }
    }
}

/// Static description of the supply chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupplyChainConfig {
    pub num_stages: usize,
    pub init_inv_mean: Vec<f64>,
    pub init_inv_std: f64,
    pub lead_times: Vec<usize>,
    pub capacities: Vec<u64>,
    /// Selling price per stage; the extra last entry is the source's raw-material price.
    pub unit_price: Vec<f64>,
    pub holding_cost: Vec<f64>,
    pub backlog_cost: f64,
    pub horizon: usize,
    pub action_history_len: usize,
    pub demand: DemandConfig,
}

impl Default for SupplyChainConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            init_inv_mean: vec![100.0, 100.0, 200.0],
            init_inv_std: 50.0,
            lead_times: vec![3, 5, 10],
            capacities: vec![100, 90, 80],
            unit_price: vec![2.00, 1.50, 1.00, 0.75],
            holding_cost: vec![0.150, 0.100, 0.050],
            backlog_cost: 0.100,
            horizon: 60,
            action_history_len: 10,
            demand: DemandConfig::default(),
        }
    }
}

impl SupplyChainConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if n == 0 {
            return Err(Error::config("num_stages", "must be at least 1"));
        }
        let check_len = |field: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(Error::config(field, format!("expected {want} entries, found {len}")))
            }
        };
        check_len("init_inv_mean", self.init_inv_mean.len(), n)?;
        check_len("lead_times", self.lead_times.len(), n)?;
        check_len("capacities", self.capacities.len(), n)?;
        check_len("holding_cost", self.holding_cost.len(), n)?;
        check_len("unit_price", self.unit_price.len(), n + 1)?;

        if let Some(i) = self.init_inv_mean.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::config(format!("init_inv_mean[{i}]"), "must be finite and >= 0"));
        }
        if !(self.init_inv_std.is_finite() && self.init_inv_std >= 0.0) {
            return Err(Error::config("init_inv_std", "must be finite and >= 0"));
        }
        if let Some(i) = self.lead_times.iter().position(|&l| l == 0) {
            return Err(Error::config(format!("lead_times[{i}]"), "must be positive"));
        }
        if let Some(i) = self.capacities.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("capacities[{i}]"), "must be positive"));
        }
        if let Some(i) = self.unit_price.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::config(format!("unit_price[{i}]"), "must be positive"));
        }
        if let Some(i) = self.unit_price.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::config(
                format!("unit_price[{}]", i + 1),
                "prices must strictly decrease upstream",
            ));
        }
        if let Some(i) = self.holding_cost.iter().position(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::config(format!("holding_cost[{i}]"), "must be positive"));
        }
        if !(self.backlog_cost.is_finite() && self.backlog_cost > 0.0) {
            return Err(Error::config("backlog_cost", "must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.action_history_len == 0 {
            return Err(Error::config("action_history_len", "must be at least 1"));
        }
        self.demand.validate()
    }

    /// Length of the observation vector: inventories plus the action history.
    pub fn obs_dim(&self) -> usize {
        self.num_stages * (1 + self.action_history_len)
    }

    /// Same chain evaluated over a different episode length.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Human-readable names of the observation features, in vector order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.num_stages).map(|i| format!("I{i}")).collect();
        for lag in (1..=self.action_history_len).rev() {
            for i in 0..self.num_stages {
                names.push(format!("a{i}(t-{lag})"));
            }
        }
        names
    }
}

/// Independent random streams feeding one episode.
///
/// Base and disruption demand use separate streams so that changing the
/// disruption strength never perturbs the base demand sequence.
#[derive(Debug, Clone)]
pub struct EnvRng {
    pub init: SimRng,
    pub base_demand: SimRng,
    pub disruption: SimRng,
}

impl EnvRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            init: rng::stream(seed, &[tag::ENV_INIT]),
            base_demand: rng::stream(seed, &[tag::DEMAND_BASE]),
            disruption: rng::stream(seed, &[tag::DEMAND_DISRUPTION]),
        }
    }
}

/// Rates above this use the library sampler instead of inversion
/// (`exp(-lambda)` would underflow).
const INVERSION_LIMIT: f64 = 500.0;

/// Poisson quantile at `u` by CDF inversion. Monotone in both `u` and `lambda`.
fn poisson_quantile(lambda: f64, u: f64) -> u64 {
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
        if p == 0.0 && k as f64 > lambda {
            break;
        }
    }
    k
}

fn sample_poisson(lambda: f64, rng: &mut SimRng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda <= INVERSION_LIMIT {
        poisson_quantile(lambda, rng.random::<f64>())
    } else {
        Poisson::new(lambda)
            .map(|d| d.sample(rng) as u64)
            .unwrap_or(0)
    }
}

/// Customer demand for period `t`: regular Poisson demand plus the
/// attenuated disruption sample once the disruption has started.
pub fn sample_demand(cfg: &DemandConfig, t: usize, rng: &mut EnvRng) -> u64 {
    let base = sample_poisson(cfg.base_lambda, &mut rng.base_demand);
    let extra = match cfg.disruption_start {
        Some(start) if t >= start && cfg.disruption_strength > 0.0 => {
            let raw = sample_poisson(cfg.disruption_strength * cfg.base_lambda, &mut rng.disruption);
            let decay = cfg.attenuation.powi((t - start) as i32);
            (raw as f64 * decay).round() as u64
        }
        _ => 0,
    };
    base + extra
}

/// Mutable simulator state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub t: usize,
    pub inventory: Vec<u64>,
    /// Per stage, in-transit orders as `(arrival_period, quantity)`, oldest first.
    pub pipeline: Vec<VecDeque<(usize, u64)>>,
    pub backlog: u64,
    /// Flattened `action_history_len x num_stages` executed orders, oldest first.
    pub action_history: Vec<u64>,
}

/// Per-stage accounting of one period.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub sales_revenue: f64,
    pub procurement_cost: f64,
    pub holding_cost: f64,
    pub backlog_cost: f64,
    /// Units requested of this stage: customer demand for the retailer,
    /// the downstream (capacity-clipped) order otherwise.
    pub demand: u64,
    /// Units shipped by this stage.
    pub fulfilled: u64,
    pub arrivals: u64,
    /// Units this stage ordered after clipping.
    pub ordered: u64,
    pub end_inventory: u64,
}

impl StageInfo {
    pub fn profit(&self) -> f64 {
        self.sales_revenue - self.procurement_cost - self.holding_cost - self.backlog_cost
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: Vec<StageInfo>,
}

/// Draws a fresh initial state.
pub fn reset(config: &SupplyChainConfig, rng: &mut EnvRng) -> Result<(EnvState, Vec<f64>)> {
    config.validate()?;
    let n = config.num_stages;
    let inventory = config
        .init_inv_mean
        .iter()
        .map(|&mean| {
            let draw = Normal::new(mean, config.init_inv_std)
                .map_err(|e| Error::config("init_inv_std", e.to_string()))?
                .sample(&mut rng.init);
            Ok(draw.max(0.0).round() as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let state = EnvState {
        t: 0,
        inventory,
        pipeline: vec![VecDeque::new(); n],
        backlog: 0,
        action_history: vec![0; n * config.action_history_len],
    };
    let obs = build_observation(&state, config);
    Ok((state, obs))
}

/// `[I_0 .. I_{n-1}, a(t-L) .. a(t-1)]` with the most recent action last.
pub fn build_observation(state: &EnvState, config: &SupplyChainConfig) -> Vec<f64> {
    let mut obs = Vec::with_capacity(config.obs_dim());
    obs.extend(state.inventory.iter().map(|&v| v as f64));
    obs.extend(state.action_history.iter().map(|&v| v as f64));
    obs
}

/// Advances one period, drawing customer demand from `rng`.
pub fn env_step(
    state: &mut EnvState,
    action: &[i64],
    config: &SupplyChainConfig,
    rng: &mut EnvRng,
) -> Result<StepResult> {
    check_step(state, action, config)?;
    let demand = sample_demand(&config.demand, state.t, rng);
    step_with_demand(state, action, config, demand)
}

fn check_step(state: &EnvState, action: &[i64], config: &SupplyChainConfig) -> Result<()> {
    if state.t >= config.horizon {
        return Err(Error::Protocol(format!(
            "step called after the episode ended at period {}",
            config.horizon
        )));
    }
    if action.len() != config.num_stages {
        return Err(Error::Contract(format!(
            "action has {} entries, expected {}",
            action.len(),
            config.num_stages
        )));
    }
    if let Some(i) = action.iter().position(|&a| a < 0) {
        return Err(Error::Contract(format!("negative order {} at stage {i}", action[i])));
    }
    Ok(())
}

/// Advances one period with the customer demand supplied by the caller.
pub fn step_with_demand(
    state: &mut EnvState,
    action: &[i64],
    config: &SupplyChainConfig,
    demand: u64,
) -> Result<StepResult> {
    check_step(state, action, config)?;
    let n = config.num_stages;
    let t = state.t;
    let mut info = vec![StageInfo::default(); n];

    for (i, queue) in state.pipeline.iter_mut().enumerate() {
        while let Some(&(arrival, qty)) = queue.front() {
            if arrival > t {
                break;
            }
            queue.pop_front();
            state.inventory[i] += qty;
            info[i].arrivals += qty;
        }
    }

    let mut placed = vec![0u64; n];
    for i in 0..n {
        let requested = (action[i] as u64).min(config.capacities[i]);
        let qty = if i + 1 < n {
            let q = requested.min(state.inventory[i + 1]);
            state.inventory[i + 1] -= q;
            info[i + 1].demand = requested;
            info[i + 1].fulfilled = q;
            q
        } else {
            requested
        };
        placed[i] = qty;
        info[i].ordered = qty;
        state.pipeline[i].push_back((t + config.lead_times[i], qty));
    }

    let due = demand + state.backlog;
    let shipped = state.inventory[0].min(due);
    state.inventory[0] -= shipped;
    state.backlog = due - shipped;
    info[0].demand = demand;
    info[0].fulfilled = shipped;

    for (i, stage) in info.iter_mut().enumerate() {
        stage.end_inventory = state.inventory[i];
        stage.sales_revenue = config.unit_price[i] * stage.fulfilled as f64;
        stage.procurement_cost = config.unit_price[i + 1] * stage.ordered as f64;
        stage.holding_cost = config.holding_cost[i] * stage.end_inventory as f64;
    }
    info[0].backlog_cost = config.backlog_cost * state.backlog as f64;
    let reward = info.iter().map(StageInfo::profit).sum();

    state.action_history.drain(..n);
    state.action_history.extend_from_slice(&placed);
    state.t += 1;

    Ok(StepResult {
        observation: build_observation(state, config),
        reward,
        done: state.t >= config.horizon,
        info,
    })
}

/// Owning wrapper bundling config, state and random streams of one episode.
#[derive(Debug, Clone)]
pub struct SupplyChainEnv {
    config: SupplyChainConfig,
    state: EnvState,
    rng: EnvRng,
}

impl SupplyChainEnv {
    /// Starts an episode whose randomness is fully determined by `seed`.
    pub fn new(config: SupplyChainConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        let mut rng = EnvRng::from_seed(seed);
        let (state, obs) = reset(&config, &mut rng)?;
        Ok((Self { config, state, rng }, obs))
    }

    pub fn step(&mut self, action: &[i64]) -> Result<StepResult> {
        env_step(&mut self.state, action, &self.config, &mut self.rng)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &SupplyChainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.config.horizon
    }
}

#[derive(Serialize)]
struct TraceRow {
    period: usize,
    stage: usize,
    sales_revenue: f64,
    procurement_cost: f64,
    holding_cost: f64,
    backlog_cost: f64,
    demand: u64,
    fulfilled: u64,
    arrivals: u64,
    ordered: u64,
    end_inventory: u64,
    profit: f64,
}

impl TraceRow {
    fn new(period: usize, stage: usize, info: &StageInfo) -> Self {
        Self {
            period,
            stage,
            sales_revenue: info.sales_revenue,
            procurement_cost: info.procurement_cost,
            holding_cost: info.holding_cost,
            backlog_cost: info.backlog_cost,
            demand: info.demand,
            fulfilled: info.fulfilled,
            arrivals: info.arrivals,
            ordered: info.ordered,
            end_inventory: info.end_inventory,
            profit: info.profit(),
        }
    }
}

/// Writes one CSV row per (period, stage) with the accounting breakdown.
pub fn write_trace_csv(path: &Path, steps: &[StepResult]) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut writer = csv::Writer::from_writer(file);
    for (period, step) in steps.iter().enumerate() {
        for (stage, info) in step.info.iter().enumerate() {
            writer
                .serialize(TraceRow::new(period, stage, info))
                .map_err(|e| Error::format("trace csv", e))?;
        }
    }
    writer.flush().at(path)?;
    writer
        .into_inner()
        .map_err(|e| Error::format("trace csv", e))?
        .flush()
        .at(path)
}
