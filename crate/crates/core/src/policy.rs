//! Actor and critic networks over standardised observations.
//!
//! Two actor families produce the means of a diagonal Gaussian over
//! standardised order quantities:
//!
//! * [`MlpPolicyParams`]: one dense network from all features to all means.
//! * [`NamPolicyParams`]: a multi-task neural additive model. Every feature
//!   `i` owns `S` scalar subnets `f_{i,s}`; task `t` mixes them with trainable
//!   weights, `mean_t = beta_t + sum_{i,s} w_{t,i,s} f_{i,s}(x_i)`, so each
//!   feature's effect on each task is an inspectable univariate curve.
//!
//! The critic is a separate dense network; nothing is shared with the actor.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::SupplyChainConfig;
use crate::error::{Error, IoContext, Result};
use crate::netcore::{ColumnTape, DenseNet, GradientTape, ParamKey, Parameters, Workspace};
use crate::rng::SimRng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-feature affine map `z = (x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn new(offset: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if offset.len() != scale.len() {
            return Err(Error::Contract("offset and scale lengths differ".into()));
        }
        if let Some(i) = scale.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Contract(format!("scale[{i}] must be positive")));
        }
        Ok(Self { offset, scale })
    }

    /// Maps each `[lo, hi]` range onto `[-1, 1]`.
    pub fn from_ranges(ranges: &[(f64, f64)]) -> Result<Self> {
        let offset = ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let scale = ranges.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        Self::new(offset, scale)
    }

    /// Inventory `i` spans `[0, init_mean_i + sum(capacities)]`; the history
    /// entry of stage `i` spans `[0, capacity_i]`.
    pub fn for_observations(config: &SupplyChainConfig) -> Result<Self> {
        let total_cap: f64 = config.capacities.iter().map(|&c| c as f64).sum();
        let mut ranges: Vec<(f64, f64)> = config
            .init_inv_mean
            .iter()
            .map(|&m| (0.0, m + total_cap))
            .collect();
        for _ in 0..config.action_history_len {
            ranges.extend(config.capacities.iter().map(|&c| (0.0, c as f64)));
        }
        Self::from_ranges(&ranges)
    }

    /// Order quantity of stage `i` spans `[0, capacity_i]`.
    pub fn for_actions(config: &SupplyChainConfig) -> Result<Self> {
        let ranges: Vec<(f64, f64)> = config.capacities.iter().map(|&c| (0.0, c as f64)).collect();
        Self::from_ranges(&ranges)
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| o + s * v)
            .collect()
    }

    pub fn transform_one(&self, i: usize, x: f64) -> f64 {
        (x - self.offset[i]) / self.scale[i]
    }

    pub fn inverse_one(&self, i: usize, z: f64) -> f64 {
        self.offset[i] + self.scale[i] * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Nam,
    Mlp,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Nam => "nam",
            PolicyKind::Mlp => "mlp",
        })
    }
}

/// Architecture of the actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorConfig {
    pub kind: PolicyKind,
    pub hidden_layers: usize,
    pub width: usize,
    /// Subnets per feature (NAM only).
    pub num_subnets: usize,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Nam,
            hidden_layers: 1,
            width: 8,
            num_subnets: 30,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::config("actor.hidden_layers", "must be at least 1"));
        }
        if self.width == 0 {
            return Err(Error::config("actor.width", "must be at least 1"));
        }
        if self.num_subnets == 0 {
            return Err(Error::config("actor.num_subnets", "must be at least 1"));
        }
        Ok(())
    }

    fn hidden(&self) -> Vec<usize> {
        vec![self.width; self.hidden_layers]
    }
}

/// Multi-task neural additive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamPolicyParams {
    pub num_features: usize,
    pub num_subnets: usize,
    pub num_tasks: usize,
    /// Scalar-to-scalar subnets, feature-major: index `i * S + s`.
    pub subnets: Vec<DenseNet>,
    /// `w_{t,i,s}` at index `(t * N + i) * S + s`.
    pub task_weights: Vec<f64>,
    pub task_bias: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl NamPolicyParams {
    /// Random subnets, task weights `1/S`, zero biases, zero log-std.
    pub fn init<R: Rng + ?Sized>(
        num_features: usize,
        num_tasks: usize,
        num_subnets: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(1).chain(hidden.iter().copied()).chain([1]).collect();
        let subnets = (0..num_features * num_subnets)
            .map(|_| DenseNet::init(&widths, 1.0, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            num_features,
            num_subnets,
            num_tasks,
            subnets,
            task_weights: vec![1.0 / num_subnets as f64; num_tasks * num_features * num_subnets],
            task_bias: vec![0.0; num_tasks],
            log_std: vec![0.0; num_tasks],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, s, t) = (self.num_features, self.num_subnets, self.num_tasks);
        if self.subnets.len() != n * s {
            return Err(Error::format("NAM", "subnet count does not match features x subnets"));
        }
        if let Some(k) = self.subnets.iter().position(|net| net.input_dim() != 1 || net.output_dim() != 1) {
            return Err(Error::format("NAM", format!("subnet {k} is not scalar-to-scalar")));
        }
        if self.task_weights.len() != t * n * s || self.task_bias.len() != t || self.log_std.len() != t {
            return Err(Error::format("NAM", "task tensor shapes are inconsistent"));
        }
        Ok(())
    }

    #[inline]
    fn weight_index(&self, t: usize, i: usize, s: usize) -> usize {
        (t * self.num_features + i) * self.num_subnets + s
    }

    pub fn weight(&self, t: usize, i: usize, s: usize) -> f64 {
        self.task_weights[self.weight_index(t, i, s)]
    }

    pub fn set_weight(&mut self, t: usize, i: usize, s: usize, w: f64) {
        let k = self.weight_index(t, i, s);
        self.task_weights[k] = w;
    }

    pub fn subnet(&self, i: usize, s: usize) -> &DenseNet {
        &self.subnets[i * self.num_subnets + s]
    }

    pub fn subnet_mut(&mut self, i: usize, s: usize) -> &mut DenseNet {
        &mut self.subnets[i * self.num_subnets + s]
    }

    /// Contributions of feature `i` at value `x` to every task.
    pub fn feature_contributions(&self, i: usize, x: f64, ws: &mut Workspace) -> Vec<f64> {
        let mut out = vec![0.0; self.num_tasks];
        self.add_feature_contributions(i, x, ws, &mut out);
        out
    }

    fn add_feature_contributions(&self, i: usize, x: f64, ws: &mut Workspace, out: &mut [f64]) {
        for s in 0..self.num_subnets {
            let f = self.subnet(i, s).forward_scalar(x, ws);
            for (t, acc) in out.iter_mut().enumerate() {
                *acc += self.weight(t, i, s) * f;
            }
        }
    }

    /// `f_{t,i}(x) = sum_s w_{t,i,s} f_{i,s}(x)`.
    pub fn task_shape_value(&self, t: usize, i: usize, x: f64) -> Result<f64> {
        if t >= self.num_tasks || i >= self.num_features {
            return Err(Error::Contract(format!(
                "index (task {t}, feature {i}) outside {}x{}",
                self.num_tasks, self.num_features
            )));
        }
        let mut ws = Workspace::default();
        let mut acc = 0.0;
        for s in 0..self.num_subnets {
            acc += self.weight(t, i, s) * self.subnet(i, s).forward_scalar(x, &mut ws);
        }
        Ok(acc)
    }

    /// Task means for one standardised observation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.num_features {
            return Err(Error::Contract(format!(
                "NAM expects {} features, got {}",
                self.num_features,
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("feature {i} is not finite")));
        }
        Ok(self.means(x, &mut Workspace::default()))
    }

    fn means(&self, x: &[f64], ws: &mut Workspace) -> Vec<f64> {
        let mut out = vec![0.0; self.num_tasks];
        for (i, &xi) in x.iter().enumerate() {
            self.add_feature_contributions(i, xi, ws, &mut out);
        }
        for (o, b) in out.iter_mut().zip(&self.task_bias) {
            *o += b;
        }
        out
    }

    fn record(&self, xs: &[f64], batch: usize) -> Result<(Vec<f64>, NamTape<'_>)> {
        let (n, s_count, t_count) = (self.num_features, self.num_subnets, self.num_tasks);
        if xs.len() != batch * n {
            return Err(Error::Contract(format!("expected {} inputs, got {}", batch * n, xs.len())));
        }
        let mut means = vec![0.0; batch * t_count];
        for row in means.chunks_exact_mut(t_count) {
            row.copy_from_slice(&self.task_bias);
        }
        let mut tapes = Vec::with_capacity(n * s_count);
        let mut outputs = Vec::with_capacity(n * s_count);
        let mut column = vec![0.0; batch];
        for i in 0..n {
            for (b, c) in column.iter_mut().enumerate() {
                *c = xs[b * n + i];
            }
            for s in 0..s_count {
                let (out, tape) = self.subnet(i, s).record_columns(&column, batch)?;
                for t in 0..t_count {
                    let w = self.weight(t, i, s);
                    for (b, &o) in out.iter().enumerate() {
                        means[b * t_count + t] += w * o;
                    }
                }
                tapes.push(tape);
                outputs.push(out);
            }
        }
        Ok((means, NamTape { tapes, outputs, batch }))
    }

    fn backward(&self, tape: &mut NamTape<'_>, d_means: &[f64], grads: &mut Self) -> Result<()> {
        let (n, s_count, t_count) = (self.num_features, self.num_subnets, self.num_tasks);
        let batch = tape.batch;
        for row in d_means.chunks_exact(t_count) {
            for (g, d) in grads.task_bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut d_out = vec![0.0; batch];
        for i in 0..n {
            for s in 0..s_count {
                let k = i * s_count + s;
                let out = &tape.outputs[k];
                d_out.fill(0.0);
                for t in 0..t_count {
                    let w = self.weight(t, i, s);
                    let mut gw = 0.0;
                    for b in 0..batch {
                        let d = d_means[b * t_count + t];
                        gw += d * out[b];
                        d_out[b] += d * w;
                    }
                    let wi = self.weight_index(t, i, s);
                    grads.task_weights[wi] += gw;
                }
                tape.tapes[k].backward(&d_out, &mut grads.subnets[k])?;
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

struct NamTape<'a> {
    tapes: Vec<ColumnTape<'a>>,
    outputs: Vec<Vec<f64>>,
    batch: usize,
}

impl Parameters for NamPolicyParams {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64])) {
        for (k, net) in self.subnets.iter().enumerate() {
            net.visit_as("subnet", [k / self.num_subnets, k % self.num_subnets], f);
        }
        f(ParamKey::new("task_weight", [0; 3], "w"), &self.task_weights);
        f(ParamKey::new("task_bias", [0; 3], "beta"), &self.task_bias);
        f(ParamKey::new("log_std", [0; 3], "value"), &self.log_std);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        let s = self.num_subnets;
        for (k, net) in self.subnets.iter_mut().enumerate() {
            net.visit_mut_as("subnet", [k / s, k % s], f);
        }
        f(ParamKey::new("task_weight", [0; 3], "w"), &mut self.task_weights);
        f(ParamKey::new("task_bias", [0; 3], "beta"), &mut self.task_bias);
        f(ParamKey::new("log_std", [0; 3], "value"), &mut self.log_std);
    }
}

/// Dense actor mapping all features to all task means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicyParams {
    pub net: DenseNet,
    pub log_std: Vec<f64>,
}

impl MlpPolicyParams {
    /// The output layer starts scaled by 0.01 so initial means sit near the
    /// middle of the action range.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(inputs)
            .chain(hidden.iter().copied())
            .chain([outputs])
            .collect();
        Ok(Self {
            net: DenseNet::init(&widths, 0.01, rng)?,
            log_std: vec![0.0; outputs],
        })
    }
}

impl Parameters for MlpPolicyParams {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64])) {
        self.net.visit_as("actor", [0, 0], f);
        f(ParamKey::new("log_std", [0; 3], "value"), &self.log_std);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        self.net.visit_mut_as("actor", [0, 0], f);
        f(ParamKey::new("log_std", [0; 3], "value"), &mut self.log_std);
    }
}

/// Value network: two hidden ELU layers of 64 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub net: DenseNet,
}

impl CriticParams {
    pub const HIDDEN: [usize; 2] = [64, 64];

    pub fn init<R: Rng + ?Sized>(inputs: usize, rng: &mut R) -> Result<Self> {
        let widths = [inputs, Self::HIDDEN[0], Self::HIDDEN[1], 1];
        Ok(Self {
            net: DenseNet::init(&widths, 1.0, rng)?,
        })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.forward(x)?[0])
    }

    pub fn value_with(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        self.net.forward_with(x, ws)[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
        }
    }
}

impl Parameters for CriticParams {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64])) {
        self.net.visit_as("critic", [0, 0], f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        self.net.visit_mut_as("critic", [0, 0], f);
    }
}

/// Either actor family behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Actor {
    Nam(NamPolicyParams),
    Mlp(MlpPolicyParams),
}

/// Recorded actor forward pass over a batch.
pub struct ActorTape<'a>(ActorTapeInner<'a>);

enum ActorTapeInner<'a> {
    Nam(NamTape<'a>),
    Mlp(GradientTape<'a>),
}

impl Actor {
    pub fn init<R: Rng + ?Sized>(config: &ActorConfig, inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            PolicyKind::Nam => Actor::Nam(NamPolicyParams::init(
                inputs,
                outputs,
                config.num_subnets,
                &config.hidden(),
                rng,
            )?),
            PolicyKind::Mlp => Actor::Mlp(MlpPolicyParams::init(inputs, outputs, &config.hidden(), rng)?),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Actor::Nam(_) => PolicyKind::Nam,
            Actor::Mlp(_) => PolicyKind::Mlp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Actor::Nam(p) => p.num_features,
            Actor::Mlp(p) => p.net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.log_std().len()
    }

    pub fn log_std(&self) -> &[f64] {
        match self {
            Actor::Nam(p) => &p.log_std,
            Actor::Mlp(p) => &p.log_std,
        }
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        match self {
            Actor::Nam(p) => &mut p.log_std,
            Actor::Mlp(p) => &mut p.log_std,
        }
    }

    pub fn as_nam(&self) -> Option<&NamPolicyParams> {
        match self {
            Actor::Nam(p) => Some(p),
            Actor::Mlp(_) => None,
        }
    }

    /// Gaussian means for one standardised observation.
    pub fn means(&self, x: &[f64], ws: &mut Workspace) -> Vec<f64> {
        match self {
            Actor::Nam(p) => p.means(x, ws),
            Actor::Mlp(p) => p.net.forward_with(x, ws).to_vec(),
        }
    }

    /// Batched forward pass (`batch` rows of standardised observations).
    pub fn record(&self, xs: &[f64], batch: usize) -> Result<(Vec<f64>, ActorTape<'_>)> {
        match self {
            Actor::Nam(p) => {
                let (m, tape) = p.record(xs, batch)?;
                Ok((m, ActorTape(ActorTapeInner::Nam(tape))))
            }
            Actor::Mlp(p) => {
                let (m, tape) = p.net.record(xs, batch)?;
                Ok((m, ActorTape(ActorTapeInner::Mlp(tape))))
            }
        }
    }

    /// Accumulates gradients of the loss given its gradient with respect to
    /// the batch means and to the log-std vector.
    pub fn backward(&self, tape: &mut ActorTape<'_>, d_means: &[f64], d_log_std: &[f64], grads: &mut Actor) -> Result<()> {
        match (self, &mut tape.0, grads) {
            (Actor::Nam(p), ActorTapeInner::Nam(t), Actor::Nam(g)) => {
                p.backward(t, d_means, g)?;
                add_into(&mut g.log_std, d_log_std);
            }
            (Actor::Mlp(_), ActorTapeInner::Mlp(t), Actor::Mlp(g)) => {
                t.backward(d_means, &mut g.net)?;
                add_into(&mut g.log_std, d_log_std);
            }
            _ => return Err(Error::Contract("actor, tape and gradient kinds differ".into())),
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Parameters for Actor {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64])) {
        match self {
            Actor::Nam(p) => p.visit(f),
            Actor::Mlp(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        match self {
            Actor::Nam(p) => p.visit_mut(f),
            Actor::Mlp(p) => p.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Deterministic,
}

/// Log-density of `action` under `N(means, diag(exp(log_std))^2)`.
pub fn gaussian_log_prob(action: &[f64], means: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(means)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Differential entropy of the diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
}

/// Draws (or, deterministically, returns the mean of) a raw action together
/// with its log-density.
pub fn gaussian_action(means: &[f64], log_std: &[f64], rng: &mut SimRng, mode: ActionMode) -> (Vec<f64>, f64) {
    let noise: Vec<f64> = match mode {
        ActionMode::Sample => means.iter().map(|_| rng.sample(StandardNormal)).collect(),
        ActionMode::Deterministic => vec![0.0; means.len()],
    };
    let action = means
        .iter()
        .zip(log_std)
        .zip(&noise)
        .map(|((m, ls), z)| m + ls.exp() * z)
        .collect();
    let log_prob = noise
        .iter()
        .zip(log_std)
        .map(|(z, ls)| -0.5 * z * z - ls - HALF_LN_2PI)
        .sum();
    (action, log_prob)
}

/// Destandardises a raw action, clips to `[0, capacity]` and rounds half
/// away from zero.
pub fn to_env_action(raw: &[f64], actions: &Standardizer, config: &SupplyChainConfig) -> Vec<i64> {
    raw.iter()
        .enumerate()
        .map(|(i, &z)| {
            let q = actions.inverse_one(i, z);
            let cap = config.capacities[i] as f64;
            if q.is_nan() {
                0
            } else {
                q.clamp(0.0, cap).round() as i64
            }
        })
        .collect()
}

/// Anything that can choose orders for an observation in original units.
pub trait OrderPolicy: Sync {
    /// `rng` is the rollout's action stream; deterministic policies ignore it.
    fn orders(&self, obs: &[f64], rng: &mut SimRng) -> Vec<i64>;
}

/// Uniformly random integer orders in `[0, capacity]`.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub capacities: Vec<u64>,
}

impl RandomPolicy {
    pub fn new(config: &SupplyChainConfig) -> Self {
        Self {
            capacities: config.capacities.clone(),
        }
    }
}

impl OrderPolicy for RandomPolicy {
    fn orders(&self, _obs: &[f64], rng: &mut SimRng) -> Vec<i64> {
        self.capacities
            .iter()
            .map(|&c| rng.random_range(0..=c) as i64)
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "echelon-policy/1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub seed: u64,
    pub timesteps: u64,
    pub updates: u64,
    /// Digest of the environment configuration used for training.
    pub env_digest: String,
}

/// Self-contained trained policy: standardisers, actor, critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub obs_standardizer: Standardizer,
    pub action_standardizer: Standardizer,
    pub capacities: Vec<u64>,
    pub actor: Actor,
    pub critic: CriticParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(config: &SupplyChainConfig, actor: Actor, critic: CriticParams, meta: CheckpointMeta) -> Result<Self> {
        let ckpt = Self {
            format: CHECKPOINT_FORMAT.to_string(),
            obs_standardizer: Standardizer::for_observations(config)?,
            action_standardizer: Standardizer::for_actions(config)?,
            capacities: config.capacities.clone(),
            actor,
            critic,
            meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", format!("unknown format `{}`", self.format)));
        }
        let (obs, act) = (self.obs_standardizer.dim(), self.action_standardizer.dim());
        if self.actor.input_dim() != obs || self.critic.net.input_dim() != obs {
            return Err(Error::format("checkpoint", "network input width differs from observation size"));
        }
        if self.actor.output_dim() != act || self.capacities.len() != act {
            return Err(Error::format("checkpoint", "actor output width differs from action size"));
        }
        if let Actor::Nam(p) = &self.actor {
            p.validate()?;
        }
        if let Actor::Mlp(p) = &self.actor {
            if p.net.output_dim() != act {
                return Err(Error::format("checkpoint", "MLP output width differs from action size"));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> PolicyKind {
        self.actor.kind()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format("checkpoint", e))?;
        std::fs::write(path, text).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("checkpoint {}", path.display()), e))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Standardised Gaussian means for an observation in original units.
    pub fn mean_action(&self, obs: &[f64]) -> Vec<f64> {
        let x = self.obs_standardizer.transform(obs);
        self.actor.means(&x, &mut Workspace::default())
    }

    pub fn deterministic_orders(&self, obs: &[f64]) -> Vec<i64> {
        let means = self.mean_action(obs);
        self.orders_from_raw(&means)
    }

    fn orders_from_raw(&self, raw: &[f64]) -> Vec<i64> {
        raw.iter()
            .enumerate()
            .map(|(i, &z)| {
                let q = self.action_standardizer.inverse_one(i, z);
                if q.is_nan() {
                    0
                } else {
                    q.clamp(0.0, self.capacities[i] as f64).round() as i64
                }
            })
            .collect()
    }

    pub fn policy(&self, mode: ActionMode) -> NetworkPolicy<'_> {
        NetworkPolicy { checkpoint: self, mode }
    }
}

/// A checkpoint acting in a chosen [`ActionMode`].
#[derive(Debug, Clone, Copy)]
pub struct NetworkPolicy<'a> {
    pub checkpoint: &'a Checkpoint,
    pub mode: ActionMode,
}

impl OrderPolicy for NetworkPolicy<'_> {
    fn orders(&self, obs: &[f64], rng: &mut SimRng) -> Vec<i64> {
        let means = self.checkpoint.mean_action(obs);
        let (raw, _) = gaussian_action(&means, self.checkpoint.actor.log_std(), rng, self.mode);
        self.checkpoint.orders_from_raw(&raw)
    }
}

impl OrderPolicy for Checkpoint {
    fn orders(&self, obs: &[f64], _rng: &mut SimRng) -> Vec<i64> {
        self.deterministic_orders(obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::f64::consts::PI;

    fn small_nam(seed: u64, n: usize, t: usize, s: usize, hidden: &[usize]) -> NamPolicyParams {
        let mut r = rng::stream(seed, &[]);
        let mut p = NamPolicyParams::init(n, t, s, hidden, &mut r).unwrap();
        for w in &mut p.task_weights {
            *w = r.random_range(-1.0..1.0);
        }
        for b in &mut p.task_bias {
            *b = r.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = small_nam(1, 33, 3, 4, &[8]);
        p.task_weights.fill(0.0);
        p.task_bias = vec![0.5, -1.0, 2.0];
        let x = vec![0.3; 33];
        assert_eq!(p.forward(&x).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn single_task_single_subnet_is_plain_gam() {
        let mut p = small_nam(2, 5, 1, 1, &[6]);
        p.task_weights.fill(1.0);
        p.task_bias = vec![0.25];
        let x = [0.1, -0.4, 0.9, -1.0, 0.0];
        let mut expected = 0.25;
        for (i, &xi) in x.iter().enumerate() {
            let f = p.subnet(i, 0).forward(&[xi]).unwrap()[0];
            assert_eq!(p.task_shape_value(0, i, xi).unwrap(), f);
            expected += f;
        }
        assert!((p.forward(&x).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_identity() {
        let p = small_nam(3, 33, 3, 30, &[8]);
        let mut r = rng::stream(33, &[]);
        let x: Vec<f64> = (0..33).map(|_| r.random_range(-1.5..1.5)).collect();
        let y = p.forward(&x).unwrap();
        for t in 0..3 {
            let sum: f64 = (0..33).map(|i| p.task_shape_value(t, i, x[i]).unwrap()).sum();
            assert!((sum + p.task_bias[t] - y[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_feature_contributes_nothing() {
        let mut p = small_nam(4, 6, 3, 5, &[4, 4]);
        for t in 0..3 {
            for s in 0..5 {
                p.set_weight(t, 2, s, 0.0);
            }
        }
        for x in [-3.0, 0.0, 0.7] {
            for t in 0..3 {
                assert_eq!(p.task_shape_value(t, 2, x).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn shape_value_index_errors() {
        let p = small_nam(5, 4, 2, 2, &[3]);
        assert!(matches!(p.task_shape_value(2, 0, 0.0), Err(Error::Contract(_))));
        assert!(matches!(p.task_shape_value(0, 4, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = small_nam(6, 3, 1, 1, &[2]);
        assert!(matches!(p.forward(&[0.0, f64::NAN, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn recorded_batch_matches_single_forward() {
        let p = small_nam(7, 4, 3, 3, &[5]);
        let actor = Actor::Nam(p.clone());
        let xs = [0.1, 0.2, -0.3, 0.4, -1.0, 0.5, 0.0, 2.0];
        let (m, _) = actor.record(&xs, 2).unwrap();
        for b in 0..2 {
            let single = p.forward(&xs[b * 4..(b + 1) * 4]).unwrap();
            for t in 0..3 {
                assert!((m[b * 3 + t] - single[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_normal_log_prob_at_mean() {
        let lp = gaussian_log_prob(&[0.0; 3], &[0.0; 3], &[0.0; 3]);
        assert!((lp + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
        let mut r = rng::stream(0, &[]);
        let (a, lp2) = gaussian_action(&[0.0; 3], &[0.0; 3], &mut r, ActionMode::Deterministic);
        assert_eq!(a, vec![0.0; 3]);
        assert!((lp2 - lp).abs() < 1e-14);
    }

    #[test]
    fn vanishing_std_samples_mean() {
        let mut r = rng::stream(1, &[]);
        let (a, _) = gaussian_action(&[1.0, -2.0, 3.0], &[f64::NEG_INFINITY; 3], &mut r, ActionMode::Sample);
        assert_eq!(a, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn sampled_log_prob_matches_density() {
        let mut r = rng::stream(2, &[]);
        let means = [0.3, -0.2, 1.0];
        let log_std = [-0.5, 0.1, 0.4];
        for _ in 0..20 {
            let (a, lp) = gaussian_action(&means, &log_std, &mut r, ActionMode::Sample);
            assert!((lp - gaussian_log_prob(&a, &means, &log_std)).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_moments() {
        let mut r = rng::stream(3, &[]);
        let means = [1.0, -0.5, 0.0];
        let log_std = [0.0, -1.0, 0.5];
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let (a, _) = gaussian_action(&means, &log_std, &mut r, ActionMode::Sample);
            for d in 0..3 {
                sum[d] += a[d];
                sq[d] += a[d] * a[d];
            }
        }
        for d in 0..3 {
            let sigma2 = (2.0 * log_std[d]).exp();
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let se_mean = (sigma2 / n as f64).sqrt();
            let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - means[d]).abs() < 3.0 * se_mean, "mean {d}");
            assert!((var - sigma2).abs() < 3.0 * se_var, "var {d}");
        }
    }

    #[test]
    fn log_density_integrates_to_one_on_slice() {
        // 1-D slice: vary the first coordinate, others fixed at their means.
        let means = [0.4, 0.0, 0.0];
        let log_std = [-0.3, 0.2, 0.0];
        let offset: f64 = (1..3).map(|d| -log_std[d] - HALF_LN_2PI).sum();
        let sigma = log_std[0].exp();
        let (lo, hi) = (means[0] - 12.0 * sigma, means[0] + 12.0 * sigma);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| (gaussian_log_prob(&[x, 0.0, 0.0], &means, &log_std) - offset).exp();
        // composite Simpson
        let mut acc = f(lo) + f(hi);
        for k in 1..n {
            let x = lo + k as f64 * h;
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn env_action_clip_and_round() {
        let config = SupplyChainConfig::default();
        let acts = Standardizer::for_actions(&config).unwrap();
        let raw_for = |i: usize, q: f64| acts.transform_one(i, q);
        let a = to_env_action(&[raw_for(0, -50.0), raw_for(1, 100.0), raw_for(2, 12.4)], &acts, &config);
        assert_eq!(a, vec![0, 90, 12]);
        let a = to_env_action(&[raw_for(0, 12.6), raw_for(1, 12.5), raw_for(2, f64::NAN)], &acts, &config);
        assert_eq!(a, vec![13, 13, 0]);
    }

    #[test]
    fn standardizer_round_trip() {
        let config = SupplyChainConfig::default();
        let s = Standardizer::for_observations(&config).unwrap();
        assert_eq!(s.dim(), 33);
        assert!(s.scale.iter().all(|&v| v > 0.0));
        let mut r = rng::stream(4, &[]);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..33).map(|_| r.random_range(-100.0..600.0)).collect();
            let back = s.inverse(&s.transform(&x));
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn critic_dimension_mismatch() {
        let mut r = rng::stream(5, &[]);
        let c = CriticParams::init(33, &mut r).unwrap();
        assert!(c.value(&[0.0; 33]).is_ok());
        assert!(matches!(c.value(&[0.0; 4]), Err(Error::Contract(_))));
        let mut zero = c.zeros_like();
        zero.net.fill(0.0);
        assert_eq!(zero.value(&[1.0; 33]).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let config = SupplyChainConfig::default();
        let mut r = rng::stream(6, &[]);
        let actor_cfg = ActorConfig {
            num_subnets: 3,
            ..Default::default()
        };
        let actor = Actor::init(&actor_cfg, 33, 3, &mut r).unwrap();
        let critic = CriticParams::init(33, &mut r).unwrap();
        let ckpt = Checkpoint::new(&config, actor, critic, CheckpointMeta::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| c.actor.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn deterministic_policy_is_pure() {
        let config = SupplyChainConfig::default();
        let mut r = rng::stream(7, &[]);
        let actor = Actor::init(&ActorConfig { kind: PolicyKind::Mlp, ..Default::default() }, 33, 3, &mut r).unwrap();
        let critic = CriticParams::init(33, &mut r).unwrap();
        let ckpt = Checkpoint::new(&config, actor, critic, CheckpointMeta::default()).unwrap();
        let obs: Vec<f64> = (0..33).map(|k| k as f64 * 3.0).collect();
        let mut r1 = rng::stream(1, &[]);
        let mut r2 = rng::stream(2, &[]);
        let pol = ckpt.policy(ActionMode::Deterministic);
        assert_eq!(pol.orders(&obs, &mut r1), pol.orders(&obs, &mut r2));
    }
}
