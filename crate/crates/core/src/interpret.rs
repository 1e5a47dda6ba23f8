//! Shape functions, feature importances and lookup-table policies traced
//! from a trained additive actor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::SupplyChainConfig;
use crate::error::{Error, IoContext, Result};
use crate::evalstats::{csv_error, run_episode};
use crate::netcore::Workspace;
use crate::policy::{ActionMode, Checkpoint, NamPolicyParams, OrderPolicy};
use crate::rng::{self, tag, SimRng};

pub const DEFAULT_GRID_POINTS: usize = 256;
pub const DEFAULT_BINS: usize = 32;

/// Observations visited by the deterministic policy, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSet {
    pub states: Vec<Vec<f64>>,
    pub description: String,
}

impl StateSet {
    pub fn new(states: Vec<Vec<f64>>, description: impl Into<String>) -> Self {
        Self {
            states,
            description: description.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Runs `num_rollouts` deterministic episodes and keeps every observation the
/// policy acted on.
pub fn collect_states(checkpoint: &Checkpoint, config: &SupplyChainConfig, num_rollouts: usize, seed: u64) -> Result<StateSet> {
    let policy = checkpoint.policy(ActionMode::Deterministic);
    let mut states = Vec::with_capacity(num_rollouts * config.horizon);
    for r in 0..num_rollouts {
        let env_seed = rng::derive_seed(seed, &[tag::EVAL, 0x5747, r as u64]);
        let (_, first) = crate::env::SupplyChainEnv::new(config.clone(), env_seed)?;
        let steps = run_episode(&policy, config, env_seed, &mut rng::stream(seed, &[tag::ACTION_NOISE]))?;
        states.push(first);
        states.extend(steps.iter().take(steps.len().saturating_sub(1)).map(|s| s.observation.clone()));
    }
    Ok(StateSet::new(
        states,
        format!("{num_rollouts} deterministic rollouts, seed {seed}, horizon {}", config.horizon),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// One feature's traced contribution to one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCurve {
    pub feature: String,
    /// Strictly increasing feature values in original units.
    pub grid: Vec<f64>,
    /// Contribution to the task's order quantity, in units.
    pub contribution: Vec<f64>,
}

impl ShapeCurve {
    /// Piecewise-linear interpolation, constant beyond the grid ends.
    pub fn interpolate(&self, x: f64) -> f64 {
        let g = &self.grid;
        let c = &self.contribution;
        let last = g.len() - 1;
        if x <= g[0] {
            return c[0];
        }
        if x >= g[last] {
            return c[last];
        }
        let k = g.partition_point(|&v| v <= x);
        let (x0, x1) = (g[k - 1], g[k]);
        if x == x0 {
            return c[k - 1];
        }
        let frac = (x - x0) / (x1 - x0);
        c[k - 1] + frac * (c[k] - c[k - 1])
    }

    fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 || self.grid.len() != self.contribution.len() {
            return Err(Error::format(
                "shape table",
                format!("feature `{}` needs at least two grid points and matching contributions", self.feature),
            ));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::format("shape table", format!("grid of `{}` is not strictly increasing", self.feature)));
        }
        if self.contribution.iter().chain(&self.grid).any(|v| !v.is_finite()) {
            return Err(Error::format("shape table", format!("feature `{}` has non-finite entries", self.feature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskShapes {
    /// Order quantity when every contribution is zero, in units.
    pub bias: f64,
    pub curves: Vec<ShapeCurve>,
}

/// Traced shape functions of every (task, feature) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFunctionTable {
    pub checkpoint_id: String,
    pub grid_points: usize,
    pub bins: usize,
    pub feature_names: Vec<String>,
    pub tasks: Vec<TaskShapes>,
    /// Density of visited values per feature, shared by all tasks.
    pub histograms: Vec<Histogram>,
    /// Order-quantity standardisation (offset, scale) per task.
    pub action_offset: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub capacities: Vec<u64>,
}

fn nam_of(checkpoint: &Checkpoint) -> Result<&NamPolicyParams> {
    checkpoint
        .actor
        .as_nam()
        .ok_or_else(|| Error::Contract("interpretation requires a NAM checkpoint".into()))
}

fn checkpoint_id(checkpoint: &Checkpoint) -> String {
    format!(
        "{}-seed{}-{}steps",
        checkpoint.meta.label, checkpoint.meta.seed, checkpoint.meta.timesteps
    )
}

/// Evaluates every feature's contribution over a grid spanning the visited range.
pub fn trace_shape_functions(
    checkpoint: &Checkpoint,
    states: &StateSet,
    feature_names: &[String],
    grid_points: usize,
    bins: usize,
) -> Result<ShapeFunctionTable> {
    let nam = nam_of(checkpoint)?;
    if states.is_empty() {
        return Err(Error::Contract("cannot trace shape functions over an empty state set".into()));
    }
    if grid_points < 2 || bins == 0 {
        return Err(Error::Contract("need at least two grid points and one bin".into()));
    }
    let n = nam.num_features;
    if feature_names.len() != n || states.states.iter().any(|s| s.len() != n) {
        return Err(Error::Contract(format!("states and feature names must have {n} entries")));
    }
    let obs = &checkpoint.obs_standardizer;
    let act = &checkpoint.action_standardizer;
    let mut ws = Workspace::default();
    let mut tasks: Vec<TaskShapes> = (0..nam.num_tasks)
        .map(|t| TaskShapes {
            bias: act.inverse_one(t, nam.task_bias[t]),
            curves: Vec::with_capacity(n),
        })
        .collect();
    let mut histograms = Vec::with_capacity(n);
    for i in 0..n {
        let (mut lo, mut hi) = states
            .states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[i]), hi.max(s[i])));
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let grid: Vec<f64> = (0..grid_points)
            .map(|k| {
                if k + 1 == grid_points {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (grid_points - 1) as f64
                }
            })
            .collect();
        let mut per_task = vec![Vec::with_capacity(grid_points); nam.num_tasks];
        for &x in &grid {
            let c = nam.feature_contributions(i, obs.transform_one(i, x), &mut ws);
            for (t, v) in c.into_iter().enumerate() {
                per_task[t].push(act.scale[t] * v);
            }
        }
        for (t, contribution) in per_task.into_iter().enumerate() {
            tasks[t].curves.push(ShapeCurve {
                feature: feature_names[i].clone(),
                grid: grid.clone(),
                contribution,
            });
        }
        histograms.push(Histogram::build(states.states.iter().map(|s| s[i]), lo, hi, bins));
    }
    Ok(ShapeFunctionTable {
        checkpoint_id: checkpoint_id(checkpoint),
        grid_points,
        bins,
        feature_names: feature_names.to_vec(),
        tasks,
        histograms,
        action_offset: act.offset.clone(),
        action_scale: act.scale.clone(),
        capacities: checkpoint.capacities.clone(),
    })
}

impl ShapeFunctionTable {
    pub fn validate(&self) -> Result<()> {
        let t = self.tasks.len();
        if t == 0 || self.action_offset.len() != t || self.action_scale.len() != t || self.capacities.len() != t {
            return Err(Error::format("shape table", "task count disagrees with action metadata"));
        }
        if self.action_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::format("shape table", "action scales must be positive"));
        }
        let n = self.feature_names.len();
        for task in &self.tasks {
            if task.curves.len() != n || !task.bias.is_finite() {
                return Err(Error::format("shape table", "every task needs one curve per feature and a finite bias"));
            }
            for c in &task.curves {
                c.validate()?;
            }
        }
        Ok(())
    }

    /// Order-quantity means (units) predicted by the table alone.
    pub fn predict(&self, obs: &[f64]) -> Vec<f64> {
        self.tasks
            .iter()
            .map(|task| task.bias + task.curves.iter().zip(obs).map(|(c, &x)| c.interpolate(x)).sum::<f64>())
            .collect()
    }

    /// Table prediction in standardised action units.
    pub fn predict_standardized(&self, obs: &[f64]) -> Vec<f64> {
        self.predict(obs)
            .iter()
            .enumerate()
            .map(|(t, q)| (q - self.action_offset[t]) / self.action_scale[t])
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format("shape table", e))?;
        std::fs::write(path, text).at(path)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let table: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("shape table {}", path.display()), e))?;
        table.validate()?;
        Ok(table)
    }

    pub fn shape_csv_path(dir: &Path, task: usize) -> PathBuf {
        dir.join(format!("task{task}.csv"))
    }

    pub fn histogram_csv_path(dir: &Path) -> PathBuf {
        dir.join("density.csv")
    }

    /// One `task{t}.csv` per task (`feature, x, contribution`, led by a
    /// `bias` row) and a shared `density.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut written = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            let path = Self::shape_csv_path(dir, t);
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
            w.write_record(["feature", "x", "contribution"]).map_err(|e| csv_error(&path, e))?;
            w.write_record(["bias", "0", &task.bias.to_string()])
                .map_err(|e| csv_error(&path, e))?;
            for c in &task.curves {
                for (x, y) in c.grid.iter().zip(&c.contribution) {
                    w.write_record([c.feature.as_str(), &x.to_string(), &y.to_string()])
                        .map_err(|e| csv_error(&path, e))?;
                }
            }
            w.flush().at(&path)?;
            written.push(path);
        }
        let path = Self::histogram_csv_path(dir);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["feature", "bin_lo", "bin_hi", "count"])
            .map_err(|e| csv_error(&path, e))?;
        for (name, h) in self.feature_names.iter().zip(&self.histograms) {
            for (k, count) in h.counts.iter().enumerate() {
                w.write_record([
                    name.as_str(),
                    &h.edges[k].to_string(),
                    &h.edges[k + 1].to_string(),
                    &count.to_string(),
                ])
                .map_err(|e| csv_error(&path, e))?;
            }
        }
        w.flush().at(&path)?;
        written.push(path);
        Ok(written)
    }

    /// Rebuilds a table from the per-task CSV files. Histograms are not
    /// needed for prediction and are left empty.
    pub fn read_csv(dir: &Path, config: &SupplyChainConfig) -> Result<Self> {
        let act = crate::policy::Standardizer::for_actions(config)?;
        let mut tasks = Vec::new();
        let mut feature_names: Vec<String> = Vec::new();
        for t in 0..config.num_stages {
            let path = Self::shape_csv_path(dir, t);
            let (task, names) = read_task_csv(&path)?;
            if t == 0 {
                feature_names = names;
            } else if names != feature_names {
                return Err(Error::format(format!("shape csv {}", path.display()), "feature list differs between tasks"));
            }
            tasks.push(task);
        }
        let grid_points = tasks[0].curves.first().map_or(0, |c| c.grid.len());
        let table = Self {
            checkpoint_id: dir.display().to_string(),
            grid_points,
            bins: 0,
            feature_names,
            tasks,
            histograms: Vec::new(),
            action_offset: act.offset,
            action_scale: act.scale,
            capacities: config.capacities.clone(),
        };
        table.validate()?;
        Ok(table)
    }
}

fn read_task_csv(path: &Path) -> Result<(TaskShapes, Vec<String>)> {
    let bad = |reason: String| Error::format(format!("shape csv {}", path.display()), reason);
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["feature", "x", "contribution"] {
        return Err(bad("expected header feature,x,contribution".into()));
    }
    let mut bias = None;
    let mut curves: Vec<ShapeCurve> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let parse = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", line + 2, &record[k])))
        };
        let (name, x, y) = (&record[0], parse(1)?, parse(2)?);
        if name == "bias" {
            bias = Some(y);
            continue;
        }
        match curves.last_mut() {
            Some(c) if c.feature == name => {
                c.grid.push(x);
                c.contribution.push(y);
            }
            _ => {
                if curves.iter().any(|c| c.feature == name) {
                    return Err(bad(format!("rows of feature `{name}` are not contiguous")));
                }
                curves.push(ShapeCurve {
                    feature: name.to_string(),
                    grid: vec![x],
                    contribution: vec![y],
                });
            }
        }
    }
    let bias = bias.ok_or_else(|| bad("missing bias row".into()))?;
    let names = curves.iter().map(|c| c.feature.clone()).collect();
    Ok((TaskShapes { bias, curves }, names))
}

/// Mean absolute centred contribution of each feature to each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub feature_names: Vec<String>,
    /// `importance[t][i]`, in order-quantity units.
    pub importance: Vec<Vec<f64>>,
    /// Task bias plus the subtracted contribution means, in units.
    pub centered_bias: Vec<f64>,
    pub num_states: usize,
    pub state_set: String,
    pub centering: String,
}

impl FeatureImportanceReport {
    /// Each task's row divided by its largest entry (rows of zeros stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.importance
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(0.0, f64::max);
                row.iter().map(|v| if m > 0.0 { v / m } else { 0.0 }).collect()
            })
            .collect()
    }

    /// Features of task `t` sorted by decreasing importance.
    pub fn ranking(&self, t: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.feature_names.len()).collect();
        idx.sort_by(|&a, &b| self.importance[t][b].total_cmp(&self.importance[t][a]).then(a.cmp(&b)));
        idx
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["task".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (t, row) in self.importance.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().at(path)
    }
}

/// Per-feature medians of importance over several trainings, both of the
/// raw values and of each training's per-task max-normalised values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub feature_names: Vec<String>,
    pub raw_median: Vec<Vec<f64>>,
    pub normalized_median: Vec<Vec<f64>>,
    pub num_reports: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn aggregate_importance(reports: &[FeatureImportanceReport]) -> Result<ImportanceSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("no importance reports to aggregate".into()))?;
    let (tasks, features) = (first.importance.len(), first.feature_names.len());
    if reports
        .iter()
        .any(|r| r.feature_names != first.feature_names || r.importance.len() != tasks)
    {
        return Err(Error::Contract("importance reports disagree on their layout".into()));
    }
    let normalized: Vec<Vec<Vec<f64>>> = reports.iter().map(FeatureImportanceReport::normalized).collect();
    let collect = |pick: &dyn Fn(usize, usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..tasks)
            .map(|t| (0..features).map(|i| median((0..reports.len()).map(|k| pick(k, t, i)).collect())).collect())
            .collect()
    };
    Ok(ImportanceSummary {
        feature_names: first.feature_names.clone(),
        raw_median: collect(&|k, t, i| reports[k].importance[t][i]),
        normalized_median: collect(&|k, t, i| normalized[k][t][i]),
        num_reports: reports.len(),
    })
}

impl ImportanceSummary {
    /// Long format: `task, feature, raw_median, normalized_median`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["task", "feature", "raw_median", "normalized_median"])
            .map_err(|e| csv_error(path, e))?;
        for (t, (raw, norm)) in self.raw_median.iter().zip(&self.normalized_median).enumerate() {
            for (i, name) in self.feature_names.iter().enumerate() {
                w.write_record([t.to_string(), name.clone(), raw[i].to_string(), norm[i].to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().at(path)
    }
}

pub fn feature_importance(checkpoint: &Checkpoint, states: &StateSet) -> Result<FeatureImportanceReport> {
    let nam = nam_of(checkpoint)?;
    if states.is_empty() {
        return Err(Error::Contract("cannot compute importance over an empty state set".into()));
    }
    let (n, tasks) = (nam.num_features, nam.num_tasks);
    if states.states.iter().any(|s| s.len() != n) {
        return Err(Error::Contract(format!("states must have {n} features")));
    }
    let obs = &checkpoint.obs_standardizer;
    let act = &checkpoint.action_standardizer;
    let m = states.len();
    let mut ws = Workspace::default();
    // contributions[t][i][k]
    let mut contributions = vec![vec![vec![0.0; m]; n]; tasks];
    for (k, s) in states.states.iter().enumerate() {
        for (i, &x) in s.iter().enumerate() {
            for (t, v) in nam.feature_contributions(i, obs.transform_one(i, x), &mut ws).into_iter().enumerate() {
                contributions[t][i][k] = act.scale[t] * v;
            }
        }
    }
    let mut importance = vec![vec![0.0; n]; tasks];
    let mut centered_bias: Vec<f64> = (0..tasks).map(|t| act.inverse_one(t, nam.task_bias[t])).collect();
    for t in 0..tasks {
        for i in 0..n {
            let c = &contributions[t][i];
            // shifted by the first value so constant curves centre to exactly zero
            let shift = c[0];
            let mean = shift + c.iter().map(|v| v - shift).sum::<f64>() / m as f64;
            importance[t][i] = c.iter().map(|v| (v - mean).abs()).sum::<f64>() / m as f64;
            centered_bias[t] += mean;
        }
    }
    Ok(FeatureImportanceReport {
        feature_names: checkpoint_feature_names(n),
        importance,
        centered_bias,
        num_states: m,
        state_set: states.description.clone(),
        centering: "mean".into(),
    })
}

fn checkpoint_feature_names(n: usize) -> Vec<String> {
    let default = SupplyChainConfig::default();
    if default.obs_dim() == n {
        default.feature_names()
    } else {
        (0..n).map(|i| format!("x{i}")).collect()
    }
}

/// Deterministic policy driven only by a traced table.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupPolicy {
    table: ShapeFunctionTable,
}

pub fn compile_lookup_policy(table: ShapeFunctionTable) -> Result<LookupPolicy> {
    table.validate()?;
    Ok(LookupPolicy { table })
}

impl LookupPolicy {
    pub fn table(&self) -> &ShapeFunctionTable {
        &self.table
    }

    pub fn mean_orders(&self, obs: &[f64]) -> Vec<f64> {
        self.table.predict(obs)
    }

    pub fn mean_standardized(&self, obs: &[f64]) -> Vec<f64> {
        self.table.predict_standardized(obs)
    }
}

impl OrderPolicy for LookupPolicy {
    fn orders(&self, obs: &[f64], _rng: &mut SimRng) -> Vec<i64> {
        self.table
            .predict(obs)
            .iter()
            .zip(&self.table.capacities)
            .map(|(&q, &cap)| if q.is_nan() { 0 } else { q.clamp(0.0, cap as f64).round() as i64 })
            .collect()
    }
}

/// Everything `explain` produces, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub shapes: ShapeFunctionTable,
    pub importance: FeatureImportanceReport,
    pub lookup_fidelity: Option<f64>,
}

/// Largest standardised gap between network and table over probes drawn
/// uniformly inside each feature's grid range.
pub fn lookup_fidelity(checkpoint: &Checkpoint, lookup: &LookupPolicy, probes: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    nam_of(checkpoint)?;
    let table = lookup.table();
    let mut g = rng::stream(seed, &[tag::EVAL, 0x1f1d]);
    let ranges: Vec<(f64, f64)> = table.tasks[0]
        .curves
        .iter()
        .map(|c| (c.grid[0], c.grid[c.grid.len() - 1]))
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x: Vec<f64> = ranges.iter().map(|&(lo, hi)| g.random_range(lo..=hi)).collect();
        let net = checkpoint.mean_action(&x);
        let tab = lookup.mean_standardized(&x);
        for (a, b) in net.iter().zip(&tab) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
