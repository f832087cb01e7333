//! Exact small-instance oracle, greedy evaluation with gaps, the extended
//! graph probe and the ablation harness.

use std::ops::RangeInclusive;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance_gen::{extend_instance, instance_rng, GenError};
use crate::model::{init_params, ModelConfig};
use crate::numerics::ParamStore;
use crate::rollout::{num_trajectories, solve, RolloutError};
use crate::training::{train, EpochRecord, TrainConfig, TrainError, TrainStart};
use crate::vrp::{tour_cost, tour_cost_rounded, Instance, Trajectory, VrpError};

/// Largest customer count `exact_solve` accepts.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("exact solver handles at most {EXACT_LIMIT} customers, got {0}; evaluate against a reference file instead")]
    TooLarge(usize),
    #[error("{references} references for {instances} instances")]
    ReferenceMismatch { references: usize, instances: usize },
    #[error("empty dataset")]
    Empty,
    #[error("evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Vrp(#[from] VrpError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_trajectories: usize,
    pub augment: bool,
    pub round_distances: bool,
    pub count: usize,
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub deltas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_trajectories: 100,
            augment: true,
            round_distances: false,
            count: 100,
            sizes: vec![10, 20],
            seed: 20_240_601,
            deltas: vec![0.0, 0.5, 1.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_trajectories == 0 {
            return Err("max_trajectories must be positive".into());
        }
        if self.sizes.contains(&0) {
            return Err("sizes must be positive".into());
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(format!("extension rate {d} must be >= 0"));
        }
        Ok(())
    }
}

/// `(cost − reference) / reference × 100`; `None` unless `reference > 0`.
pub fn gap_pct(cost: f64, reference: f64) -> Option<f64> {
    (reference > 0.0).then(|| (cost - reference) / reference * 100.0)
}

/// Provably optimal solution for `N <= 12` customers: Held-Karp costs for
/// every capacity-feasible customer subset, then a minimum-cost partition
/// of all customers into such subsets.
pub fn exact_solve(instance: &Instance) -> Result<Trajectory, EvalError> {
    exact_solve_with(instance, false)
}

/// As [`exact_solve`]; `rounded` scores legs rounded to the nearest integer.
pub fn exact_solve_with(instance: &Instance, rounded: bool) -> Result<Trajectory, EvalError> {
    let n = instance.num_customers();
    if n > EXACT_LIMIT {
        return Err(EvalError::TooLarge(n));
    }
    if n == 0 {
        return Ok(Trajectory {
            nodes: vec![0],
            step_log_probs: vec![],
            cost: 0.0,
        });
    }
    let d = |a: usize, b: usize| {
        let x = instance.dist(a, b);
        if rounded {
            (x + 0.5).floor()
        } else {
            x
        }
    };
    let full = 1usize << n;
    let mut load = vec![0u64; full];
    for s in 1..full {
        let low = s.trailing_zeros() as usize;
        load[s] = load[s & (s - 1)] + u64::from(instance.demands[low]);
    }
    let cap = u64::from(instance.capacity);

    // path[s][j]: cheapest depot -> ... -> j visiting exactly s (customer j is bit j).
    let mut path = vec![f64::INFINITY; full * n];
    let mut prev = vec![usize::MAX; full * n];
    for j in 0..n {
        path[(1 << j) * n + j] = d(0, j + 1);
    }
    for s in 1..full {
        if load[s] > cap {
            continue;
        }
        for j in 0..n {
            let here = path[s * n + j];
            if s & (1 << j) == 0 || !here.is_finite() {
                continue;
            }
            for k in 0..n {
                let t = s | (1 << k);
                if s & (1 << k) != 0 || load[t] > cap {
                    continue;
                }
                let c = here + d(j + 1, k + 1);
                if c < path[t * n + k] {
                    path[t * n + k] = c;
                    prev[t * n + k] = j;
                }
            }
        }
    }
    let mut route = vec![f64::INFINITY; full];
    let mut route_end = vec![usize::MAX; full];
    for s in 1..full {
        if load[s] > cap {
            continue;
        }
        for j in 0..n {
            let c = path[s * n + j] + d(j + 1, 0);
            if c < route[s] {
                route[s] = c;
                route_end[s] = j;
            }
        }
    }

    // best[s]: cheapest partition of s; the route holding s's lowest customer is enumerated.
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![0usize; full];
    best[0] = 0.0;
    for s in 1..full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        let mut sub = rest;
        loop {
            let t = sub | low;
            if route[t].is_finite() {
                let c = route[t] + best[s ^ t];
                if c < best[s] {
                    best[s] = c;
                    choice[s] = t;
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    if !best[full - 1].is_finite() {
        return Err(EvalError::Vrp(VrpError::InvalidInstance("no feasible solution".into())));
    }

    let mut nodes = vec![0];
    let mut s = full - 1;
    while s != 0 {
        let t = choice[s];
        let mut order = Vec::new();
        let mut set = t;
        let mut j = route_end[t];
        while j != usize::MAX {
            order.push(j + 1);
            let p = prev[set * n + j];
            set ^= 1 << j;
            j = p;
        }
        order.reverse();
        nodes.extend(order);
        nodes.push(0);
        s ^= t;
    }
    let cost = if rounded {
        tour_cost_rounded(instance, &nodes)?
    } else {
        tour_cost(instance, &nodes)?
    };
    Ok(Trajectory {
        nodes,
        step_log_probs: vec![],
        cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance: String,
    pub cost: f64,
    #[serde(rename = "ref")]
    pub reference: Option<f64>,
    pub gap_pct: Option<f64>,
    pub time_ms: f64,
    pub tour: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub label: String,
    pub delta: Option<f64>,
    pub model: ModelConfig,
    pub max_trajectories: usize,
    pub augment: bool,
    pub round_distances: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub records: Vec<EvalRecord>,
    pub mean_cost: f64,
    pub mean_gap_pct: Option<f64>,
}

impl EvalReport {
    fn assemble(meta: EvalMeta, records: Vec<EvalRecord>) -> Self {
        let mean_cost = records.iter().map(|r| r.cost).sum::<f64>() / records.len() as f64;
        let gaps: Vec<f64> = records.iter().filter_map(|r| r.gap_pct).collect();
        let mean_gap_pct = (gaps.len() == records.len() && !gaps.is_empty())
            .then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
        Self {
            meta,
            records,
            mean_cost,
            mean_gap_pct,
        }
    }
}

/// Where reference costs come from.
#[derive(Clone, Debug)]
pub enum References {
    None,
    /// Solve each instance exactly (`N <= 12`).
    Oracle,
    /// One reference per instance, in dataset order.
    Given(Vec<f64>),
}

impl References {
    fn resolve(&self, instances: &[Instance], rounded: bool) -> Result<Vec<Option<f64>>, EvalError> {
        match self {
            References::None => Ok(vec![None; instances.len()]),
            References::Given(r) => {
                if r.len() != instances.len() {
                    return Err(EvalError::ReferenceMismatch {
                        references: r.len(),
                        instances: instances.len(),
                    });
                }
                Ok(r.iter().map(|&x| Some(x)).collect())
            }
            References::Oracle => instances
                .par_iter()
                .map(|i| exact_solve_with(i, rounded).map(|t| Some(t.cost)))
                .collect(),
        }
    }
}

fn instance_label(instance: &Instance, index: usize) -> String {
    instance.name.clone().unwrap_or_else(|| format!("#{index}"))
}

fn score(instance: &Instance, nodes: &[usize], rounded: bool) -> Result<f64, VrpError> {
    if rounded {
        tour_cost_rounded(instance, nodes)
    } else {
        tour_cost(instance, nodes)
    }
}

fn meta(label: &str, delta: Option<f64>, model: &ModelConfig, cfg: &EvalConfig) -> EvalMeta {
    EvalMeta {
        label: label.to_string(),
        delta,
        model: model.clone(),
        max_trajectories: cfg.max_trajectories,
        augment: cfg.augment,
        round_distances: cfg.round_distances,
    }
}

/// Greedy multi-trajectory inference on every instance, in dataset order.
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    instances: &[Instance],
    cfg: &EvalConfig,
    references: &References,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let refs = references.resolve(instances, cfg.round_distances)?;
    let records = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let clock = Instant::now();
            let k = num_trajectories(cfg.max_trajectories, inst.num_customers());
            let t = solve(inst, params, model, k, cfg.augment, None)?;
            let time_ms = clock.elapsed().as_secs_f64() * 1e3;
            let cost = score(inst, &t.nodes, cfg.round_distances)?;
            Ok(EvalRecord {
                instance: instance_label(inst, i),
                cost,
                reference: refs[i],
                gap_pct: refs[i].and_then(|r| gap_pct(cost, r)),
                time_ms,
                tour: t.nodes,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvalReport::assemble(meta(label, None, model, cfg), records))
}

/// For each extension rate, encodes every instance together with
/// `ceil(delta * n)` extra customers but decodes only the original ones.
/// Extra customers for instance `i` come from stream `(seed, i)`.
pub fn extension_probe(
    params: &ParamStore,
    model: &ModelConfig,
    instances: &[Instance],
    deltas: &[f64],
    demand_range: RangeInclusive<u32>,
    cfg: &EvalConfig,
    references: &References,
    seed: u64,
) -> Result<Vec<EvalReport>, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let refs = references.resolve(instances, cfg.round_distances)?;
    deltas
        .iter()
        .map(|&delta| {
            let records = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let mut rng = instance_rng(seed, i as u64);
                    let (ext, keep) = extend_instance(inst, delta, demand_range.clone(), &mut rng)?;
                    let clock = Instant::now();
                    let k = num_trajectories(cfg.max_trajectories, inst.num_customers());
                    let t = solve(&ext, params, model, k, cfg.augment, Some(&keep))?;
                    let time_ms = clock.elapsed().as_secs_f64() * 1e3;
                    if t.nodes.iter().any(|&v| v > inst.num_customers()) {
                        return Err(EvalError::Vrp(VrpError::Invariant("extended node in tour".into())));
                    }
                    let cost = score(inst, &t.nodes, cfg.round_distances)?;
                    Ok(EvalRecord {
                        instance: instance_label(inst, i),
                        cost,
                        reference: refs[i],
                        gap_pct: refs[i].and_then(|r| gap_pct(cost, r)),
                        time_ms,
                        tour: t.nodes,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(EvalReport::assemble(
                meta(&format!("delta={delta}"), Some(delta), model, cfg),
                records,
            ))
        })
        .collect()
}

/// A held-out set shared by every ablation row.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub size: usize,
    pub instances: Vec<Instance>,
    pub references: References,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub size: usize,
    pub mean_cost: f64,
    pub mean_gap_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub trained: bool,
    pub model: ModelConfig,
    pub cells: Vec<AblationCell>,
    pub final_epoch: Option<EpochRecord>,
}

/// Trains every variant from the same seed and instance stream and
/// evaluates it on the shared held-out sets. The first row is the first
/// variant before training.
pub fn ablation_suite(
    variants: &[(String, ModelConfig)],
    train_cfg: &TrainConfig,
    held_out: &[HeldOut],
    eval_cfg: &EvalConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationRow>, EvalError> {
    // Oracle references are solved once and shared by every row.
    let mut resolved = Vec::with_capacity(held_out.len());
    for h in held_out {
        resolved.push(match &h.references {
            References::Oracle => {
                let refs = h.references.resolve(&h.instances, eval_cfg.round_distances)?;
                References::Given(refs.into_iter().flatten().collect())
            }
            other => other.clone(),
        });
    }
    let cells = |params: &ParamStore, model: &ModelConfig, label: &str| -> Result<Vec<AblationCell>, EvalError> {
        held_out
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let r = evaluate(params, model, &h.instances, eval_cfg, &resolved[i], label)?;
                Ok(AblationCell {
                    size: h.size,
                    mean_cost: r.mean_cost,
                    mean_gap_pct: r.mean_gap_pct,
                })
            })
            .collect()
    };

    let mut rows = Vec::new();
    if let Some((_, first)) = variants.first() {
        let params = init_params(first, &mut instance_rng(train_cfg.seed, u64::MAX));
        rows.push(AblationRow {
            label: "untrained".into(),
            trained: false,
            model: first.clone(),
            cells: cells(&params, first, "untrained")?,
            final_epoch: None,
        });
    }
    for (label, model) in variants {
        let dir = out_dir.map(|d| d.join(label));
        let start = TrainStart::fresh(model.clone(), train_cfg.seed)?;
        let report = train(train_cfg, start, dir.as_deref(), &mut |r| on_epoch(label, r))?;
        rows.push(AblationRow {
            label: label.clone(),
            trained: true,
            model: model.clone(),
            cells: cells(&report.params, model, label)?,
            final_epoch: report.epochs.last().cloned(),
        });
    }
    Ok(rows)
}
