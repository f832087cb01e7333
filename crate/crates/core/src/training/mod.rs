//! REINFORCE training with the shared-mean multi-trajectory baseline.

mod adam;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};

use crate::instance_gen::{instance_rng, sample_instance, GenConfig, GenError};
use crate::io::checkpoint::{save_checkpoint, to_stored_precision, Checkpoint, TrainState};
use crate::io::IoError;
use crate::model::{encode, init_params, is_encoder_param, param_shapes, ModelConfig, ModelError};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, NumericsError, ParamStore, Tape, Var};
use crate::rollout::{
    num_trajectories, replay_log_prob, rollout_on_tape, rollout_with, DecodeMode, FirstMoves, Policy, RolloutError, RolloutOptions, StepRecord,
};
use crate::vrp::Instance;

const SAMPLE_SALT: u64 = 0x5a4d_504c_4552_0001;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("checkpoint write failed after {completed} epochs: {source}")]
    Checkpoint {
        completed: usize,
        source: IoError,
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl TrainError {
    /// True for numerical failures (NaN/inf) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFiniteGradient(_) => true,
            TrainError::Rollout(RolloutError::Model(m)) | TrainError::Model(m) => m.is_numeric(),
            _ => false,
        }
    }
}

/// Which tensors a run leaves untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    Encoder,
    Decoder,
    All,
}

impl Freeze {
    pub fn mask(self, params: &ParamStore) -> Vec<bool> {
        params
            .names()
            .iter()
            .map(|n| match self {
                Freeze::None => false,
                Freeze::Encoder => is_encoder_param(n),
                Freeze::Decoder => !is_encoder_param(n),
                Freeze::All => true,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub batch_size: usize,
    /// Trajectories per instance are `min(max_trajectories, N)`; absent means `N`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_trajectories: Option<usize>,
    pub first_moves: FirstMoves,
    pub learning_rate: f64,
    /// 1-based epochs at whose start the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset: CVRP10 to CVRP20, `K = N`, 30 epochs of 3,200 instances.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            instances_per_epoch: 3200,
            batch_size: 32,
            max_trajectories: None,
            first_moves: FirstMoves::Ranked,
            learning_rate: 1e-3,
            lr_decay_epochs: vec![24, 28],
            lr_decay_factor: 0.1,
            weight_decay: 0.0,
            max_grad_norm: None,
            checkpoint_every: 10,
            seed: 1234,
            gen: GenConfig::default(),
        }
    }

    /// Full-scale schedule: 90 epochs, decays at 70 and 80, `lr = 1e-4`.
    pub fn paper_scale(gen: GenConfig) -> Self {
        Self {
            epochs: 90,
            instances_per_epoch: 600_000,
            batch_size: 64,
            max_trajectories: Some(100),
            learning_rate: 1e-4,
            lr_decay_epochs: vec![70, 80],
            gen,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.instances_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, instances_per_epoch and batch_size must be positive");
        }
        if self.max_trajectories == Some(0) {
            return bad("max_trajectories must be positive");
        }
        if self.max_trajectories == Some(1) {
            return bad("the shared baseline needs K >= 2 trajectories; raise max_trajectories");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return bad("max_grad_norm must be positive");
            }
        }
        if self.lr_decay_epochs.contains(&0) {
            return bad("lr_decay_epochs are 1-based");
        }
        self.gen.validate()?;
        if self.gen.size_min < 2 {
            return bad("training instances need at least 2 customers for the shared baseline");
        }
        Ok(())
    }

    pub fn trajectories_for(&self, customers: usize) -> usize {
        num_trajectories(self.max_trajectories.unwrap_or(customers), customers)
    }

    /// Learning rate in effect during 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch + 1 >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean sampled tour length over all trajectories of the epoch.
    pub mean_cost: f64,
    pub mean_loss: f64,
    /// Mean L2 norm of the per-batch gradient.
    pub grad_norm: f64,
    /// Largest `|Σ advantages|` over any instance of the epoch.
    pub max_advantage_sum: f64,
    pub wall_ms: f64,
}

impl EpochRecord {
    /// One `key=value` progress line.
    pub fn progress_line(&self) -> String {
        format!(
            "epoch={} lr={:e} mean_cost={:.6} mean_loss={:.6} grad_norm={:.6} adv_sum={:.3e} wall_ms={:.0}",
            self.epoch,
            self.learning_rate,
            self.mean_cost,
            self.mean_loss,
            self.grad_norm,
            self.max_advantage_sum,
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub params: ParamStore,
}

/// Where a run starts from.
#[derive(Clone, Debug)]
pub struct TrainStart {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    /// Epochs already completed; the loop continues from here.
    pub epoch: usize,
    pub freeze: Freeze,
}

impl TrainStart {
    pub fn fresh(model: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        model.validate().map_err(TrainError::Model)?;
        let mut rng = instance_rng(seed, u64::MAX);
        let params = init_params(&model, &mut rng);
        Ok(Self {
            model,
            params,
            adam: None,
            epoch: 0,
            freeze: Freeze::None,
        })
    }

    /// Continues an interrupted run with its optimizer state and epoch count.
    pub fn resume(ckpt: Checkpoint) -> Self {
        let (adam, epoch) = match ckpt.train_state {
            Some(s) => (Some(s.adam), s.epoch),
            None => (None, 0),
        };
        Self {
            model: ckpt.model,
            params: ckpt.params,
            adam,
            epoch,
            freeze: Freeze::None,
        }
    }

    /// Starts a new schedule from trained weights with a fresh optimizer.
    pub fn fine_tune(ckpt: Checkpoint, freeze: Freeze) -> Self {
        Self {
            model: ckpt.model,
            params: ckpt.params,
            adam: None,
            epoch: 0,
            freeze,
        }
    }
}

/// Per-instance advantages `cost_k − mean(cost)`.
pub fn advantages(costs: &[f64]) -> Vec<f64> {
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    costs.iter().map(|c| c - mean).collect()
}

/// `(1/K) Σ_k (cost_k − mean) · Σ_t log p_{k,t}` over the sampled steps
/// recorded on the tape. Costs enter as constants.
pub fn reinforce_loss(tape: &mut Tape<'_>, record: &StepRecord, costs: &[f64]) -> Result<Var, TrainError> {
    let k = costs.len();
    if k < 2 {
        return Err(TrainError::Config(format!(
            "the shared baseline needs K >= 2 trajectories per instance, got K = {k}"
        )));
    }
    if !costs.iter().all(|c| c.is_finite()) {
        return Err(TrainError::Config("non-finite trajectory cost".into()));
    }
    let adv = advantages(costs);
    let mut parts = Vec::with_capacity(record.steps.len());
    let mut weights = Vec::new();
    for (v, rows) in &record.steps {
        if rows.iter().any(|&r| r >= k) {
            return Err(TrainError::Config("step record refers to a missing trajectory".into()));
        }
        parts.push(*v);
        weights.extend(rows.iter().map(|&r| adv[r] / k as f64));
    }
    if parts.is_empty() {
        return Ok(tape.constant(1, 1, vec![0.0])?);
    }
    let picked = tape.concat_rows(&parts)?;
    let w = tape.constant(weights.len(), 1, weights)?;
    let weighted = tape.mul(picked, w)?;
    Ok(tape.sum(weighted))
}

/// Loss, gradients and bookkeeping for one training instance.
pub struct InstanceGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub advantage_sum: f64,
}

/// Samples `K` trajectories on `instance` and back-propagates the loss.
pub fn instance_gradient(
    params: &ParamStore,
    model: &ModelConfig,
    instance: &Instance,
    k: usize,
    first_moves: FirstMoves,
    rng: &mut impl rand::Rng,
) -> Result<InstanceGradient, TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let emb = encode(&mut tape, &bound, model, instance)?;
    let opts = RolloutOptions {
        k,
        restrict_to: None,
        keep_graph: true,
        first_moves,
    };
    let (trajs, record) = rollout_on_tape(
        &mut tape,
        &bound,
        model,
        instance,
        &emb,
        &Policy::Decode(DecodeMode::Sample),
        &opts,
        rng,
    )?;
    let costs: Vec<f64> = trajs.iter().map(|t| t.cost).collect();
    let loss = reinforce_loss(&mut tape, &record, &costs)?;
    tape.backward(loss)?;
    Ok(InstanceGradient {
        loss: tape.value(loss)[0],
        grads: params.collect_grads(&tape, &bound),
        advantage_sum: advantages(&costs).iter().sum(),
        costs,
    })
}

/// Finite-difference check of `∇ log p(τ)` for one sampled trajectory `τ`
/// on a random instance with `n` customers.
pub fn policy_grad_check(
    model: &ModelConfig,
    n: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    model.validate()?;
    let gen = GenConfig::fixed(n, GenConfig::standard_capacity(n)).with_seed(seed);
    let instance = sample_instance(&gen, &mut instance_rng(seed, 0))?;
    let params = init_params(model, &mut instance_rng(seed, 1));
    let mut rng = instance_rng(seed, 2);
    let batch = rollout_with(
        &instance,
        &params,
        model,
        &RolloutOptions {
            k: 1,
            restrict_to: None,
            keep_graph: false,
            first_moves: FirstMoves::Ranked,
        },
        DecodeMode::Sample,
        &mut rng,
    )?;
    let tours = vec![batch.trajectories[0].nodes.clone()];
    let report = grad_check(
        &params,
        |tape, bound| {
            replay_log_prob(tape, bound, model, &instance, &tours)
                .map_err(|e| NumericsError::NonFinite(e.to_string()))
        },
        opts,
    )?;
    Ok(report)
}

fn quantize_state(params: &mut ParamStore, adam: &mut AdamState) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = to_stored_precision(*x));
    }
    for moment in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        moment.iter_mut().for_each(|x| *x = to_stored_precision(*x));
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

/// Runs the epoch loop from `start`. When `out_dir` is given, checkpoints
/// are written there per `cfg.checkpoint_every` and after the last epoch.
/// Writing a checkpoint rounds the live parameters and optimizer moments to
/// stored precision so a resumed run continues bit-identically.
pub fn train(
    cfg: &TrainConfig,
    start: TrainStart,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    start.model.validate()?;
    let TrainStart {
        model,
        mut params,
        adam,
        epoch: first_epoch,
        freeze,
    } = start;
    for (name, shape) in param_shapes(&model) {
        let t = params.get(&name).map_err(|_| TrainError::Config(format!("missing tensor `{name}`")))?;
        if t.shape() != &shape[..] {
            return Err(TrainError::Config(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&params));
    let frozen = freeze.mask(&params);
    let mut report = TrainReport {
        epochs: Vec::new(),
        final_checkpoint: None,
        params: ParamStore::new(),
    };

    for epoch in first_epoch..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.lr_at(epoch);
        let base = (epoch * cfg.instances_per_epoch) as u64;
        let mut cost_sum = 0.0;
        let mut cost_count = 0usize;
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        let mut max_adv = 0.0f64;

        let mut offset = 0;
        while offset < cfg.instances_per_epoch {
            let len = cfg.batch_size.min(cfg.instances_per_epoch - offset);
            let indices: Vec<u64> = (0..len as u64).map(|i| base + offset as u64 + i).collect();
            let results: Vec<Result<InstanceGradient, TrainError>> = indices
                .par_iter()
                .map(|&idx| {
                    let instance = sample_instance(&cfg.gen, &mut instance_rng(cfg.gen.seed, idx))?;
                    let k = cfg.trajectories_for(instance.num_customers());
                    let mut rng = instance_rng(cfg.seed ^ SAMPLE_SALT, idx);
                    instance_gradient(&params, &model, &instance, k, cfg.first_moves, &mut rng)
                })
                .collect();

            let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let scale = 1.0 / len as f64;
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += scale * x;
                    }
                }
                batch_loss += scale * r.loss;
                cost_sum += r.costs.iter().sum::<f64>();
                cost_count += r.costs.len();
                max_adv = max_adv.max(r.advantage_sum.abs());
            }
            let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if let Some(max) = cfg.max_grad_norm {
                if norm > max {
                    let s = max / norm;
                    grads.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            adam_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay, Some(&frozen))?;
            loss_sum += batch_loss;
            norm_sum += norm;
            batches += 1;
            offset += len;
        }

        let record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            mean_cost: cost_sum / cost_count as f64,
            mean_loss: loss_sum / batches as f64,
            grad_norm: norm_sum / batches as f64,
            max_advantage_sum: max_adv,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&record);
        report.epochs.push(record);

        let done = epoch + 1;
        let due = done == cfg.epochs || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0);
        if let (Some(dir), true) = (out_dir, due) {
            quantize_state(&mut params, &mut adam);
            let ckpt = Checkpoint {
                model: model.clone(),
                params: params.clone(),
                train_state: Some(TrainState {
                    epoch: done,
                    adam: adam.clone(),
                }),
            };
            let path = checkpoint_path(dir, done);
            let written = std::fs::create_dir_all(dir)
                .map_err(|e| IoError::io(dir, e))
                .and_then(|_| save_checkpoint(&path, &ckpt));
            if let Err(source) = written {
                report.params = params;
                return Err(TrainError::Checkpoint {
                    completed: done,
                    source,
                    report: Box::new(report),
                });
            }
            report.final_checkpoint = Some(path);
        }
    }
    report.params = params;
    Ok(report)
}

/// Continues training from trained weights with a fresh optimizer and a
/// schedule starting at epoch 1; `freeze` selects tensors left untouched.
pub fn fine_tune(
    cfg: &TrainConfig,
    ckpt: Checkpoint,
    expected: &ModelConfig,
    freeze: Freeze,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    for (name, shape) in param_shapes(expected) {
        match ckpt.params.get(&name) {
            Ok(t) if t.shape() == &shape[..] => {}
            found => {
                return Err(TrainError::Io(IoError::ShapeMismatch {
                    found: found.map(|t| t.shape().to_vec()).unwrap_or_default(),
                    tensor: name,
                    expected: shape,
                }))
            }
        }
    }
    let mut start = TrainStart::fine_tune(ckpt, freeze);
    start.model = expected.clone();
    train(cfg, start, out_dir, on_epoch)
}
