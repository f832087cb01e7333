//! Trajectory construction with the multi-trajectory strategy.
//!
//! The instance is encoded once. A first decoding step from the fresh
//! full-capacity state ranks the customers; the `K` most probable ones seed
//! `K` trajectories, which are then decoded in lock-step against the shared
//! embeddings until every trajectory is back at the depot with all customers
//! served.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{decode_step, encode, Embeddings, ModelConfig, ModelError, StepBatch};
use crate::numerics::{BoundParams, ParamStore, Tape, Var};
use crate::vrp::{tour_cost, Instance, RolloutState, Trajectory, VrpError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vrp(#[from] VrpError),
    #[error("no trajectories to choose from")]
    Empty,
}

impl From<crate::numerics::NumericsError> for RolloutError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        RolloutError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Most probable feasible node, lowest index on ties.
    Greedy,
    /// Draw from the masked distribution; one RNG stream per trajectory.
    Sample,
}

/// How the next node of every trajectory is chosen.
#[derive(Clone, Debug)]
pub enum Policy<'s> {
    Decode(DecodeMode),
    /// Replays fixed node sequences (each starting `[0, first, ...]`).
    Replay(&'s [Vec<usize>]),
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub mode: Option<DecodeMode>,
    /// Encoder passes spent on this batch.
    pub encoder_calls: usize,
}

/// Tape handles of the chosen-move log-probabilities, for the policy gradient.
#[derive(Clone, Debug, Default)]
pub struct StepRecord {
    /// Log-probability of each trajectory's first (ranked, not sampled) move.
    pub first: Vec<Var>,
    /// Per later step: an `rows × 1` column of chosen log-probs and the
    /// trajectory each row belongs to.
    pub steps: Vec<(Var, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub k: usize,
    /// Customers (node indices) the trajectories must serve; `None` means all.
    /// Other customers are never feasible.
    pub restrict_to: Option<Vec<usize>>,
    /// Keep every step on the tape (needed for gradients). When false, step
    /// nodes are dropped as soon as their values are read.
    pub keep_graph: bool,
    pub first_moves: FirstMoves,
}

/// How the `K` distinct first customers are picked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstMoves {
    /// The `K` most probable customers of the first decoding step.
    #[default]
    Ranked,
    /// The `K` lowest-indexed feasible customers.
    Indexed,
}

/// `K = min(cap, N)`.
pub fn num_trajectories(cap: usize, customers: usize) -> usize {
    cap.min(customers)
}

fn argmax_feasible(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&p, &ok)) in probs.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i).expect("mask has a feasible entry")
}

fn sample_feasible(probs: &[f64], mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&p, &ok)) in probs.iter().zip(mask).enumerate() {
        if !ok || p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.unwrap_or_else(|| argmax_feasible(probs, mask))
}

fn initial_state(instance: &Instance, opts: &RolloutOptions) -> Result<RolloutState, VrpError> {
    match &opts.restrict_to {
        Some(keep) => RolloutState::restricted(instance, keep),
        None => Ok(RolloutState::new(instance)),
    }
}

/// Builds `K` trajectories on an existing tape against precomputed embeddings.
pub fn rollout_on_tape(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    instance: &Instance,
    emb: &Embeddings,
    policy: &Policy<'_>,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<Trajectory>, StepRecord), RolloutError> {
    let fresh = initial_state(instance, opts)?;
    let customers = fresh.unvisited();
    let k = match policy {
        Policy::Replay(seqs) => seqs.len(),
        Policy::Decode(_) => opts.k,
    };
    if k == 0 || k > customers {
        return Err(RolloutError::Config(format!(
            "K = {k} trajectories needs 1 <= K <= N = {customers}"
        )));
    }

    let mut record = StepRecord::default();

    // First step: one decode from the fresh state, shared by every trajectory.
    let mut first = StepBatch::default();
    first.push_state(instance, &fresh)?;
    let out = decode_step(tape, bound, cfg, emb, instance, &first)?;
    let first_lp = tape.value(out.log_probs).to_vec();
    let starts: Vec<usize> = match policy {
        Policy::Replay(seqs) => seqs
            .iter()
            .map(|s| match s.as_slice() {
                [0, start, ..] => Ok(*start),
                _ => Err(RolloutError::Config("replayed tours must start [0, customer, ...]".into())),
            })
            .collect::<Result<_, _>>()?,
        Policy::Decode(_) => {
            let mut ranked: Vec<usize> = (1..first_lp.len()).filter(|&i| first.mask[i]).collect();
            // Stable sort keeps the lowest index first among equal probabilities.
            if opts.first_moves == FirstMoves::Ranked {
                ranked.sort_by(|&a, &b| first_lp[b].total_cmp(&first_lp[a]));
            }
            ranked.truncate(k);
            ranked
        }
    };
    for &s in &starts {
        record.first.push(tape.pick_per_row(out.log_probs, &[s])?);
    }
    if !opts.keep_graph {
        record.first.clear();
    }

    let mut states = Vec::with_capacity(k);
    let mut trajectories = Vec::with_capacity(k);
    for &s in &starts {
        let mut st = fresh.clone();
        st.apply_move(instance, s)?;
        states.push(st);
        trajectories.push(Trajectory {
            nodes: vec![0, s],
            step_log_probs: vec![first_lp[s]],
            cost: 0.0,
        });
    }

    let base_seed: u64 = rng.gen();
    let mut streams: Vec<ChaCha8Rng> = (0..k as u64)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(base_seed);
            r.set_stream(i);
            r
        })
        .collect();

    let n = instance.num_nodes();
    let mark = tape.len();
    loop {
        let active: Vec<usize> = (0..k).filter(|&i| !states[i].done()).collect();
        if active.is_empty() {
            break;
        }
        let mut batch = StepBatch::default();
        for &i in &active {
            batch.push_state(instance, &states[i])?;
        }
        let out = decode_step(tape, bound, cfg, emb, instance, &batch)?;
        let lp = tape.value(out.log_probs);
        let mut chosen = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let row_lp = &lp[row * n..(row + 1) * n];
            let row_mask = &batch.mask[row * n..(row + 1) * n];
            let next = match policy {
                Policy::Replay(seqs) => {
                    let pos = trajectories[i].nodes.len();
                    *seqs[i].get(pos).ok_or_else(|| {
                        RolloutError::Config(format!("replayed tour {i} ends before the instance is served"))
                    })?
                }
                Policy::Decode(DecodeMode::Greedy) => {
                    let probs: Vec<f64> = row_lp.iter().map(|v| v.exp()).collect();
                    argmax_feasible(&probs, row_mask)
                }
                Policy::Decode(DecodeMode::Sample) => {
                    let probs: Vec<f64> = row_lp.iter().map(|v| v.exp()).collect();
                    sample_feasible(&probs, row_mask, &mut streams[i])
                }
            };
            if next >= n || !row_mask[next] {
                return Err(VrpError::Infeasible {
                    node: next,
                    reason: format!("masked at step {} of trajectory {i}", trajectories[i].nodes.len()),
                }
                .into());
            }
            trajectories[i].step_log_probs.push(row_lp[next]);
            chosen.push(next);
        }
        if opts.keep_graph {
            let picked = tape.pick_per_row(out.log_probs, &chosen)?;
            record.steps.push((picked, active.clone()));
        } else {
            tape.truncate(mark);
        }
        for (&i, &next) in active.iter().zip(&chosen) {
            states[i].apply_move(instance, next)?;
            trajectories[i].nodes.push(next);
        }
    }
    if let Policy::Replay(seqs) = policy {
        for (t, s) in trajectories.iter().zip(seqs.iter()) {
            if t.nodes.len() != s.len() {
                return Err(RolloutError::Config("replayed tour continues past completion".into()));
            }
        }
    }
    for t in &mut trajectories {
        t.cost = tour_cost(instance, &t.nodes)?;
    }
    Ok((trajectories, record))
}

/// Encodes `instance` and builds `K` trajectories without keeping gradients.
pub fn rollout(
    instance: &Instance,
    params: &ParamStore,
    cfg: &ModelConfig,
    k: usize,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<RolloutBatch, RolloutError> {
    rollout_with(
        instance,
        params,
        cfg,
        &RolloutOptions {
            k,
            restrict_to: None,
            keep_graph: false,
            first_moves: FirstMoves::Ranked,
        },
        mode,
        rng,
    )
}

pub fn rollout_with(
    instance: &Instance,
    params: &ParamStore,
    cfg: &ModelConfig,
    opts: &RolloutOptions,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<RolloutBatch, RolloutError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let emb = encode(&mut tape, &bound, cfg, instance)?;
    let (trajectories, _) = rollout_on_tape(
        &mut tape,
        &bound,
        cfg,
        instance,
        &emb,
        &Policy::Decode(mode),
        opts,
        rng,
    )?;
    Ok(RolloutBatch {
        trajectories,
        mode: Some(mode),
        encoder_calls: 1,
    })
}

/// The eight symmetries of the unit square applied to every node, identity first.
pub fn augment8(instance: &Instance) -> Vec<Instance> {
    let maps: [fn(f64, f64) -> (f64, f64); 8] = [
        |x, y| (x, y),
        |x, y| (y, x),
        |x, y| (1.0 - x, y),
        |x, y| (x, 1.0 - y),
        |x, y| (1.0 - x, 1.0 - y),
        |x, y| (y, 1.0 - x),
        |x, y| (1.0 - y, x),
        |x, y| (1.0 - y, 1.0 - x),
    ];
    maps.iter()
        .map(|f| {
            let mut out = instance.clone();
            out.depot = f(instance.depot.0, instance.depot.1);
            for (dst, src) in out.customers.iter_mut().zip(&instance.customers) {
                *dst = f(src.0, src.1);
            }
            out
        })
        .collect()
}

/// Cheapest trajectory across all batches; the first one wins ties.
pub fn best_of(batches: &[RolloutBatch]) -> Result<Trajectory, RolloutError> {
    best_trajectory(batches.iter().flat_map(|b| b.trajectories.iter()))
}

pub fn best_trajectory<'t>(
    candidates: impl IntoIterator<Item = &'t Trajectory>,
) -> Result<Trajectory, RolloutError> {
    let mut best: Option<&Trajectory> = None;
    for t in candidates {
        if best.is_none_or(|b| t.cost < b.cost) {
            best = Some(t);
        }
    }
    best.cloned().ok_or(RolloutError::Empty)
}

/// Greedy multi-trajectory inference, optionally over the eight symmetric
/// copies. Costs are re-measured on `instance` itself.
pub fn solve(
    instance: &Instance,
    params: &ParamStore,
    cfg: &ModelConfig,
    k: usize,
    augment: bool,
    restrict_to: Option<&[usize]>,
) -> Result<Trajectory, RolloutError> {
    let copies = if augment {
        augment8(instance)
    } else {
        vec![instance.clone()]
    };
    let opts = RolloutOptions {
        k,
        restrict_to: restrict_to.map(<[usize]>::to_vec),
        keep_graph: false,
        first_moves: FirstMoves::Ranked,
    };
    // Greedy decoding never touches the RNG; any fixed seed will do.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut candidates = Vec::new();
    for copy in &copies {
        let batch = rollout_with(copy, params, cfg, &opts, DecodeMode::Greedy, &mut rng)?;
        for mut t in batch.trajectories {
            t.cost = tour_cost(instance, &t.nodes)?;
            candidates.push(t);
        }
    }
    best_trajectory(&candidates)
}

/// Log-probability of each given tour under the model, via teacher forcing.
/// Returns the tape handle of the summed log-probability.
pub fn replay_log_prob(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    instance: &Instance,
    tours: &[Vec<usize>],
) -> Result<Var, RolloutError> {
    let emb = encode(tape, bound, cfg, instance)?;
    let opts = RolloutOptions {
        k: tours.len(),
        restrict_to: None,
        keep_graph: true,
        first_moves: FirstMoves::Ranked,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, record) = rollout_on_tape(
        tape,
        bound,
        cfg,
        instance,
        &emb,
        &Policy::Replay(tours),
        &opts,
        &mut rng,
    )?;
    let mut parts = record.first.clone();
    parts.extend(record.steps.iter().map(|(v, _)| *v));
    let all = tape.concat_rows(&parts)?;
    Ok(tape.sum(all))
}
