use super::encoder::{encode, feed_forward, Embeddings};
use super::{ModelConfig, ModelError, QueryProjection};
use crate::numerics::{BoundParams, ParamStore, Tape, Var};
use crate::vrp::{Instance, RolloutState};

/// Lower clamp on distances inside the log of the distance heuristic.
pub const DIST_EPS: f64 = 1e-10;

/// Construction states of several trajectories decoded together, one row each.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub last_nodes: Vec<usize>,
    /// Normalized remaining capacity per row.
    pub remaining: Vec<f64>,
    /// Row-major `rows × (N + 1)` feasibility mask.
    pub mask: Vec<bool>,
}

impl StepBatch {
    pub fn push_state(&mut self, instance: &Instance, state: &RolloutState) -> Result<(), ModelError> {
        self.mask.extend(state.feasible_mask(instance)?);
        self.last_nodes.push(state.last_node());
        self.remaining.push(state.remaining_capacity());
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.last_nodes.len()
    }
}

pub struct StepOutput {
    /// Attention read-out over the feasible nodes, before any residual.
    pub attention: Var,
    /// Final query fed to the compatibility layer.
    pub query: Var,
    /// Clipped logits, `rows × (N + 1)`; masked entries are not meaningful.
    pub logits: Var,
    /// Log-probabilities; masked entries are `-inf`.
    pub log_probs: Var,
}

/// Single-query multi-head attention over feasible nodes.
fn masked_attention(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    query: Var,
    keys: &[Var],
    values: &[Var],
    mask: &[bool],
    wo: Var,
) -> Result<Var, ModelError> {
    let width = cfg.head_dim();
    let scale = 1.0 / (width as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for s in 0..cfg.heads {
        let q = tape.slice_cols(query, s * width, width)?;
        let scores = tape.matmul_t(q, keys[s])?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, Some(mask))?;
        heads.push(tape.matmul(weights, values[s])?);
    }
    let cat = tape.concat_cols(&heads)?;
    Ok(tape.matmul(cat, wo)?)
}

/// One decoding step for every row of `batch`.
pub fn decode_step(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &ModelConfig,
    emb: &Embeddings,
    instance: &Instance,
    batch: &StepBatch,
) -> Result<StepOutput, ModelError> {
    let rows = batch.rows();
    let n = emb.num_nodes;
    if batch.mask.len() != rows * n || batch.remaining.len() != rows {
        return Err(ModelError::Config(format!(
            "step batch with {rows} rows does not match {n} nodes"
        )));
    }
    let last = tape.gather_rows(emb.nodes, &batch.last_nodes)?;
    let dynamic = tape.constant(rows, cfg.d_attr, batch.remaining.clone())?;
    let context = tape.concat_cols(&[last, dynamic])?;
    let query = match cfg.query_projection {
        QueryProjection::Linear => tape.matmul(context, p.get("dec.wq")?)?,
        _ => feed_forward(tape, p, context, "dec.q_ff")?,
    };
    let mut attention = masked_attention(
        tape,
        cfg,
        query,
        &emb.keys,
        &emb.values,
        &batch.mask,
        p.get("dec.wo")?,
    )?;
    if cfg.extra_mha {
        let q2 = tape.matmul(attention, p.get("dec.mha2.wq")?)?;
        attention = masked_attention(
            tape,
            cfg,
            q2,
            &emb.keys2,
            &emb.values2,
            &batch.mask,
            p.get("dec.mha2.wo")?,
        )?;
    }

    let mut refined = attention;
    if cfg.use_idt {
        let projected = tape.matmul(dynamic, p.get("dec.idt")?)?;
        refined = tape.add(refined, last)?;
        refined = tape.add(refined, projected)?;
    }
    let query = if cfg.use_ff_query {
        let ff = feed_forward(tape, p, refined, "dec.ff")?;
        let ff = tape.relu(ff);
        tape.add(refined, ff)?
    } else {
        refined
    };

    let compat = tape.matmul_t(query, emb.nodes)?;
    let mut compat = tape.scale(compat, 1.0 / (cfg.d_h as f64).sqrt());
    if cfg.use_dist_heuristic {
        let mut neg_log = Vec::with_capacity(rows * n);
        for &from in &batch.last_nodes {
            for to in 0..n {
                neg_log.push(-instance.dist(from, to).max(DIST_EPS).ln());
            }
        }
        let penalty = tape.constant(rows, n, neg_log)?;
        compat = tape.add(compat, penalty)?;
    }
    let logits = tape.tanh_clip(compat, cfg.logit_clip);
    if !tape.value(logits).iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite {
            stage: "decoder logits".into(),
        });
    }
    let log_probs = tape.log_softmax_rows(logits, Some(&batch.mask))?;
    Ok(StepOutput {
        attention,
        query,
        logits,
        log_probs,
    })
}

/// Next-node distribution for a single state: encodes the instance and runs
/// one decoding step. Masked nodes get probability exactly 0.
pub fn step_probabilities(
    params: &ParamStore,
    cfg: &ModelConfig,
    instance: &Instance,
    state: &RolloutState,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let emb = encode(&mut tape, &bound, cfg, instance)?;
    let mut batch = StepBatch::default();
    batch.push_state(instance, state)?;
    let out = decode_step(&mut tape, &bound, cfg, &emb, instance, &batch)?;
    Ok(tape.value(out.log_probs).iter().map(|v| v.exp()).collect())
}
