use std::hash::Hasher;

use super::{ModelConfig, ModelError, NormKind, QueryProjection};
use crate::numerics::{BoundParams, Tape, Var};
use crate::vrp::Instance;

/// Static node embeddings of one instance plus the decoder keys and values
/// derived from them. Built once and shared by every trajectory and step.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `(N + 1) × d_h`, depot first.
    pub nodes: Var,
    pub num_nodes: usize,
    /// Per-head decoder keys / values, each `(N + 1) × d_h / heads`.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Keys / values of the stacked second attention layer, if configured.
    pub keys2: Vec<Var>,
    pub values2: Vec<Var>,
}

impl Embeddings {
    /// FNV-1a digest over the bits of every stored value.
    pub fn digest(&self, tape: &Tape<'_>) -> u64 {
        let mut h = Fnv64::default();
        let all = std::iter::once(self.nodes)
            .chain(self.keys.iter().copied())
            .chain(self.values.iter().copied())
            .chain(self.keys2.iter().copied())
            .chain(self.values2.iter().copied());
        for v in all {
            for x in tape.value(v) {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// `x·W + b`.
pub(crate) fn linear(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var, ModelError> {
    let y = tape.matmul(x, p.get(w)?)?;
    Ok(tape.add_row(y, p.get(b)?)?)
}

/// `relu(x·W1 + b1)·W2 + b2`.
pub(crate) fn feed_forward(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    x: Var,
    prefix: &str,
) -> Result<Var, ModelError> {
    let h = linear(tape, p, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = tape.relu(h);
    linear(tape, p, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

pub(crate) fn split_heads(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Vec<Var>, ModelError> {
    let width = tape.dims(x).1 / heads;
    (0..heads)
        .map(|s| Ok(tape.slice_cols(x, s * width, width)?))
        .collect()
}

fn check_finite(tape: &Tape<'_>, v: Var, stage: impl FnOnce() -> String) -> Result<(), ModelError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage: stage() })
    }
}

fn self_attention(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &ModelConfig,
    h: Var,
    layer: usize,
) -> Result<Var, ModelError> {
    let q = tape.matmul(h, p.get(&format!("enc.{layer}.wq"))?)?;
    let k = tape.matmul(h, p.get(&format!("enc.{layer}.wk"))?)?;
    let v = tape.matmul(h, p.get(&format!("enc.{layer}.wv"))?)?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let (qs, ks, vs) = (
        split_heads(tape, q, cfg.heads)?,
        split_heads(tape, k, cfg.heads)?,
        split_heads(tape, v, cfg.heads)?,
    );
    let mut outs = Vec::with_capacity(cfg.heads);
    for s in 0..cfg.heads {
        let scores = tape.matmul_t(qs[s], ks[s])?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores, None)?;
        outs.push(tape.matmul(attn, vs[s])?);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok(tape.matmul(cat, p.get(&format!("enc.{layer}.wo"))?)?)
}

fn norm(tape: &mut Tape<'_>, cfg: &ModelConfig, x: Var) -> Var {
    match cfg.norm {
        NormKind::Instance => tape.instance_norm(x),
        NormKind::None => x,
    }
}

/// Runs the encoder and precomputes decoder keys and values.
pub fn encode(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &ModelConfig,
    instance: &Instance,
) -> Result<Embeddings, ModelError> {
    let feats = instance.node_features();
    let depot = tape.constant(1, 2, vec![feats[0][0], feats[0][1]])?;
    let mut h = linear(tape, p, depot, "enc.embed_depot.w", "enc.embed_depot.b")?;
    if instance.num_customers() > 0 {
        let cust: Vec<f64> = feats[1..].iter().flatten().copied().collect();
        let cust = tape.constant(instance.num_customers(), 3, cust)?;
        let c = linear(tape, p, cust, "enc.embed_node.w", "enc.embed_node.b")?;
        h = tape.concat_rows(&[h, c])?;
    }
    check_finite(tape, h, || "input embedding".into())?;

    for layer in 0..cfg.layers {
        let mha = self_attention(tape, p, cfg, h, layer)?;
        let x = tape.add(h, mha)?;
        let x = norm(tape, cfg, x);
        let ff = feed_forward(tape, p, x, &format!("enc.{layer}.ff"))?;
        let y = tape.add(x, ff)?;
        h = norm(tape, cfg, y);
        check_finite(tape, h, || format!("encoder layer {layer}"))?;
    }

    let keys = match cfg.query_projection {
        QueryProjection::Linear => tape.matmul(h, p.get("dec.wk")?)?,
        QueryProjection::FfQk | QueryProjection::FfQkv => feed_forward(tape, p, h, "dec.k_ff")?,
    };
    let values = match cfg.query_projection {
        QueryProjection::FfQkv => feed_forward(tape, p, h, "dec.v_ff")?,
        _ => tape.matmul(h, p.get("dec.wv")?)?,
    };
    let (keys2, values2) = if cfg.extra_mha {
        let k2 = tape.matmul(h, p.get("dec.mha2.wk")?)?;
        let v2 = tape.matmul(h, p.get("dec.mha2.wv")?)?;
        (split_heads(tape, k2, cfg.heads)?, split_heads(tape, v2, cfg.heads)?)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Embeddings {
        nodes: h,
        num_nodes: instance.num_nodes(),
        keys: split_heads(tape, keys, cfg.heads)?,
        values: split_heads(tape, values, cfg.heads)?,
        keys2,
        values2,
    })
}
