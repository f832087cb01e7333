//! Shared helpers for the integration tests. The model and solver oracles
//! are plain loops over `Vec<f64>` and never touch the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reld::instance_gen::{generate_set, GenConfig};
use reld::model::{encode, init_params, ModelConfig, NormKind, QueryProjection};
use reld::numerics::{BoundParams, NumericsError, ParamStore, Tape, Var};
use reld::rollout::{rollout_on_tape, rollout_with, DecodeMode, FirstMoves, Policy, RolloutOptions};
use reld::training::reinforce_loss;
use reld::vrp::{Instance, RolloutState};

#[derive(Clone, Debug)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), r * c);
        Self { r, c, d }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }
}

fn param(p: &ParamStore, name: &str) -> Mat {
    let t = p.get(name).unwrap_or_else(|_| panic!("missing {name}"));
    let s = t.shape();
    if s.len() == 1 {
        Mat::new(1, s[0], t.data().to_vec())
    } else {
        Mat::new(s[0], s[1], t.data().to_vec())
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.c, b.r);
    let mut out = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(k, j);
            }
            out[i * b.c + j] = s;
        }
    }
    Mat::new(a.r, b.c, out)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.r, a.c), (b.r, b.c));
    Mat::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect())
}

fn add_bias(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[i * a.c + j] += b.d[j];
        }
    }
    out
}

fn relu(a: &Mat) -> Mat {
    Mat::new(a.r, a.c, a.d.iter().map(|x| x.max(0.0)).collect())
}

fn linear(p: &ParamStore, x: &Mat, prefix: &str) -> Mat {
    add_bias(&matmul(x, &param(p, &format!("{prefix}.w"))), &param(p, &format!("{prefix}.b")))
}

fn ff(p: &ParamStore, x: &Mat, prefix: &str) -> Mat {
    let h = relu(&add_bias(&matmul(x, &param(p, &format!("{prefix}.w1"))), &param(p, &format!("{prefix}.b1"))));
    add_bias(&matmul(&h, &param(p, &format!("{prefix}.w2"))), &param(p, &format!("{prefix}.b2")))
}

fn cols(a: &Mat, start: usize, width: usize) -> Mat {
    let mut out = Vec::with_capacity(a.r * width);
    for i in 0..a.r {
        out.extend_from_slice(&a.row(i)[start..start + width]);
    }
    Mat::new(a.r, width, out)
}

fn rows(a: &Mat, start: usize, count: usize) -> Mat {
    Mat::new(count, a.c, a.d[start * a.c..(start + count) * a.c].to_vec())
}

/// Softmax over the entries with `mask[i] == true`; others get 0.
pub fn masked_softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = x
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x
        .iter()
        .zip(mask)
        .map(|(v, &k)| if k { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn instance_norm(a: &Mat) -> Mat {
    let mut out = a.clone();
    for j in 0..a.c {
        let mean = (0..a.r).map(|i| a.at(i, j)).sum::<f64>() / a.r as f64;
        let var = (0..a.r).map(|i| (a.at(i, j) - mean).powi(2)).sum::<f64>() / a.r as f64;
        let inv = 1.0 / (var + 1e-10).sqrt();
        for i in 0..a.r {
            out.d[i * a.c + j] = (a.at(i, j) - mean) * inv;
        }
    }
    out
}

fn norm(cfg: &ModelConfig, a: &Mat) -> Mat {
    match cfg.norm {
        NormKind::Instance => instance_norm(a),
        NormKind::None => a.clone(),
    }
}

/// Full multi-head self-attention, head by head, entry by entry.
fn self_attention(p: &ParamStore, cfg: &ModelConfig, h: &Mat, layer: usize) -> Mat {
    let q = matmul(h, &param(p, &format!("enc.{layer}.wq")));
    let k = matmul(h, &param(p, &format!("enc.{layer}.wk")));
    let v = matmul(h, &param(p, &format!("enc.{layer}.wv")));
    let dk = cfg.d_h / cfg.heads;
    let mut cat = Mat::new(h.r, cfg.d_h, vec![0.0; h.r * cfg.d_h]);
    for s in 0..cfg.heads {
        for i in 0..h.r {
            let scores: Vec<f64> = (0..h.r)
                .map(|j| (0..dk).map(|t| q.at(i, s * dk + t) * k.at(j, s * dk + t)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let w = masked_softmax(&scores, &vec![true; h.r]);
            for t in 0..dk {
                cat.d[i * cfg.d_h + s * dk + t] = (0..h.r).map(|j| w[j] * v.at(j, s * dk + t)).sum();
            }
        }
    }
    matmul(&cat, &param(p, &format!("enc.{layer}.wo")))
}

pub struct OracleEmb {
    pub h: Mat,
    pub keys: Mat,
    pub values: Mat,
    pub keys2: Option<Mat>,
    pub values2: Option<Mat>,
}

pub fn oracle_encode(p: &ParamStore, cfg: &ModelConfig, inst: &Instance) -> OracleEmb {
    let depot = Mat::new(1, 2, vec![inst.depot.0, inst.depot.1]);
    let mut d = linear(p, &depot, "enc.embed_depot").d;
    let cap = f64::from(inst.capacity);
    for (c, &dem) in inst.customers.iter().zip(&inst.demands) {
        let x = Mat::new(1, 3, vec![c.0, c.1, f64::from(dem) / cap]);
        d.extend(linear(p, &x, "enc.embed_node").d);
    }
    let mut h = Mat::new(inst.num_nodes(), cfg.d_h, d);
    for l in 0..cfg.layers {
        let x = norm(cfg, &add(&h, &self_attention(p, cfg, &h, l)));
        h = norm(cfg, &add(&x, &ff(p, &x, &format!("enc.{l}.ff"))));
    }
    let keys = match cfg.query_projection {
        QueryProjection::Linear => matmul(&h, &param(p, "dec.wk")),
        _ => ff(p, &h, "dec.k_ff"),
    };
    let values = match cfg.query_projection {
        QueryProjection::FfQkv => ff(p, &h, "dec.v_ff"),
        _ => matmul(&h, &param(p, "dec.wv")),
    };
    let (keys2, values2) = if cfg.extra_mha {
        (Some(matmul(&h, &param(p, "dec.mha2.wk"))), Some(matmul(&h, &param(p, "dec.mha2.wv"))))
    } else {
        (None, None)
    };
    OracleEmb {
        h,
        keys,
        values,
        keys2,
        values2,
    }
}

/// Single-query attention written as the double sum
/// `Σ_s Σ_i u_{s,i} · (v_{s,i} W_o^s)` with `W_o^s` the head's row block of `W_o`.
pub fn expanded_attention(
    cfg: &ModelConfig,
    query: &[f64],
    keys: &Mat,
    values: &Mat,
    wo: &Mat,
    mask: &[bool],
) -> Vec<f64> {
    let dk = cfg.d_h / cfg.heads;
    let mut out = vec![0.0; cfg.d_h];
    for s in 0..cfg.heads {
        let scores: Vec<f64> = (0..keys.r)
            .map(|i| (0..dk).map(|t| query[s * dk + t] * keys.at(i, s * dk + t)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let u = masked_softmax(&scores, mask);
        let wo_s = rows(wo, s * dk, dk);
        for i in 0..keys.r {
            if !mask[i] {
                continue;
            }
            let v_si = cols(&Mat::new(1, values.c, values.row(i).to_vec()), s * dk, dk);
            let projected = matmul(&v_si, &wo_s);
            for (o, x) in out.iter_mut().zip(&projected.d) {
                *o += u[i] * x;
            }
        }
    }
    out
}

pub struct OracleStep {
    pub attention: Vec<f64>,
    pub query: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn oracle_step(
    p: &ParamStore,
    cfg: &ModelConfig,
    inst: &Instance,
    emb: &OracleEmb,
    last: usize,
    remaining: f64,
    mask: &[bool],
) -> OracleStep {
    let mut ctx = emb.h.row(last).to_vec();
    ctx.push(remaining);
    let ctx = Mat::new(1, cfg.d_h + 1, ctx);
    let q = match cfg.query_projection {
        QueryProjection::Linear => matmul(&ctx, &param(p, "dec.wq")),
        _ => ff(p, &ctx, "dec.q_ff"),
    };
    let mut attention = expanded_attention(cfg, &q.d, &emb.keys, &emb.values, &param(p, "dec.wo"), mask);
    if cfg.extra_mha {
        let q2 = matmul(&Mat::new(1, cfg.d_h, attention.clone()), &param(p, "dec.mha2.wq"));
        attention = expanded_attention(
            cfg,
            &q2.d,
            emb.keys2.as_ref().unwrap(),
            emb.values2.as_ref().unwrap(),
            &param(p, "dec.mha2.wo"),
            mask,
        );
    }
    let mut refined = attention.clone();
    if cfg.use_idt {
        let w = param(p, "dec.idt");
        for j in 0..cfg.d_h {
            refined[j] += emb.h.at(last, j) + remaining * w.at(0, j);
        }
    }
    let query = if cfg.use_ff_query {
        let r = Mat::new(1, cfg.d_h, refined.clone());
        let f = relu(&ff(p, &r, "dec.ff"));
        refined.iter().zip(&f.d).map(|(a, b)| a + b).collect()
    } else {
        refined
    };
    let logits: Vec<f64> = (0..inst.num_nodes())
        .map(|i| {
            let mut u = (0..cfg.d_h).map(|j| query[j] * emb.h.at(i, j)).sum::<f64>() / (cfg.d_h as f64).sqrt();
            if cfg.use_dist_heuristic {
                u -= inst.dist(last, i).max(1e-10).ln();
            }
            cfg.logit_clip * u.tanh()
        })
        .collect();
    let probs = masked_softmax(&logits, mask);
    OracleStep {
        attention,
        query,
        logits,
        probs,
    }
}

/// Every model variant the ablation lattice can express.
pub fn variant_lattice() -> Vec<&'static str> {
    vec![
        "pomo",
        "pomon",
        "pomon+idt",
        "pomon+ff",
        "pomon+dist",
        "pomon+idt+ff",
        "pomon+idt+ff+dist",
        "pomon+idt+ff+dist+ffqk",
        "pomon+idt+ff+dist+ffqkv",
        "pomon+idt+ff+dist+mha",
        "pomo+idt+ff+dist",
    ]
}

pub fn small(variant: &str) -> ModelConfig {
    ModelConfig {
        d_h: 16,
        heads: 4,
        layers: 2,
        d_ff: 32,
        ..ModelConfig::variant(variant).unwrap()
    }
}

pub fn params_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn instances(n: usize, count: usize, seed: u64) -> Vec<Instance> {
    generate_set(&GenConfig::fixed(n, GenConfig::standard_capacity(n)).with_seed(seed), 0, count).unwrap()
}

/// A state reached by `moves` random feasible moves (stops early when done).
pub fn random_state(inst: &Instance, moves: usize, rng: &mut impl Rng) -> RolloutState {
    let mut st = RolloutState::new(inst);
    for _ in 0..moves {
        let mask = st.feasible_mask(inst).unwrap();
        let options: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let next = options[rng.gen_range(0..options.len())];
        let mut probe = st.clone();
        probe.apply_move(inst, next).unwrap();
        if probe.done() {
            break;
        }
        st = probe;
    }
    st
}

/// Optimal cost by enumerating every customer order and every way of
/// cutting it into consecutive capacity-feasible routes.
pub fn brute_force(inst: &Instance, leg: impl Fn(usize, usize) -> f64) -> f64 {
    let n = inst.num_customers();
    let mut perm: Vec<usize> = (1..=n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |order| {
        for cuts in 0u32..(1 << (n.saturating_sub(1))) {
            let mut cost = 0.0;
            let mut load = 0u32;
            let mut prev = 0;
            let mut ok = true;
            for (pos, &c) in order.iter().enumerate() {
                if pos > 0 && cuts & (1 << (pos - 1)) != 0 {
                    cost += leg(prev, 0);
                    prev = 0;
                    load = 0;
                }
                load += inst.demand(c);
                if load > inst.capacity {
                    ok = false;
                    break;
                }
                cost += leg(prev, c);
                prev = c;
            }
            if ok {
                cost += leg(prev, 0);
                if cost < best {
                    best = cost;
                }
            }
        }
    });
    best
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

/// `k` sampled tours and their costs.
pub fn sampled_tours(params: &ParamStore, cfg: &ModelConfig, inst: &Instance, k: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<f64>) {
    let opts = RolloutOptions {
        k,
        restrict_to: None,
        keep_graph: false,
        first_moves: FirstMoves::Ranked,
    };
    let batch = rollout_with(inst, params, cfg, &opts, DecodeMode::Sample, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (
        batch.trajectories.iter().map(|t| t.nodes.clone()).collect(),
        batch.trajectories.iter().map(|t| t.cost).collect(),
    )
}

/// Policy-gradient loss of fixed tours under fixed costs, by teacher forcing.
pub fn replay_loss<'a>(
    tape: &mut Tape<'a>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    inst: &Instance,
    tours: &[Vec<usize>],
    costs: &[f64],
) -> Result<Var, NumericsError> {
    let wrap = |e: String| NumericsError::NonFinite(e);
    let emb = encode(tape, bound, cfg, inst).map_err(|e| wrap(e.to_string()))?;
    let opts = RolloutOptions {
        k: tours.len(),
        restrict_to: None,
        keep_graph: true,
        first_moves: FirstMoves::Ranked,
    };
    let (_, record) = rollout_on_tape(tape, bound, cfg, inst, &emb, &Policy::Replay(tours), &opts, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| wrap(e.to_string()))?;
    reinforce_loss(tape, &record, costs).map_err(|e| wrap(e.to_string()))
}

pub fn loss_gradient(params: &ParamStore, cfg: &ModelConfig, inst: &Instance, tours: &[Vec<usize>], costs: &[f64]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = replay_loss(&mut tape, &bound, cfg, inst, tours, costs).unwrap();
    tape.backward(loss).unwrap();
    params.collect_grads(&tape, &bound)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
