use rand::Rng;

use super::{ModelConfig, QueryProjection};
use crate::numerics::{ParamStore, Tensor};

/// Every parameter tensor the configuration needs, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_h;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("enc.embed_depot.w".into(), vec![2, d]),
        ("enc.embed_depot.b".into(), vec![d]),
        ("enc.embed_node.w".into(), vec![3, d]),
        ("enc.embed_node.b".into(), vec![d]),
    ];
    for l in 0..cfg.layers {
        for m in ["wq", "wk", "wv", "wo"] {
            out.push((format!("enc.{l}.{m}"), vec![d, d]));
        }
        push_ff(&mut out, &format!("enc.{l}.ff"), d, cfg.d_ff, d);
    }
    let ctx = d + cfg.d_attr;
    match cfg.query_projection {
        QueryProjection::Linear => {
            out.push(("dec.wq".into(), vec![ctx, d]));
            out.push(("dec.wk".into(), vec![d, d]));
            out.push(("dec.wv".into(), vec![d, d]));
        }
        QueryProjection::FfQk => {
            push_ff(&mut out, "dec.q_ff", ctx, d, d);
            push_ff(&mut out, "dec.k_ff", d, d, d);
            out.push(("dec.wv".into(), vec![d, d]));
        }
        QueryProjection::FfQkv => {
            push_ff(&mut out, "dec.q_ff", ctx, d, d);
            push_ff(&mut out, "dec.k_ff", d, d, d);
            push_ff(&mut out, "dec.v_ff", d, d, d);
        }
    }
    out.push(("dec.wo".into(), vec![d, d]));
    if cfg.extra_mha {
        for m in ["wq", "wk", "wv", "wo"] {
            out.push((format!("dec.mha2.{m}"), vec![d, d]));
        }
    }
    if cfg.use_idt {
        out.push(("dec.idt".into(), vec![cfg.d_attr, d]));
    }
    if cfg.use_ff_query {
        push_ff(&mut out, "dec.ff", d, cfg.d_ff, d);
    }
    out
}

fn push_ff(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d_in: usize, hidden: usize, d_out: usize) {
    out.push((format!("{prefix}.w1"), vec![d_in, hidden]));
    out.push((format!("{prefix}.b1"), vec![hidden]));
    out.push((format!("{prefix}.w2"), vec![hidden, d_out]));
    out.push((format!("{prefix}.b2"), vec![d_out]));
}

/// Uniform initialization in `[-1/sqrt(d_h), 1/sqrt(d_h)]` for every tensor.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let bound = 1.0 / (cfg.d_h as f64).sqrt();
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        store.insert(name, Tensor::new(shape, data).expect("shape table is consistent"));
    }
    store
}

/// All-zero parameters with the configured shapes.
pub fn zero_params(cfg: &ModelConfig) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        store.insert(name, Tensor::zeros(shape));
    }
    store
}

/// Whether a parameter belongs to the encoder.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}
