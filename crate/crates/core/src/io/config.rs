//! TOML run configuration: `[model]`, `[train]`, `[train.gen]`,
//! `[train.gen.capacity]` and `[eval]`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use super::{write_atomic, IoError};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        let fail = |e: String| IoError::Format(e);
        self.model.validate().map_err(|e| fail(e.to_string()))?;
        self.train.validate().map_err(|e| fail(e.to_string()))?;
        self.eval.validate().map_err(fail)?;
        Ok(())
    }
}

/// Keys that may be absent from the serialized defaults.
const OPTIONAL_KEYS: &[(&str, &str, &str)] = &[
    ("train", "max_trajectories", "cap on trajectories per instance; absent means K = N"),
    ("train", "max_grad_norm", "clip the batch gradient to this L2 norm; absent disables clipping"),
];
const CAPACITY_KEYS: &[&str] = &["kind", "value", "low", "mode", "high"];

fn doc(section: &str, key: &str) -> Option<&'static str> {
    Some(match (section, key) {
        ("model", "d_h") => "embedding width",
        ("model", "heads") => "attention heads; must divide d_h",
        ("model", "layers") => "encoder layers",
        ("model", "d_ff") => "hidden width of the feed-forward blocks",
        ("model", "norm") => "\"instance\" or \"none\"",
        ("model", "use_idt") => "add the context (last node + projected capacity) to the decoder query",
        ("model", "use_ff_query") => "residual feed-forward refinement of the query",
        ("model", "use_dist_heuristic") => "subtract log distance from the last node in the logits",
        ("model", "logit_clip") => "C in C * tanh(logits)",
        ("model", "d_attr") => "dynamic feature width (remaining capacity)",
        ("model", "query_projection") => "\"linear\", \"ff_qk\" or \"ff_qkv\"",
        ("model", "extra_mha") => "stack a second decoder attention layer",
        ("train", "epochs") => "number of epochs",
        ("train", "instances_per_epoch") => "fresh instances sampled per epoch",
        ("train", "batch_size") => "instances per optimizer step",
        ("train", "first_moves") => "\"ranked\" (top-K first step) or \"indexed\" (lowest K customers)",
        ("train", "learning_rate") => "initial Adam learning rate",
        ("train", "lr_decay_epochs") => "1-based epochs at which the rate is multiplied by lr_decay_factor",
        ("train", "lr_decay_factor") => "in (0, 1]",
        ("train", "weight_decay") => "L2 coefficient added to the gradient",
        ("train", "checkpoint_every") => "epochs between checkpoints; 0 writes only the last",
        ("train", "seed") => "seed for initialization and trajectory sampling",
        ("train.gen", "size_min") => "smallest customer count",
        ("train.gen", "size_max") => "largest customer count",
        ("train.gen", "demand_min") => "smallest customer demand",
        ("train.gen", "demand_max") => "largest customer demand",
        ("train.gen", "seed") => "seed of the instance stream",
        ("train.gen.capacity", "kind") => "\"fixed\" (with value) or \"triangular_route\" (with low, mode, high)",
        ("train.gen.capacity", "low") => "smallest expected route size",
        ("train.gen.capacity", "mode") => "most likely expected route size",
        ("train.gen.capacity", "high") => "largest expected route size",
        ("train.gen.capacity", "value") => "vehicle capacity",
        ("eval", "max_trajectories") => "K = min(max_trajectories, N) at inference",
        ("eval", "augment") => "also decode the eight symmetric copies",
        ("eval", "round_distances") => "score with legs rounded to the nearest integer",
        ("eval", "count") => "held-out instances per size",
        ("eval", "sizes") => "customer counts of the held-out sets",
        ("eval", "seed") => "seed of the held-out instance streams",
        ("eval", "deltas") => "extension rates for probe-extension",
        _ => return None,
    })
}

fn suggest<'k>(key: &str, known: impl Iterator<Item = &'k str>) -> Option<String> {
    known
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .filter(|(d, k)| *d <= 2.max(k.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k.to_string())
}

fn check_keys(given: &toml::Table, known: &toml::Table, section: &str) -> Result<(), IoError> {
    for (key, value) in given {
        let extra: Vec<&str> = OPTIONAL_KEYS
            .iter()
            .filter(|(s, _, _)| *s == section)
            .map(|(_, k, _)| *k)
            .collect();
        let sub = if section.is_empty() { key.clone() } else { format!("{section}.{key}") };
        if section == "train.gen.capacity" {
            if !CAPACITY_KEYS.contains(&key.as_str()) {
                return Err(IoError::UnknownKey {
                    section: section.into(),
                    key: key.clone(),
                    suggestion: suggest(key, CAPACITY_KEYS.iter().copied()),
                });
            }
            continue;
        }
        match known.get(key) {
            Some(Value::Table(k)) => match value {
                Value::Table(v) => check_keys(v, k, &sub)?,
                _ => return Err(IoError::Format(format!("`{sub}` must be a table"))),
            },
            Some(_) => {}
            None if extra.contains(&key.as_str()) => {}
            None => {
                return Err(IoError::UnknownKey {
                    section: if section.is_empty() { "top level".into() } else { section.into() },
                    key: key.clone(),
                    suggestion: suggest(key, known.keys().map(String::as_str).chain(extra.iter().copied())),
                })
            }
        }
    }
    Ok(())
}

/// Parses a run configuration; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, IoError> {
    let given: toml::Table = text.parse().map_err(|e: toml::de::Error| IoError::Format(e.to_string()))?;
    let known = Value::try_from(RunConfig::default()).map_err(|e| IoError::Format(e.to_string()))?;
    let Value::Table(known) = known else { unreachable!("struct serializes to a table") };
    check_keys(&given, &known, "")?;
    let cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Format(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        IoError::Format(m) => IoError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn emit_table(out: &mut String, path: &str, table: &toml::Table) {
    let _ = writeln!(out, "[{path}]");
    for (key, value) in table {
        if value.is_table() {
            continue;
        }
        if let Some(d) = doc(path, key) {
            let _ = writeln!(out, "# {d}");
        }
        let _ = writeln!(out, "{key} = {value}");
    }
    for (sec, key, d) in OPTIONAL_KEYS {
        if *sec == path && !table.contains_key(*key) {
            let _ = writeln!(out, "# {d}");
            let _ = writeln!(out, "# {key} = ");
        }
    }
    for (key, value) in table {
        if let Value::Table(sub) = value {
            out.push('\n');
            emit_table(out, &format!("{path}.{key}"), sub);
        }
    }
}

/// Renders `cfg` as TOML with a comment above every key.
pub fn render_config(cfg: &RunConfig) -> Result<String, IoError> {
    let value = Value::try_from(cfg).map_err(|e| IoError::Format(e.to_string()))?;
    let Value::Table(root) = value else { unreachable!("struct serializes to a table") };
    let mut out = String::new();
    for (i, (key, value)) in root.iter().enumerate() {
        if let Value::Table(t) = value {
            if i > 0 {
                out.push('\n');
            }
            emit_table(&mut out, key, t);
        }
    }
    Ok(out)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<(), IoError> {
    write_atomic(path, render_config(cfg)?.as_bytes())
}
