//! Binary checkpoint format.
//!
//! ```text
//! "RLDV1"
//! u32 header length, header JSON (model config + optional training state)
//! u32 entry count
//! per entry: u16 name length, name, u8 rank, u32 dims.., u8 dtype (1 = f32)
//! payload: little-endian f32 values of every entry, in table order
//! u64 FNV-1a checksum of every preceding byte
//! ```
//! All integers are little-endian.

use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, IoError};
use crate::model::{param_shapes, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::training::AdamState;

pub const MAGIC: &[u8; 5] = b"RLDV1";
const DTYPE_F32: u8 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Optimizer progress saved alongside the parameters for exact resumption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = crate::model::Fnv64::default();
    h.write(bytes);
    h.finish()
}

/// Rounds a value to the nearest `f32`, the precision checkpoints store.
pub fn to_stored_precision(x: f64) -> f64 {
    f64::from(x as f32)
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore) -> Self {
        Self {
            model,
            params,
            train_state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IoError> {
        let header = Header {
            model: self.model.clone(),
            epoch: self.train_state.as_ref().map(|s| s.epoch),
            adam_step: self.train_state.as_ref().map(|s| s.adam.step),
        };
        let header = serde_json::to_vec(&header).map_err(|e| IoError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let entries = self.entries_owned();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            let name = name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
        }
        for (_, t) in &entries {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    fn entries_owned(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(ts) = &self.train_state {
            for (prefix, data) in [(ADAM_M, &ts.adam.m), (ADAM_V, &ts.adam.v)] {
                for ((n, t), d) in self.params.iter().zip(data.iter()) {
                    let moment = Tensor::new(t.shape().to_vec(), d.clone()).expect("moment matches tensor");
                    out.push((format!("{prefix}{n}"), moment));
                }
            }
        }
        out
    }

    /// Parses and validates a checkpoint. When `expected` is given, every
    /// tensor it requires must be present with the same shape.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, IoError> {
        if !bytes.starts_with(MAGIC) {
            return Err(IoError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(IoError::Format("checkpoint is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = fnv1a(body);
        if stored != actual {
            return Err(IoError::Checksum { stored, actual });
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| IoError::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| IoError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(IoError::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            table.push((name, shape));
        }
        let payload_len: usize = table.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
        let payload = r.take(payload_len)?;
        if r.pos != body.len() {
            return Err(IoError::Format("trailing bytes after checksum".into()));
        }

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut offset = 0;
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            offset += 4 * n;
            if name.starts_with(ADAM_M) {
                m.push(data);
            } else if name.starts_with(ADAM_V) {
                v.push(data);
            } else {
                params.insert(name, Tensor::new(shape, data).map_err(|e| IoError::Format(e.to_string()))?);
            }
        }

        let cfg = expected.unwrap_or(&header.model);
        for (name, shape) in param_shapes(cfg) {
            match params.get(&name) {
                Ok(t) if t.shape() == &shape[..] => {}
                Ok(t) => {
                    return Err(IoError::ShapeMismatch {
                        tensor: name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                Err(_) => {
                    return Err(IoError::ShapeMismatch {
                        tensor: name,
                        expected: shape,
                        found: vec![],
                    })
                }
            }
        }
        if params.len() != param_shapes(cfg).len() {
            return Err(IoError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                param_shapes(cfg).len()
            )));
        }

        let train_state = match header.epoch {
            Some(epoch) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(IoError::Format("incomplete optimizer state".into()));
                }
                Some(TrainState {
                    epoch,
                    adam: AdamState {
                        step: header.adam_step.unwrap_or(0),
                        m,
                        v,
                    },
                })
            }
            None => None,
        };
        Ok(Self {
            model: header.model,
            params,
            train_state,
        })
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_h: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            ..ModelConfig::reld()
        }
    }

    fn quantized(mut p: ParamStore) -> ParamStore {
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = to_stored_precision(*x));
        }
        p
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let cfg = small();
        let params = quantized(init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        let ckpt = Checkpoint::new(cfg.clone(), params);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), Some(&cfg)).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn train_state_round_trip() {
        let cfg = small();
        let params = quantized(init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        let mut adam = AdamState::new(&params);
        adam.step = 17;
        adam.m[0][0] = 0.5;
        adam.v[1][0] = 0.25;
        let ckpt = Checkpoint {
            model: cfg.clone(),
            params,
            train_state: Some(TrainState { epoch: 3, adam }),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), None).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small();
        let ckpt = Checkpoint::new(cfg.clone(), init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        let mut bytes = ckpt.to_bytes().unwrap();
        let at = bytes.len() - 20;
        bytes[at] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes, None), Err(IoError::Checksum { .. })));
        let mut bad_magic = ckpt.to_bytes().unwrap();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic, None), Err(IoError::BadMagic)));
        let short = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&short[..short.len() - 3], None).is_err());
    }

    #[test]
    fn header_and_table_bytes_are_covered() {
        let cfg = small();
        let ckpt = Checkpoint::new(cfg.clone(), init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        let clean = ckpt.to_bytes().unwrap();
        for at in MAGIC.len()..clean.len() {
            let mut bytes = clean.clone();
            bytes[at] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bytes, None), Err(IoError::Checksum { .. })), "byte {at}");
        }
    }

    #[test]
    fn wrong_width_names_tensor() {
        let cfg = small();
        let ckpt = Checkpoint::new(cfg.clone(), init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        let wider = ModelConfig { d_h: 16, ..cfg };
        match Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), Some(&wider)) {
            Err(IoError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "enc.embed_depot.w"),
            other => panic!("{other:?}"),
        }
    }
}
