//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "CMX1" | u32 version
//! u32 len | run config (TOML)
//! u32 len | meta (JSON)
//! u32 len | rng state
//! u32 count | count x (u32 name_len, name, u32 rank, rank x u32 dim, f32 values)
//! ```
//!
//! Model parameters come first, in layout order, followed by the optimizer
//! moments under `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::init_params;
use crate::autodiff::{ParameterSet, Tensor};
use crate::config::RunConfig;
use crate::fsutil::write_atomic;
use crate::trainer::{EpochMetrics, Mode};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CMX1";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: Mode,
    /// Completed epochs.
    pub epoch: u32,
    /// Optimizer updates applied.
    pub adam_step: u64,
    pub best_val_acc: Option<f64>,
    pub best_epoch: u32,
    pub metrics_tail: Option<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    /// Opaque generator state owned by the trainer.
    pub rng_state: Vec<u8>,
    pub params: ParameterSet<f32>,
    /// Adam first and second moments, laid out like `params`.
    pub adam_moments: Option<(ParameterSet<f32>, ParameterSet<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_bytes(out, name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.meta).expect("meta serializes").as_bytes());
        put_bytes(&mut out, &self.rng_state);
        let n_moments = if self.adam_moments.is_some() { 2 } else { 0 };
        put_u32(&mut out, ((1 + n_moments) * self.params.len()) as u32);
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        if let Some((m, v)) = &self.adam_moments {
            for (prefix, set) in [(ADAM_M, m), (ADAM_V, v)] {
                for (name, t) in set.iter() {
                    put_record(&mut out, &format!("{prefix}{name}"), t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = std::str::from_utf8(r.block()?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(config_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.block()?).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
        let rng_state = r.block()?.to_vec();

        let count = r.u32()? as usize;
        let mut params = ParameterSet::new();
        let mut m = ParameterSet::new();
        let mut v = ParameterSet::new();
        for _ in 0..count {
            let name = std::str::from_utf8(r.block()?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let (set, key) = if let Some(rest) = name.strip_prefix(ADAM_M) {
                (&mut m, rest.to_string())
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                (&mut v, rest.to_string())
            } else {
                (&mut params, name)
            };
            set.insert(key, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let layout = init_params(&config.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
        layout
            .check_same_layout(&params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the model config: {e}")))?;
        let adam_moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            for set in [&m, &v] {
                layout
                    .check_same_layout(set)
                    .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
            }
            Some((m, v))
        };
        Ok(Checkpoint {
            config,
            meta,
            rng_state,
            params,
            adam_moments,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.channels = vec![4, 8];
        config.model.init_seed = 11;
        let params = init_params(&config.model).unwrap();
        let m = params.zeros_like();
        let mut v = params.zeros_like();
        v.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x = 0.25));
        Checkpoint {
            config,
            meta: CheckpointMeta {
                mode: Mode::Cosmix,
                epoch: 3,
                adam_step: 12,
                best_val_acc: Some(0.4),
                best_epoch: 2,
                metrics_tail: None,
            },
            rng_state: vec![1, 2, 3],
            params,
            adam_moments: Some((m, v)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = sample();
        ck.params.iter_mut().next().unwrap().1.data_mut()[0] = f32::from_bits(0x3f80_0001);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn parameters_must_match_the_embedded_config() {
        let mut ck = sample();
        ck.config.model.channels = vec![4, 16];
        ck.adam_moments = None;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(Error::Checkpoint(_))));
    }
}
