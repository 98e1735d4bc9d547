//! Binary checkpoint: `EPCK`, u32 version, u32-prefixed `key=value` header,
//! u32 array count, named arrays, then a trailing u64 checksum (the first
//! eight bytes of the SHA-256 of everything before it). All integers and
//! floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{TrainConfig, TrainHistory};
use crate::model::{ModelConfig, ModelParams, Normalization};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EPCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint {key} is {found}, run expects {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub train: TrainConfig,
}

impl Checkpoint {
    /// Fails with the first model setting that differs from `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let have = model_header(&self.params.config);
        for (key, want) in model_header(expected) {
            let found = have.get(&key).cloned().unwrap_or_default();
            if found != want {
                return Err(CheckpointError::ConfigMismatch {
                    key,
                    expected: want,
                    found,
                });
            }
        }
        Ok(())
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn model_header(c: &ModelConfig) -> BTreeMap<String, String> {
    let domain: Vec<String> = c.domain.iter().map(|(lo, hi)| format!("{lo}:{hi}")).collect();
    [
        ("model.dim", c.dim.to_string()),
        ("model.components", c.components.to_string()),
        ("model.domain", domain.join(",")),
        ("model.grid_nodes", join(&c.grid_nodes)),
        ("model.backbone_depth", c.backbone_depth.to_string()),
        ("model.backbone_width", c.backbone_width.to_string()),
        ("model.kernel_size", c.kernel_size.to_string()),
        ("model.head_hidden", join(&c.head_hidden)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn header(ck: &Checkpoint) -> BTreeMap<String, String> {
    let mut h = model_header(&ck.params.config);
    let t = &ck.train;
    let n = ck.params.normalization;
    // f64 Display is the shortest string that parses back to the same bits.
    for (k, v) in [
        ("norm.mean", n.mean.to_string()),
        ("norm.std", n.std.to_string()),
        ("train.max_epochs", t.max_epochs.to_string()),
        ("train.learning_rate", t.learning_rate.to_string()),
        ("train.beta1", t.beta1.to_string()),
        ("train.beta2", t.beta2.to_string()),
        ("train.epsilon", t.epsilon.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.patience", t.patience.to_string()),
        ("train.seed", t.seed.to_string()),
        ("history.best_epoch", ck.history.best_epoch.to_string()),
    ] {
        h.insert(k.to_string(), v);
    }
    h
}

fn push_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend((d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend(v.to_le_bytes());
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Serialises a checkpoint to bytes. Wall-clock times are not stored.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    let text: String = header(ck).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    buf.extend((text.len() as u32).to_le_bytes());
    buf.extend(text.as_bytes());

    let named = ck.params.named_tensors();
    buf.extend((named.len() as u32 + 2).to_le_bytes());
    for (name, t) in &named {
        push_array(&mut buf, name, t.shape(), t.values());
    }
    let h = &ck.history;
    push_array(&mut buf, "history.train_nll", &[h.train_nll.len()], &h.train_nll);
    push_array(&mut buf, "history.val_nll", &[h.val_nll.len()], &h.val_nll);
    let sum = checksum(&buf);
    buf.extend(sum.to_le_bytes());
    buf
}

pub fn save_checkpoint(
    params: &ModelParams,
    history: &TrainHistory,
    train: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let ck = Checkpoint {
        params: params.clone(),
        history: history.clone(),
        train: train.clone(),
    };
    fs::write(path, encode(&ck)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let found = r.u32("version")?;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("no room for a checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };

    let len = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let count = r.u32("array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("array name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "array name")?)
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("array rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("array dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("array too large".into()))?, &name)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.insert(name, (shape, values));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes after arrays".into()));
    }
    build(&header, arrays)
}

fn get<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = h
        .get(key)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing header key {key}")))?;
    v.parse()
        .map_err(|_| CheckpointError::Malformed(format!("bad value {v:?} for {key}")))
}

fn list<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    let v: String = get(h, key)?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.parse().map_err(|_| CheckpointError::Malformed(format!("bad value {s:?} for {key}"))))
        .collect()
}

fn build(h: &BTreeMap<String, String>, mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Checkpoint> {
    let domain = list::<String>(h, "model.domain")?
        .iter()
        .map(|s| {
            let (lo, hi) = s
                .split_once(':')
                .ok_or_else(|| CheckpointError::Malformed(format!("domain axis {s:?}")))?;
            let p = |x: &str| x.parse::<f64>().map_err(|_| CheckpointError::Malformed(format!("domain axis {s:?}")));
            Ok((p(lo)?, p(hi)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        dim: get(h, "model.dim")?,
        components: get(h, "model.components")?,
        domain,
        grid_nodes: list(h, "model.grid_nodes")?,
        backbone_depth: get(h, "model.backbone_depth")?,
        backbone_width: get(h, "model.backbone_width")?,
        kernel_size: get(h, "model.kernel_size")?,
        head_hidden: list(h, "model.head_hidden")?,
    };
    let mut params = ModelParams::init(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    params.normalization = Normalization {
        mean: get(h, "norm.mean")?,
        std: get(h, "norm.std")?,
    };
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let (shape, values) = arrays
            .remove(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing array {name}")))?;
        if shape != t.shape() {
            return Err(CheckpointError::Malformed(format!(
                "array {name} has shape {shape:?}, config implies {:?}",
                t.shape()
            )));
        }
        *t = Tensor::new(shape, values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let mut series = |name: &str| {
        arrays
            .remove(name)
            .map(|(_, v)| v)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing array {name}")))
    };
    let history = TrainHistory {
        train_nll: series("history.train_nll")?,
        val_nll: series("history.val_nll")?,
        wall_seconds: Vec::new(),
        best_epoch: get(h, "history.best_epoch")?,
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected array {extra}")));
    }
    let train = TrainConfig {
        max_epochs: get(h, "train.max_epochs")?,
        learning_rate: get(h, "train.learning_rate")?,
        beta1: get(h, "train.beta1")?,
        beta2: get(h, "train.beta2")?,
        epsilon: get(h, "train.epsilon")?,
        batch_size: get(h, "train.batch_size")?,
        patience: get(h, "train.patience")?,
        seed: get(h, "train.seed")?,
    };
    Ok(Checkpoint { params, history, train })
}
