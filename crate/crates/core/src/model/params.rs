use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::ModelConfig;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVGT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: unsupported checkpoint version {found}")]
    Version { path: PathBuf, found: u32 },
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Registers freshly initialized parameters.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    pub params: Params,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(),
        }
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.params.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("consistent shape"),
        );
    }

    /// Weight `[fan_in, fan_out]` with std `1/sqrt(fan_in)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.normal(
            format!("{name}.w"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
        );
        if bias {
            self.params
                .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params
            .insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn fail(&self, reason: String) -> CheckpointError {
        CheckpointError::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason,
        }
    }
}

/// Writes `magic, version, config JSON, then (name, shape, data)` records.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &Params,
) -> Result<(), CheckpointError> {
    let mut out = Vec::with_capacity(params.numel() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(io)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let len = c.u32("config length")? as usize;
    let cfg_bytes = c.take(len, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| c.fail(format!("config: {e}")))?;
    let count = c.u32("parameter count")?;
    let mut params = Params::new();
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let name =
            String::from_utf8(c.take(n, "name")?.to_vec()).map_err(|e| c.fail(e.to_string()))?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("shape")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8, "parameter data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.fail(format!("{name}: {e}")))?;
        params.insert(name, t);
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes".into()));
    }
    Ok((config, params))
}
