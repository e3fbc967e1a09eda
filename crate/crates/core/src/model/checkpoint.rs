//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! magic "SAMRECCK" | version: u32
//! config: num_items, max_len, dim, num_layers, num_heads, dropout: f64
//! meta:   count, then (key, value) strings
//! params: count, then per tensor: name, rank, dims..., values: f64...
//! extra:  same encoding as params (optimizer / training state, may be empty)
//! ```
//!
//! Strings are a `u64` byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::check_layout;
use super::SasrecConfig;
use crate::autodiff::{Tensor, TensorSet};
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SAMRECCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SasrecConfig,
    pub params: TensorSet,
    pub meta: BTreeMap<String, String>,
    pub extra: TensorSet,
}

impl Checkpoint {
    pub fn new(config: SasrecConfig, params: TensorSet) -> Self {
        Self {
            config,
            params,
            meta: BTreeMap::new(),
            extra: TensorSet::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(MAGIC);
        e.u32(CHECKPOINT_VERSION);
        let c = &self.config;
        for v in [c.num_items, c.max_len, c.dim, c.num_layers, c.num_heads] {
            e.usize(v);
        }
        e.f64(c.dropout);
        e.usize(self.meta.len());
        for (k, v) in &self.meta {
            e.str(k);
            e.str(v);
        }
        encode_set(&mut e, &self.params);
        encode_set(&mut e, &self.extra);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "checkpoint");
        d.expect_magic(MAGIC)?;
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "incompatible checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = SasrecConfig {
            num_items: d.usize()?,
            max_len: d.usize()?,
            dim: d.usize()?,
            num_layers: d.usize()?,
            num_heads: d.usize()?,
            dropout: d.f64()?,
        };
        config.validate()?;
        let mut meta = BTreeMap::new();
        for _ in 0..d.len(16)? {
            let k = d.str()?;
            meta.insert(k, d.str()?);
        }
        let params = decode_set(&mut d)?;
        let extra = decode_set(&mut d)?;
        d.finish()?;
        check_layout(&config, &params)?;
        Ok(Self {
            config,
            params,
            meta,
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode_set(e: &mut Encoder, set: &TensorSet) {
    e.usize(set.len());
    for (name, t) in set.iter() {
        e.str(name);
        e.usize(t.shape().len());
        for &dim in t.shape() {
            e.usize(dim);
        }
        for &v in t.data() {
            e.f64(v);
        }
    }
}

fn decode_set(d: &mut Decoder<'_>) -> Result<TensorSet> {
    let mut set = TensorSet::new();
    for _ in 0..d.len(16)? {
        let name = d.str()?;
        let rank = d.len(8)?;
        let shape = (0..rank).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        for _ in 0..numel {
            data.push(d.f64()?);
        }
        set.push(name, Tensor::new(shape, data)?);
    }
    Ok(set)
}
