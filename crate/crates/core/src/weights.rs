//! HKWF weight archives and binding them to a [`Network`].
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "HKWF"
//! version      u32      currently 1
//! entry_count  u32
//! entry * entry_count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8, unique within the archive
//!   dtype      u32      0 = float32
//!   rank       u32
//!   dims       rank * u32
//!   payload    product(dims) * 4 bytes, f32 little-endian
//! crc32        u32      CRC-32 (IEEE) of every preceding byte
//! ```

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::netgraph::{Activation, EntryRole, Layer, LayerOp, Network};
use crate::tensor::{
    batch_norm, fold_batchnorm, fold_batchnorm_depthwise, fold_batchnorm_transposed, relu6_in_place,
    BatchNormParams, Exec, Shape, Tensor,
};

pub const MAGIC: &[u8; 4] = b"HKWF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("not a weight archive")]
    NotArchive,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive corrupted: crc32 {found:08x}, computed {computed:08x}")]
    Corrupt { found: u32, computed: u32 },
    #[error("archive truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the last entry")]
    TrailingBytes(usize),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("entry {name:?}: unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: u32 },
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("entry {name:?}: {len} values for dims {dims:?}")]
    PayloadSize { name: String, dims: Vec<u32>, len: usize },
    #[error("missing entries: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("layer {layer}: entry {name} has dims {found:?}, expected {expected:?}")]
    DimMismatch {
        layer: String,
        name: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Self {
        ArchiveEntry { dims, data }
    }

    fn expected_len(dims: &[u32]) -> usize {
        dims.iter().map(|&d| d as usize).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub version: u32,
    entries: IndexMap<String, ArchiveEntry>,
}

impl Default for WeightArchive {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightArchive {
    pub fn new() -> Self {
        WeightArchive {
            version: VERSION,
            entries: IndexMap::new(),
        }
    }

    /// Adds an entry; names must be unique and the payload must fill `dims`.
    pub fn insert(&mut self, name: impl Into<String>, entry: ArchiveEntry) -> Result<(), ArchiveError> {
        let name = name.into();
        if entry.data.len() != ArchiveEntry::expected_len(&entry.dims) {
            return Err(ArchiveError::PayloadSize {
                name,
                dims: entry.dims,
                len: entry.data.len(),
            });
        }
        if self.entries.contains_key(&name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArchiveEntry> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_archive(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        read_archive(bytes)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(read_archive(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn write_archive(archive: &WeightArchive) -> Vec<u8> {
    let payload: usize = archive.entries.values().map(|e| e.data.len() * 4 + 64).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&archive.version.to_le_bytes());
    out.extend_from_slice(&(archive.entries.len() as u32).to_le_bytes());
    for (name, e) in &archive.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).ok_or(ArchiveError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(ArchiveError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ArchiveError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses and verifies an archive. A stream cut short reports
/// [`ArchiveError::Truncated`]; any other checksum failure reports
/// [`ArchiveError::Corrupt`].
pub fn read_archive(bytes: &[u8]) -> Result<WeightArchive, ArchiveError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ArchiveError::NotArchive);
    }
    if bytes.len() < 16 {
        return Err(ArchiveError::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let found = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let parsed = parse_body(body);
    if found != computed {
        return Err(match parsed {
            Err(e @ ArchiveError::Truncated(_)) => e,
            _ => ArchiveError::Corrupt { found, computed },
        });
    }
    parsed
}

fn parse_body(body: &[u8]) -> Result<WeightArchive, ArchiveError> {
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = cur.u32("entry count")?;
    let mut archive = WeightArchive::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| ArchiveError::InvalidName)?
            .to_string();
        let dtype = cur.u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(ArchiveError::UnsupportedDtype { name, dtype });
        }
        let rank = cur.u32("rank")? as usize;
        let dims = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(4))
            .ok_or(ArchiveError::Truncated("payload"))?;
        let data = cur
            .take(n, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        archive.insert(name, ArchiveEntry { dims, data })?;
    }
    if cur.pos != body.len() {
        return Err(ArchiveError::TrailingBytes(body.len() - cur.pos));
    }
    archive.version = version;
    Ok(archive)
}

fn to_u32(dims: &[usize]) -> Vec<u32> {
    dims.iter().map(|&d| d as u32).collect()
}

fn fetch<'a>(archive: &'a WeightArchive, layer: &str, name: &str, dims: &[usize]) -> Result<&'a [f32], ArchiveError> {
    let e = archive
        .get(name)
        .ok_or_else(|| ArchiveError::Missing(vec![name.to_string()]))?;
    let expected = to_u32(dims);
    if e.dims != expected {
        return Err(ArchiveError::DimMismatch {
            layer: layer.to_string(),
            name: name.to_string(),
            expected,
            found: e.dims.clone(),
        });
    }
    Ok(&e.data)
}

/// Reads one layer's kernel, bias and batch-norm statistics without folding.
pub fn load_layer_unfolded(
    layer: &Layer,
    archive: &WeightArchive,
) -> Result<(LayerOp, Option<BatchNormParams>)> {
    let name = &layer.name;
    let c = layer.op.out_channels();
    let kernel = fetch(archive, name, &format!("{name}.weight"), &layer.op.weight_dims())?.to_vec();
    let bias = if layer.has_bias {
        fetch(archive, name, &format!("{name}.bias"), &[c])?.to_vec()
    } else {
        vec![0.0; c]
    };
    let mut op = layer.op.clone();
    match &mut op {
        LayerOp::Conv(p) | LayerOp::Transposed(p) => {
            p.kernel = kernel;
            p.bias = bias;
        }
        LayerOp::Depthwise(p) => {
            p.kernel = kernel;
            p.bias = bias;
        }
    }
    let bn = if layer.batch_norm {
        let get = |s: &str, d: &[usize]| fetch(archive, name, &format!("{name}.bn.{s}"), d).map(<[f32]>::to_vec);
        let eps = get("eps", &[1])?[0];
        Some(BatchNormParams::new(
            get("gamma", &[c])?,
            get("beta", &[c])?,
            get("mean", &[c])?,
            get("var", &[c])?,
            eps,
        )?)
    } else {
        None
    };
    Ok((op, bn))
}

/// Binds `archive` to a copy of `net`, folding every batch norm into its conv.
///
/// Extra entries in the archive are ignored.
pub fn bind_weights(net: &Network, archive: &WeightArchive) -> Result<Network> {
    let missing: Vec<String> = net
        .weight_entries()
        .into_iter()
        .filter(|e| archive.get(&e.name).is_none())
        .map(|e| e.name)
        .collect();
    if !missing.is_empty() {
        return Err(ArchiveError::Missing(missing).into());
    }
    let mut bound = net.clone();
    for layer in bound.layers_mut() {
        let (op, bn) = load_layer_unfolded(layer, archive)?;
        layer.op = match (op, bn) {
            (op, None) => op,
            (LayerOp::Conv(p), Some(bn)) => LayerOp::Conv(fold_batchnorm(&p, &bn)?),
            (LayerOp::Depthwise(p), Some(bn)) => LayerOp::Depthwise(fold_batchnorm_depthwise(&p, &bn)?),
            (LayerOp::Transposed(p), Some(bn)) => LayerOp::Transposed(fold_batchnorm_transposed(&p, &bn)?),
        };
    }
    bound.bound = true;
    Ok(bound)
}

/// Reference forward pass that applies every batch norm separately instead of
/// folding it. `net` only supplies the topology; its own weights are ignored.
pub fn forward_unfolded(net: &Network, archive: &WeightArchive, image: &Tensor, exec: Exec) -> Result<Tensor> {
    let s = net.input_size();
    if image.shape() != Shape::new(1, s, s, 3) {
        return Err(Error::usage(format!(
            "network expects input 1x{s}x{s}x3, got {}",
            image.shape()
        )));
    }
    let mut x = image.clone();
    for stage in &net.stages {
        let skip = stage.residual.then(|| x.clone());
        for layer in &stage.layers {
            let (op, bn) = load_layer_unfolded(layer, archive)?;
            x = op.apply(&x, exec)?;
            if let Some(bn) = bn {
                x = batch_norm(&x, &bn)?;
            }
            if layer.activation == Activation::Relu6 {
                relu6_in_place(&mut x);
            }
        }
        if let Some(skip) = skip {
            x = x.add(&skip)?;
        }
    }
    Ok(x)
}

/// A complete archive for `net` with seeded random values: uniform kernels scaled
/// by fan-in and mildly perturbed batch-norm statistics.
pub fn random_archive(net: &Network, seed: u64) -> WeightArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in: std::collections::HashMap<&str, usize> = net
        .layers()
        .map(|l| {
            // Inputs feeding one output element.
            let f = match &l.op {
                LayerOp::Conv(p) => p.shape.kh * p.shape.kw * p.shape.c_in,
                LayerOp::Depthwise(p) => p.kh * p.kw,
                LayerOp::Transposed(p) => (p.shape.kh / p.stride) * (p.shape.kw / p.stride) * p.shape.c_in,
            };
            (l.name.as_str(), f)
        })
        .collect();
    let mut archive = WeightArchive::new();
    for spec in net.weight_entries() {
        let n: usize = spec.dims.iter().product();
        let data: Vec<f32> = match spec.role {
            EntryRole::Weight => {
                let a = (3.0 / fan_in[spec.layer.as_str()].max(1) as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            EntryRole::Bias => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            EntryRole::BnGamma => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            EntryRole::BnBeta => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            EntryRole::BnMean => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            EntryRole::BnVar => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            EntryRole::BnEps => vec![1e-3],
        };
        archive
            .insert(spec.name, ArchiveEntry::new(to_u32(&spec.dims), data))
            .expect("entry names are unique");
    }
    archive
}
