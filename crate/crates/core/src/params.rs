//! Named parameter collections and the binary checkpoint container.
//!
//! A checkpoint is a single-line JSON header, a `\n`, then every tensor's
//! values as little-endian `f32` in header order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// An ordered set of uniquely named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(Tensor::cast).collect()
    }

    /// Structural equality of names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Loads parameter values into a graph as trainable leaves, in set order.
pub fn bind<T: Scalar>(graph: &mut Graph<T>, values: &[Tensor<T>]) -> Vec<Var> {
    values.iter().map(|v| graph.param(v.clone())).collect()
}

/// Builds a [`ParamSet`] in declaration order, drawing weights from one stream.
pub struct Initializer<'a> {
    pub set: ParamSet,
    rng: &'a mut Stream,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: &'a mut Stream) -> Self {
        Initializer {
            set: ParamSet::new(),
            rng,
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.set.push(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.set.push(name, Tensor::zeros(shape))
    }

    /// A `3×3` (or `k×k`) convolution: weight uniform by fan-in, bias zero.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?;
        self.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(())
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[out, inp], inp)?;
        if bias {
            self.zeros(&format!("{name}.bias"), &[out])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes a checkpoint to bytes. `offset` counts `f32` values from the
/// start of the payload.
pub fn encode_checkpoint(kind: &str, config: &serde_json::Value, params: &ParamSet) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config: config.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::parse("checkpoint header", e))?;
    out.push(b'\n');
    out.reserve(offset * 4);
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes, returning `(kind, config, params)`.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, serde_json::Value, ParamSet)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse("checkpoint", "missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::parse("checkpoint header", e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::parse("checkpoint", format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[split + 1..];
    if payload.len() % 4 != 0 {
        return Err(Error::parse("checkpoint", "payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamSet::new();
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::parse("checkpoint", format!("tensor {} has a bad offset", e.name)));
        }
        expected += n;
        params
            .push(e.name, Tensor::new(&e.shape, values[e.offset..e.offset + n].to_vec())?)
            .map_err(|err| Error::parse("checkpoint", err))?;
    }
    if expected != values.len() {
        return Err(Error::parse("checkpoint", format!("{} trailing values", values.len() - expected)));
    }
    Ok((header.kind, header.config, params))
}

pub fn save_checkpoint(path: &Path, kind: &str, config: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let bytes = encode_checkpoint(kind, config, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::storage(path, e))
}

/// Loads a checkpoint and checks its kind.
pub fn load_checkpoint(path: &Path, kind: &str) -> Result<(serde_json::Value, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let (found, config, params) = decode_checkpoint(&bytes)?;
    if found != kind {
        return Err(Error::Config(format!(
            "{} holds a {found} checkpoint, expected {kind}",
            path.display()
        )));
    }
    Ok((config, params))
}
