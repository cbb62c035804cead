//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a UTF-8 manifest followed by raw data:
//!
//! ```text
//! firedet-checkpoint 1
//! <entry count>
//! <name> <n> <c> <h> <w>      (one line per entry, in store order)
//! <all entries as little-endian f64, concatenated in manifest order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "firedet-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Stored and checkpointed but never touched by gradient steps (running statistics, anchors).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.add(name, ParamKind::Trainable, tensor)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.add(name, ParamKind::Buffer, tensor)
    }

    /// He-normal weight for a conv or dense layer.
    pub fn he_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> ParamId {
        let fan_in = shape.c * shape.h * shape.w;
        let std = (2.0 / fan_in as f64).sqrt();
        self.trainable(name, Tensor::randn(shape, std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.index()].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Serializes every entry, buffers included.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\n{}\n", self.params.len());
        for p in &self.params {
            let s = p.tensor.shape();
            out.push_str(&format!("{} {} {} {} {}\n", p.name, s.n, s.c, s.h, s.w));
        }
        let mut bytes = out.into_bytes();
        for p in &self.params {
            for &v in p.tensor.data() {
                bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        bytes
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_checkpoint_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Overwrites values from a checkpoint whose manifest must match this store exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let entries = parse_checkpoint(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })?;
        self.load_entries(entries).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<f64>)>) -> std::result::Result<(), String> {
        if entries.len() != self.params.len() {
            return Err(format!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                self.params.len()
            ));
        }
        for (p, (name, t)) in self.params.iter().zip(&entries) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(format!(
                    "entry {} {} does not match model parameter {} {}",
                    name,
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                ));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(entries) {
            p.tensor = t.cast();
        }
        Ok(())
    }
}

/// Parses checkpoint bytes into `(name, tensor)` pairs.
pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f64>)>, String> {
    let mut pos = 0;
    let mut next_line = || -> std::result::Result<&str, String> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("truncated manifest")?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|e| format!("manifest is not UTF-8: {e}"))
    };
    if next_line()? != MAGIC {
        return Err("not a firedet checkpoint".into());
    }
    let count: usize = next_line()?
        .trim()
        .parse()
        .map_err(|e| format!("bad entry count: {e}"))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 {
            return Err(format!("bad manifest line {line:?}"));
        }
        let dims: Vec<usize> = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("bad shape in {line:?}: {e}"))?;
        manifest.push((fields[0].to_string(), Shape::new(dims[0], dims[1], dims[2], dims[3])));
    }
    let total: usize = manifest.iter().map(|(_, s)| s.numel()).sum();
    let data = &bytes[pos..];
    if data.len() != total * 8 {
        return Err(format!(
            "data section has {} bytes, manifest needs {}",
            data.len(),
            total * 8
        ));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    manifest
        .into_iter()
        .map(|(name, shape)| {
            let v: Vec<f64> = values.by_ref().take(shape.numel()).collect();
            Ok((name, Tensor::new(shape, v).map_err(|e| e.to_string())?))
        })
        .collect()
}
