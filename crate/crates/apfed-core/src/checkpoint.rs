//! Model checkpoints.
//!
//! A checkpoint is a flat container: string metadata plus named tensors.
//! Layout: `APFC` magic, version byte, metadata block (`key=value` lines,
//! UTF-8, length-prefixed), tensor count, a directory of (name, blob length)
//! entries, then the tensor blobs in directory order. Tensors reuse the wire
//! encoding so the two codecs cannot drift apart.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::nn::{Activation, Mlp, MlpSpec};
use crate::protocol::message::{decode_tensor, encode_tensor, Reader, WireError};
use crate::tape::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"APFC";
const VERSION: u8 = 1;

/// Caps a single metadata block or tensor directory at something sane so a
/// corrupt length prefix cannot ask for gigabytes.
const MAX_META: u32 = 1 << 20;
const MAX_ENTRIES: u32 = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor blob: {0}")]
    Wire(#[from] WireError),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("checkpoint has no metadata key {0:?}")]
    MissingMeta(String),
    #[error("metadata key {key:?} holds {value:?}: {detail}")]
    BadMeta {
        key: String,
        value: String,
        detail: String,
    },
}

/// In-memory checkpoint. Both maps are ordered so serialization is
/// deterministic: identical contents produce identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'), "key {key:?}");
        debug_assert!(!value.contains('\n'), "value {value:?}");
        self.meta.insert(key, value);
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.meta(key)?;
        raw.parse().map_err(|e: T::Err| CheckpointError::BadMeta {
            key: key.to_string(),
            value: raw.to_string(),
            detail: e.to_string(),
        })
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut blobs: Vec<(&str, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let mut blob = Vec::new();
            encode_tensor(&mut blob, t);
            blobs.push((name, blob));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, blob) in &blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        }
        for (_, blob) in &blobs {
            out.extend_from_slice(blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |s: &str| CheckpointError::Corrupt(s.to_string());
        let mut r = Reader::new(bytes);
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u8().map_err(|_| corrupt("missing version byte"))?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let meta_len = r.u32().map_err(|_| corrupt("missing metadata length"))?;
        if meta_len > MAX_META {
            return Err(corrupt("metadata block too large"));
        }
        let meta_raw = r
            .take(meta_len as usize)
            .map_err(|_| corrupt("metadata block truncated"))?;
        let meta_str = std::str::from_utf8(meta_raw)
            .map_err(|_| corrupt("metadata is not valid UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_str.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(&format!("metadata line {line:?} has no '='")))?;
            meta.insert(k.to_string(), v.to_string());
        }

        let count = r.u32().map_err(|_| corrupt("missing tensor count"))?;
        if count > MAX_ENTRIES {
            return Err(corrupt("tensor directory too large"));
        }
        let mut directory: Vec<(String, u32)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16().map_err(|_| corrupt("directory truncated"))?;
            let name_raw = r
                .take(name_len as usize)
                .map_err(|_| corrupt("directory truncated"))?;
            let name = std::str::from_utf8(name_raw)
                .map_err(|_| corrupt("tensor name is not valid UTF-8"))?
                .to_string();
            let blob_len = r.u32().map_err(|_| corrupt("directory truncated"))?;
            directory.push((name, blob_len));
        }

        let mut tensors = BTreeMap::new();
        for (name, blob_len) in directory {
            let blob = r
                .take(blob_len as usize)
                .map_err(|_| corrupt(&format!("blob for {name:?} truncated")))?;
            let mut br = Reader::new(blob);
            let t = decode_tensor(&mut br)?;
            if !br.is_empty() {
                return Err(corrupt(&format!("blob for {name:?} has trailing bytes")));
            }
            tensors.insert(name, t);
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after tensor blobs"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

/// Compact text form of an architecture: widths separated by `x`, then `:`
/// and one activation name per layer. `784x256x64:relu,relu` round-trips
/// through [`parse_spec`].
pub fn format_spec(spec: &MlpSpec) -> String {
    let widths: Vec<String> = spec.widths.iter().map(|w| w.to_string()).collect();
    let acts: Vec<&str> = spec.activations.iter().map(|a| a.as_str()).collect();
    format!("{}:{}", widths.join("x"), acts.join(","))
}

pub fn parse_spec(s: &str) -> Result<MlpSpec, CheckpointError> {
    let bad = |detail: &str| CheckpointError::BadMeta {
        key: "spec".to_string(),
        value: s.to_string(),
        detail: detail.to_string(),
    };
    let (widths_raw, acts_raw) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
    let widths = widths_raw
        .split('x')
        .map(|w| w.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad("widths must be integers"))?;
    let activations = acts_raw
        .split(',')
        .map(|a| Activation::parse(a).ok_or_else(|| bad("unknown activation")))
        .collect::<Result<Vec<_>, _>>()?;
    MlpSpec::new(widths, activations).map_err(|e| bad(&e.to_string()))
}

/// Saves one named model: spec under `{name}.spec`, layer parameters under
/// `{name}.l{i}.w` / `{name}.l{i}.b`. The model's original store prefix does
/// not leak into the file.
pub fn add_model(ckpt: &mut Checkpoint, name: &str, mlp: &Mlp, store: &ParamStore<f32>) {
    ckpt.set_meta(format!("{name}.spec"), format_spec(&mlp.spec));
    for (l, pair) in mlp.param_ids().chunks(2).enumerate() {
        ckpt.insert_tensor(format!("{name}.l{l}.w"), store.value(pair[0]).clone());
        ckpt.insert_tensor(format!("{name}.l{l}.b"), store.value(pair[1]).clone());
    }
}

/// Restores a model saved by [`add_model`] into a fresh store whose
/// parameters carry `prefix`.
pub fn load_model(
    ckpt: &Checkpoint,
    name: &str,
    prefix: &str,
) -> Result<(Mlp, ParamStore<f32>), CheckpointError> {
    let spec = parse_spec(ckpt.meta(&format!("{name}.spec"))?)?;
    let mut store = ParamStore::new();
    for l in 0..spec.widths.len() - 1 {
        for part in ["w", "b"] {
            let t = ckpt.tensor(&format!("{name}.l{l}.{part}"))?;
            store.add(format!("{prefix}.l{l}.{part}"), t.clone());
        }
    }
    let mlp =
        Mlp::bind(&store, spec, prefix).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok((mlp, store))
}
