//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"AVFSCKPT"`, u32 version, u32 meta length, meta JSON, u32 tensor count,
//! then per tensor: u32 path length, path, u8 dtype code, u32 rank, u64 dims,
//! raw payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AvfsNet;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVFSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: usize,
    pub best_metric: f64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub adam_step: u64,
    pub lr: f64,
    /// Backbone hash of the stage-1 weights this lineage started from.
    pub stage1_backbone_hash: Option<String>,
    pub seed: u64,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("model config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("checkpoint truncated while reading {field}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

fn encode_values<T: Scalar>(t: &Tensor<T>, buf: &mut Vec<u8>) {
    match T::DTYPE {
        DType::F32 => t.data().iter().for_each(|v| buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes())),
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of every parameter, plus Adam moments when given.
    pub fn capture(net: &AvfsNet<T>, opt: Option<&Adam<T>>, mut meta: CheckpointMeta) -> Self {
        let store = &net.store;
        let mut tensors: Vec<(String, Tensor<T>)> =
            store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect();
        if let Some(opt) = opt {
            for id in store.ids() {
                let i = id.index();
                if let (Some(Some(m)), Some(Some(v))) = (opt.m.get(i), opt.v.get(i)) {
                    tensors.push((format!("{ADAM_M}{}", store.name(id)), m.clone()));
                    tensors.push((format!("{ADAM_V}{}", store.name(id)), v.clone()));
                }
            }
            meta.adam_step = opt.step;
            meta.lr = opt.lr;
        }
        meta.config_hash = config_hash(&net.config);
        meta.model = net.config.clone();
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, meta.len() as u32);
        buf.extend_from_slice(&meta);
        put_u32(&mut buf, self.tensors.len() as u32);
        for (path, t) in &self.tensors {
            put_u32(&mut buf, path.len() as u32);
            buf.extend_from_slice(path.as_bytes());
            buf.push(T::DTYPE.code());
            put_u32(&mut buf, t.ndim() as u32);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            encode_values(t, &mut buf);
        }
        Ok(buf)
    }

    /// Parses a container; tensors stored in the other precision are cast.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8, "magic")? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint format version {version}")));
        }
        let meta_len = c.u32("meta length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "meta")?)?;
        let count = c.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let plen = c.u32("path length")? as usize;
            let path = String::from_utf8(c.take(plen, "path")?.to_vec())
                .map_err(|_| Error::Corrupt("tensor path is not UTF-8".into()))?;
            let code = c.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Corrupt(format!("{path}: dtype code {code}")))?;
            let rank = c.u32("rank")? as usize;
            let shape = (0..rank).map(|_| c.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = c.take(n * dtype.size_of(), "payload")?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| {
                        let mut a = [0u8; 8];
                        a.copy_from_slice(b);
                        T::from_f64_lossy(f64::from_le_bytes(a))
                    })
                    .collect(),
            };
            tensors.push((path, Tensor::new(&shape, data)?));
        }
        if c.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored parameters into `store`; every parameter must be
    /// present with a matching shape.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self
                .tensors
                .iter()
                .find(|(p, _)| *p == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::DataMismatch(format!("checkpoint lacks parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore<T>, opt: &mut Adam<T>) {
        let n = store.len();
        opt.m = vec![None; n];
        opt.v = vec![None; n];
        for id in store.ids() {
            let find = |prefix: &str| {
                let key = format!("{prefix}{}", store.name(id));
                self.tensors.iter().find(|(p, _)| *p == key).map(|(_, t)| t.clone())
            };
            opt.m[id.index()] = find(ADAM_M);
            opt.v[id.index()] = find(ADAM_V);
        }
        opt.step = self.meta.adam_step;
        opt.lr = self.meta.lr;
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn build_model(&self) -> Result<AvfsNet<T>> {
        if config_hash(&self.meta.model) != self.meta.config_hash {
            return Err(Error::Corrupt("checkpoint config hash does not match its config".into()));
        }
        let mut net = AvfsNet::new(self.meta.model.clone(), self.meta.seed)?;
        self.restore_params(&mut net.store)?;
        Ok(net)
    }
}
