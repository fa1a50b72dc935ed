//! Parameter checkpoints, little endian:
//!
//! ```text
//! b"AGEFCKPT"
//! u32 version
//! u32 header_len, header_len bytes of JSON {kind, config, meta}
//! u32 tensor_count
//! per tensor:
//!   u32 name_len, name bytes (UTF-8)
//!   u8  kind
//!   u8  rank (always 2), u64 dims[rank]
//!   f32 values, row-major
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{AgeFormer, AgeFormerNet, ModelConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AGEFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const AGEFORMER_KIND: &str = "ageformer";

const KINDS: [ParamKind; 5] = [
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Gain,
    ParamKind::Embedding,
    ParamKind::Buffer,
];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    #[serde(default)]
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Which model family wrote the file.
    pub kind: String,
    pub config: Value,
    /// Free-form training metadata (epoch, accuracy, ...).
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store<C: Serialize>(kind: &str, config: &C, meta: Value, store: &ParamStore<f32>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let tensors = store
            .iter()
            .map(|(_, p)| Tensor {
                name: p.name.clone(),
                kind: p.kind,
                value: p.value.clone(),
            })
            .collect();
        Ok(Checkpoint {
            kind: kind.to_string(),
            config,
            meta,
            tensors,
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    /// Copies every tensor into `store`. The two parameter sets must match by
    /// name, kind and shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor names".into()));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from checkpoint")))?;
            let want = store.get(id).dim();
            if t.value.dim() != want || t.kind != store.kind(id) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': checkpoint has {:?} {:?}, model expects {:?} {:?}",
                    t.kind,
                    t.value.dim(),
                    store.kind(id),
                    want
                )));
            }
        }
        if store.len() != self.tensors.len() {
            let extra: Vec<_> = self.tensors.iter().filter(|t| store.id(&t.name).is_none()).map(|t| t.name.as_str()).collect();
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", extra.join(", "))));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let t = by_name[store.name(id)];
            store.get_mut(id).assign(&t.value);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(&header)?;
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
            for t in &self.tensors {
                w.write_all(&(t.name.len() as u32).to_le_bytes())?;
                w.write_all(t.name.as_bytes())?;
                let k = KINDS.iter().position(|&k| k == t.kind).expect("known kind") as u8;
                w.write_all(&[k, 2])?;
                let (r, c) = t.value.dim();
                w.write_all(&(r as u64).to_le_bytes())?;
                w.write_all(&(c as u64).to_le_bytes())?;
                for v in t.value.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = CkptReader {
            inner: BufReader::new(file),
            name: path.display().to_string(),
        };
        if &r.bytes(8, "magic")?[..] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", r.name)));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("{}: unsupported version {version}", r.name)));
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(&r.bytes(len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("{}: header: {e}", r.name)))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = r.u32(&format!("name of tensor #{i}"))? as usize;
            let name = String::from_utf8(r.bytes(name_len, &format!("name of tensor #{i}"))?)
                .map_err(|_| Error::Checkpoint(format!("{}: tensor #{i} name is not UTF-8", r.name)))?;
            let what = format!("tensor '{name}'");
            let meta = r.bytes(2, &what)?;
            let kind = *KINDS
                .get(meta[0] as usize)
                .ok_or_else(|| Error::Checkpoint(format!("{what}: unknown kind {}", meta[0])))?;
            if meta[1] != 2 {
                return Err(Error::Checkpoint(format!("{what}: rank {} is not supported", meta[1])));
            }
            let rows = r.u64(&what)? as usize;
            let cols = r.u64(&what)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= (1 << 34))
                .ok_or_else(|| Error::Checkpoint(format!("{what}: implausible shape {rows}x{cols}")))?;
            let raw = r.bytes(n * 4, &what)?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(Tensor {
                name,
                kind,
                value: Array2::from_shape_vec((rows, cols), values).expect("shape"),
            });
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }
}

struct CkptReader<R> {
    inner: R,
    name: String,
}

impl<R: Read> CkptReader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(&self.name, e))?;
        if got < n {
            return Err(Error::Checkpoint(format!("{}: {what} truncated ({got} of {n} bytes)", self.name)));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Dotted keys whose values differ between two JSON documents.
pub fn config_differences(a: &Value, b: &Value) -> Vec<String> {
    fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", a, &mut fa);
    flatten("", b, &mut fb);
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "<absent>".into());
            format!("{k}: checkpoint {} vs model {}", show(&fa), show(&fb))
        })
        .collect()
}

impl AgeFormer {
    pub fn checkpoint(&self, meta: Value) -> Result<Checkpoint> {
        Checkpoint::from_store(AGEFORMER_KIND, self.config(), meta, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint(Value::Null)?.write(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != AGEFORMER_KIND {
            return Err(Error::Checkpoint(format!("expected a '{AGEFORMER_KIND}' checkpoint, found '{}'", ckpt.kind)));
        }
        let cfg: ModelConfig = ckpt.config_as()?;
        let mut store = ParamStore::new();
        let net = AgeFormerNet::register(&cfg, &mut store, 0)?;
        ckpt.load_into(&mut store)?;
        Ok(AgeFormer { net, store })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads a checkpoint that must have been written with `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let want = serde_json::to_value(expected).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let diff = config_differences(&ckpt.config, &want);
        if !diff.is_empty() {
            return Err(Error::Config(format!("checkpoint does not match the model: {}", diff.join("; "))));
        }
        Self::from_checkpoint(&ckpt)
    }
}
