//! Named-tensor container used for model, adapter and corpus files.
//!
//! Byte layout:
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"BORATNSR"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   payload: raw little-endian f64 values
//! ```
//!
//! The header is an object with `kind`, `config`, `meta` and `tensors`; each
//! tensor entry holds `name`, `shape`, `offset` (in values from the start of
//! the payload) and `len`. Entries are stored in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{MultiTaskCorpus, Task, Vocab};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, HierarchicalMean, LoraLayer, LowRankParams};
use crate::model::{BaseModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BORATNSR";
pub const VERSION: u32 = 1;

pub const KIND_MODEL: &str = "model";
pub const KIND_ADAPTER: &str = "adapter";
pub const KIND_CORPUS: &str = "corpus";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<Entry>,
}

/// In-memory form of one container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn new(kind: &str, config: Value, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + text.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let n_values = payload.len() / 8;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= n_values);
            let end = end.ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
            let data = payload[e.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(self)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| bad(format!("{what}: {e}")))
}

pub fn model_to_container(model: &BaseModel) -> Container {
    let mut c = Container::new(
        KIND_MODEL,
        serde_json::to_value(model.config()).expect("config serialises"),
        json!({ "frozen": model.is_frozen() }),
    );
    c.tensors = model.params().clone();
    c
}

pub fn model_from_container(c: Container) -> Result<BaseModel> {
    let c = c.expect_kind(KIND_MODEL)?;
    let config: ModelConfig = from_value(c.config, "model config")?;
    let frozen = c.meta.get("frozen").and_then(Value::as_bool).unwrap_or(true);
    BaseModel::from_params(config, c.tensors, frozen)
}

pub fn save_model(path: &Path, model: &BaseModel) -> Result<()> {
    model_to_container(model).write(path)
}

pub fn load_model(path: &Path) -> Result<BaseModel> {
    model_from_container(Container::read(path)?)
}

/// Adapter file contents: factors plus the metadata needed to rebuild them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    /// `None` for the hierarchical mean.
    pub task_id: Option<usize>,
    pub task_name: Option<String>,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

pub fn adapters_to_container<P: LowRankParams + ?Sized>(params: &P, meta: &AdapterMeta) -> Container {
    let mut c = Container::new(
        KIND_ADAPTER,
        Value::Null,
        serde_json::to_value(meta).expect("meta serialises"),
    );
    for (id, l) in params.layers() {
        c.tensors.insert(format!("{id}.A"), l.a.clone());
        c.tensors.insert(format!("{id}.B"), l.b.clone());
    }
    c
}

pub fn save_adapters<P: LowRankParams + ?Sized>(path: &Path, params: &P, meta: &AdapterMeta) -> Result<()> {
    adapters_to_container(params, meta).write(path)
}

/// Reads an adapter file as a task adapter set; a mean file loads with
/// `task_id = usize::MAX`.
pub fn load_adapters(path: &Path) -> Result<(AdapterSet, AdapterMeta)> {
    let mut c = Container::read(path)?.expect_kind(KIND_ADAPTER)?;
    let meta: AdapterMeta = from_value(c.meta.clone(), "adapter metadata")?;
    let ids: Vec<String> = c
        .tensors
        .keys()
        .filter_map(|k| k.strip_suffix(".A").map(str::to_string))
        .collect();
    let mut set = AdapterSet::empty(meta.task_id.unwrap_or(usize::MAX));
    for id in ids {
        let a = c.take(&format!("{id}.A"))?;
        let b = c.take(&format!("{id}.B"))?;
        set.layers.insert(id.clone(), LoraLayer::new(&id, a, b, meta.alpha)?);
    }
    if let Some(extra) = c.tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    if set.layers.values().any(|l| l.rank != meta.rank) {
        return Err(bad("factor shapes disagree with the recorded rank"));
    }
    Ok((set, meta))
}

pub fn load_mean(path: &Path) -> Result<(HierarchicalMean, AdapterMeta)> {
    let (set, meta) = load_adapters(path)?;
    Ok((HierarchicalMean { layers: set.layers }, meta))
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    symbols: String,
    unk: Option<usize>,
    tasks: Vec<(usize, String)>,
}

/// Per task `i`: `tokens.i` (all documents concatenated), `lengths.i`,
/// `train.i` and `test.i` (document indices). Ids are stored as exact
/// small-integer f64 values.
pub fn corpus_to_container(corpus: &MultiTaskCorpus) -> Container {
    let meta = CorpusMeta {
        symbols: corpus.vocab.symbols().iter().collect(),
        unk: corpus.vocab.unk(),
        tasks: corpus.tasks.iter().map(|t| (t.task_id, t.name.clone())).collect(),
    };
    let mut c = Container::new(
        KIND_CORPUS,
        Value::Null,
        serde_json::to_value(meta).expect("meta serialises"),
    );
    let vector = |xs: Vec<f64>| Tensor::new(vec![xs.len()], xs).expect("1-d tensor");
    for (i, t) in corpus.tasks.iter().enumerate() {
        let tokens: Vec<f64> = t.documents.iter().flatten().map(|&x| x as f64).collect();
        let lengths = t.documents.iter().map(|d| d.len() as f64).collect();
        c.tensors.insert(format!("tokens.{i}"), vector(tokens));
        c.tensors.insert(format!("lengths.{i}"), vector(lengths));
        c.tensors.insert(format!("train.{i}"), vector(t.train.iter().map(|&x| x as f64).collect()));
        c.tensors.insert(format!("test.{i}"), vector(t.test.iter().map(|&x| x as f64).collect()));
    }
    c
}

fn as_indices(t: Tensor, name: &str) -> Result<Vec<usize>> {
    t.into_data()
        .into_iter()
        .map(|x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
                Ok(x as usize)
            } else {
                Err(bad(format!("{name} holds a non-index value {x}")))
            }
        })
        .collect()
}

pub fn corpus_from_container(c: Container) -> Result<MultiTaskCorpus> {
    let mut c = c.expect_kind(KIND_CORPUS)?;
    let meta: CorpusMeta = from_value(c.meta.clone(), "corpus metadata")?;
    let vocab = Vocab::from_parts(meta.symbols.chars().collect(), meta.unk)?;
    let mut tasks = Vec::with_capacity(meta.tasks.len());
    for (i, (task_id, name)) in meta.tasks.into_iter().enumerate() {
        let tokens = as_indices(c.take(&format!("tokens.{i}"))?, "tokens")?;
        let lengths = as_indices(c.take(&format!("lengths.{i}"))?, "lengths")?;
        if lengths.iter().sum::<usize>() != tokens.len() {
            return Err(bad(format!("task {name}: lengths do not cover the token stream")));
        }
        let mut documents = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for n in lengths {
            documents.push(tokens[at..at + n].to_vec());
            at += n;
        }
        tasks.push(Task {
            task_id,
            name,
            documents,
            train: as_indices(c.take(&format!("train.{i}"))?, "train")?,
            test: as_indices(c.take(&format!("test.{i}"))?, "test")?,
        });
    }
    let corpus = MultiTaskCorpus { tasks, vocab };
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_corpus(path: &Path, corpus: &MultiTaskCorpus) -> Result<()> {
    corpus_to_container(corpus).write(path)
}

pub fn load_corpus(path: &Path) -> Result<MultiTaskCorpus> {
    corpus_from_container(Container::read(path)?)
}
