//! Exact in-process vector store with metadata filtering.
//!
//! Records live in three namespaces. Queries rank every matching record by
//! cosine similarity (descending, ties by ascending id). Writers are
//! serialized through the store's write lock and, when the store is backed by
//! a directory, appended to one JSON Lines log per namespace. Logs are
//! compacted when the store is opened.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::EmbeddingVector;
use crate::scalar::{total_cmp, Scalar};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector has dimension {got}, index expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown namespace `{0}`")]
    UnknownNamespace(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("index log record: {0}")]
    Log(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Templates,
    Concepts,
    Sessions,
}

impl Namespace {
    pub const ALL: [Namespace; 3] = [Namespace::Templates, Namespace::Concepts, Namespace::Sessions];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Templates => "templates",
            Namespace::Concepts => "concepts",
            Namespace::Sessions => "sessions",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Namespace {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Namespace::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| IndexError::UnknownNamespace(s.to_string()))
    }
}

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct VectorRecord<S: Scalar> {
    pub id: String,
    pub namespace: Namespace,
    pub vector: EmbeddingVector<S>,
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default)]
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct QueryHit<S: Scalar> {
    pub record_id: String,
    pub similarity: S,
    pub payload: String,
    pub metadata: Metadata,
}

/// Conjunction of `key == value` constraints. The empty filter matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetadataFilter {
    pub equals: BTreeMap<String, String>,
}

impl MetadataFilter {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn eq(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.equals.insert(key.into(), value.into());
        self
    }

    pub fn matches(&self, meta: &Metadata) -> bool {
        self.equals.iter().all(|(k, v)| meta.get(k) == Some(v))
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (x, y) in a.iter().zip(b) {
        dot = dot + *x * *y;
        na = na + *x * *x;
        nb = nb + *y * *y;
    }
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

type Shard<S> = HashMap<String, VectorRecord<S>>;

pub struct VectorStore<S: Scalar> {
    dim: usize,
    shards: RwLock<BTreeMap<Namespace, Shard<S>>>,
    log: Option<Mutex<LogFiles>>,
}

struct LogFiles {
    files: BTreeMap<Namespace, File>,
}

impl<S: Scalar> fmt::Debug for VectorStore<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shards = self.shards.read();
        f.debug_struct("VectorStore")
            .field("dim", &self.dim)
            .field("records", &shards.values().map(HashMap::len).sum::<usize>())
            .field("persistent", &self.log.is_some())
            .finish()
    }
}

fn log_path(dir: &Path, ns: Namespace) -> PathBuf {
    dir.join(format!("{ns}.jsonl"))
}

impl<S: Scalar> VectorStore<S> {
    /// In-memory store.
    pub fn new(dim: usize) -> Self {
        let shards = Namespace::ALL.into_iter().map(|n| (n, HashMap::new())).collect();
        Self { dim, shards: RwLock::new(shards), log: None }
    }

    /// Store backed by per-namespace append-only logs in `dir`. Existing logs
    /// are replayed (last write wins) and compacted before new writes.
    pub fn open(dir: impl AsRef<Path>, dim: usize) -> Result<Self, IndexError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut shards = BTreeMap::new();
        let mut files = BTreeMap::new();
        for ns in Namespace::ALL {
            let path = log_path(dir, ns);
            let mut shard: Shard<S> = HashMap::new();
            if path.exists() {
                let reader = BufReader::new(File::open(&path)?);
                for (n, line) in reader.lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: VectorRecord<S> = match serde_json::from_str(&line) {
                        Ok(r) => r,
                        Err(e) => {
                            // A torn final line from an interrupted append is dropped.
                            tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping bad index log line");
                            continue;
                        }
                    };
                    if rec.vector.dim() != dim {
                        return Err(IndexError::DimMismatch { expected: dim, got: rec.vector.dim() });
                    }
                    shard.insert(rec.id.clone(), rec);
                }
            }
            let tmp = path.with_extension("jsonl.tmp");
            {
                let mut out = File::create(&tmp)?;
                let mut ids: Vec<&String> = shard.keys().collect();
                ids.sort();
                for id in ids {
                    serde_json::to_writer(&mut out, &shard[id])?;
                    out.write_all(b"\n")?;
                }
                out.sync_all()?;
            }
            fs::rename(&tmp, &path)?;
            files.insert(ns, OpenOptions::new().append(true).open(&path)?);
            shards.insert(ns, shard);
        }
        Ok(Self {
            dim,
            shards: RwLock::new(shards),
            log: Some(Mutex::new(LogFiles { files })),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upsert(&self, record: VectorRecord<S>) -> Result<(), IndexError> {
        if record.vector.dim() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: record.vector.dim() });
        }
        let mut shards = self.shards.write();
        if let Some(log) = &self.log {
            let mut log = log.lock();
            let file = log.files.get_mut(&record.namespace).expect("log per namespace");
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        shards
            .get_mut(&record.namespace)
            .expect("shard per namespace")
            .insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, ns: Namespace, id: &str) -> Option<VectorRecord<S>> {
        self.shards.read().get(&ns).and_then(|s| s.get(id)).cloned()
    }

    pub fn len(&self, ns: Namespace) -> usize {
        self.shards.read().get(&ns).map_or(0, HashMap::len)
    }

    pub fn is_empty(&self, ns: Namespace) -> bool {
        self.len(ns) == 0
    }

    /// Snapshot of every record in a namespace, ordered by id.
    pub fn records(&self, ns: Namespace) -> Vec<VectorRecord<S>> {
        let shards = self.shards.read();
        let mut out: Vec<_> = shards.get(&ns).map(|s| s.values().cloned().collect()).unwrap_or_default();
        out.sort_by(|a: &VectorRecord<S>, b| a.id.cmp(&b.id));
        out
    }

    /// Top-`k` records in `ns` passing `filter`, by cosine similarity.
    pub fn query(
        &self,
        ns: Namespace,
        query: &EmbeddingVector<S>,
        k: usize,
        filter: &MetadataFilter,
    ) -> Result<Vec<QueryHit<S>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: query.dim() });
        }
        let shards = self.shards.read();
        let Some(shard) = shards.get(&ns) else {
            return Ok(Vec::new());
        };
        let mut scored: Vec<(S, &VectorRecord<S>)> = shard
            .values()
            .filter(|r| filter.matches(&r.metadata))
            .map(|r| (cosine(&query.values, &r.vector.values), r))
            .collect();
        scored.sort_by(|(sa, ra), (sb, rb)| total_cmp(sb, sa).then_with(|| ra.id.cmp(&rb.id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(similarity, r)| QueryHit {
                record_id: r.id.clone(),
                similarity,
                payload: r.payload.clone(),
                metadata: r.metadata.clone(),
            })
            .collect())
    }

    /// Query by namespace name.
    pub fn query_named(
        &self,
        ns: &str,
        query: &EmbeddingVector<S>,
        k: usize,
        filter: &MetadataFilter,
    ) -> Result<Vec<QueryHit<S>>, IndexError> {
        self.query(ns.parse()?, query, k, filter)
    }
}
