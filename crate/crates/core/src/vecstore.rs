//! Note embeddings with context-reasoning metadata and exact k-NN search.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ClinicalNote, SymptomLabel};

pub const DEFAULT_DIMENSION: usize = 768;
pub const STORE_FORMAT: &str = "symrefine-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum VecStoreError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unknown note id `{0}`")]
    UnknownNote(String),
    #[error("duplicate note id `{0}`")]
    DuplicateNote(String),
    #[error("context-reasoning pair for `{0}` has empty context or reasoning")]
    EmptyPair(String),
    #[error("embedding failed for note `{note_id}`: {reason}")]
    Provider { note_id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VecStoreError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VecStoreError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VecStoreError> {
    if a.dimension() != b.dimension() {
        return Err(VecStoreError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(VecStoreError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Teacher-extracted evidence for a note's ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrPair {
    pub note_id: String,
    pub context: String,
    pub reasoning: String,
    pub label: SymptomLabel,
    /// False when `context` does not occur verbatim in the note text.
    #[serde(default = "default_true")]
    pub verbatim: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub note_id: String,
    pub symptom: String,
    pub text: String,
    pub vector: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr: Option<CrPair>,
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, String>;
}

/// Deterministic offline embedder.
///
/// Each lowercase alphanumeric token maps to a pseudo-random vector seeded
/// from `sha256(seed, token)`; a text embeds to the normalized sum of its
/// token vectors, so texts sharing vocabulary land near each other.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, seed }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        for slot in acc.iter_mut() {
            *slot += rng.gen_range(-1.0..1.0);
        }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, String> {
        let mut acc = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        let mut any = false;
        for token in lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            self.token_vector(token, &mut acc);
            any = true;
        }
        if !any {
            self.token_vector(&format!("\u{0}{text}"), &mut acc);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err("degenerate embedding".into());
        }
        acc.iter_mut().for_each(|v| *v /= norm);
        EmbeddingVector::new(acc).map_err(|e| e.to_string())
    }
}

/// Embedding endpoint: `POST {"text": ...}` returning `{"vector": [...]}`.
pub struct HttpEmbedder {
    url: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dimension: usize, timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            url: url.into(),
            dimension,
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbedReply {
    vector: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, String> {
        let reply: EmbedReply = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "text": text }))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())?;
        if reply.vector.len() != self.dimension {
            return Err(format!(
                "endpoint returned dimension {}, expected {}",
                reply.vector.len(),
                self.dimension
            ));
        }
        EmbeddingVector::new(reply.vector).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttachOutcome {
    Attached,
    /// A pair was already present; it has been replaced and is returned.
    Replaced(CrPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub note_id: String,
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    dimension: usize,
    count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dimension: usize,
    entries: BTreeMap<String, StoreEntry>,
}

impl VectorStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, note_id: &str) -> Option<&StoreEntry> {
        self.entries.get(note_id)
    }

    /// Entries in ascending note-id order.
    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries.values()
    }

    pub fn insert(&mut self, entry: StoreEntry) -> Result<(), VecStoreError> {
        if entry.vector.dimension() != self.dimension {
            return Err(VecStoreError::DimensionMismatch {
                expected: self.dimension,
                actual: entry.vector.dimension(),
            });
        }
        if self.entries.contains_key(&entry.note_id) {
            return Err(VecStoreError::DuplicateNote(entry.note_id));
        }
        self.entries.insert(entry.note_id.clone(), entry);
        Ok(())
    }

    pub fn attach_cr(&mut self, pair: CrPair) -> Result<AttachOutcome, VecStoreError> {
        if pair.context.trim().is_empty() || pair.reasoning.trim().is_empty() {
            return Err(VecStoreError::EmptyPair(pair.note_id));
        }
        let entry = self
            .entries
            .get_mut(&pair.note_id)
            .ok_or_else(|| VecStoreError::UnknownNote(pair.note_id.clone()))?;
        match entry.cr.replace(pair) {
            None => Ok(AttachOutcome::Attached),
            Some(old) => {
                tracing::warn!(note_id = %old.note_id, "replacing existing context-reasoning pair");
                Ok(AttachOutcome::Replaced(old))
            }
        }
    }

    pub fn pair_count(&self) -> usize {
        self.entries.values().filter(|e| e.cr.is_some()).count()
    }

    /// Top-k entries by descending cosine similarity, ties broken by
    /// ascending note id.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Neighbor>, VecStoreError> {
        self.knn_where(query, k, |_| true)
    }

    /// [`VectorStore::knn`] restricted to entries accepted by `filter`.
    pub fn knn_where<F>(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: F,
    ) -> Result<Vec<Neighbor>, VecStoreError>
    where
        F: Fn(&StoreEntry) -> bool,
    {
        if self.entries.is_empty() {
            return Err(VecStoreError::EmptyStore);
        }
        if k == 0 {
            return Err(VecStoreError::ZeroK);
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for entry in self.entries.values().filter(|e| filter(e)) {
            scored.push(Neighbor {
                note_id: entry.note_id.clone(),
                similarity: cosine(query, &entry.vector)?,
            });
        }
        scored.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.note_id.cmp(&b.note_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = StoreHeader {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            dimension: self.dimension,
            count: self.entries.len(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for entry in self.entries.values() {
            serde_json::to_writer(&mut out, entry).expect("entry serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, VecStoreError> {
        let mut lines = reader.lines().enumerate();
        let format_err = |line: usize, reason: String| VecStoreError::Format { line, reason };
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| format_err(1, "missing header".into()))?;
        let header_line = header_line.map_err(|e| format_err(1, e.to_string()))?;
        let header: StoreHeader =
            serde_json::from_str(&header_line).map_err(|e| format_err(1, e.to_string()))?;
        if header.format != STORE_FORMAT {
            return Err(format_err(1, format!("unexpected format `{}`", header.format)));
        }
        if header.version != STORE_VERSION {
            return Err(format_err(
                1,
                format!("unsupported version {} (expected {STORE_VERSION})", header.version),
            ));
        }
        let mut store = VectorStore::new(header.dimension);
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.map_err(|e| format_err(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry =
                serde_json::from_str(&line).map_err(|e| format_err(line_no, e.to_string()))?;
            store
                .insert(entry)
                .map_err(|e| format_err(line_no, e.to_string()))?;
        }
        if store.len() != header.count {
            return Err(format_err(
                1,
                format!("header count {} but {} entries", header.count, store.len()),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), VecStoreError> {
        let io = |source| VecStoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        file.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, VecStoreError> {
        let file = fs::File::open(path).map_err(|source| VecStoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(BufReader::new(file))
    }
}

/// One entry per note, context-reasoning slots empty.
pub fn build_store<'a, I>(notes: I, provider: &dyn EmbeddingProvider) -> Result<VectorStore, VecStoreError>
where
    I: IntoIterator<Item = &'a ClinicalNote>,
{
    let mut store = VectorStore::new(provider.dimension());
    for note in notes {
        let vector = provider.embed(&note.text).map_err(|reason| VecStoreError::Provider {
            note_id: note.id.clone(),
            reason,
        })?;
        store.insert(StoreEntry {
            note_id: note.id.clone(),
            symptom: note.symptom.clone(),
            text: note.text.clone(),
            vector,
            cr: None,
        })?;
    }
    Ok(store)
}
