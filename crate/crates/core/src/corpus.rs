//! Notes, labels, symptom catalogs and the fine-tuning sample pool.
//!
//! Notes arrive as line-delimited JSON (`id`, `text`, `symptom`, `label`,
//! `split`). Labels are integers on disk and [`SymptomLabel`] in memory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vecstore::{CrPair, VectorStore};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate note id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown symptom `{symptom}`")]
    UnknownSymptom { line: usize, symptom: String },
    #[error("line {line}: label out of range: {value}")]
    LabelOutOfRange { line: usize, value: i64 },
    #[error("line {line}: note text is empty")]
    EmptyText { line: usize },
    #[error("invalid symptom catalog: {0}")]
    Catalog(String),
}

/// Ground-truth or predicted label for one note and one symptom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymptomLabel {
    Absent,
    Unknown,
    Present,
}

impl SymptomLabel {
    pub const ALL: [SymptomLabel; 3] = [Self::Absent, Self::Unknown, Self::Present];

    pub fn as_int(self) -> i8 {
        match self {
            Self::Absent => -1,
            Self::Unknown => 0,
            Self::Present => 1,
        }
    }

    pub fn from_int(value: i64) -> Option<Self> {
        match value {
            -1 => Some(Self::Absent),
            0 => Some(Self::Unknown),
            1 => Some(Self::Present),
            _ => None,
        }
    }

    /// The answer word the student is asked to produce.
    pub fn as_word(self) -> &'static str {
        match self {
            Self::Absent => "no",
            Self::Unknown => "idk",
            Self::Present => "yes",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word.trim().to_ascii_lowercase().as_str() {
            "no" => Some(Self::Absent),
            "idk" => Some(Self::Unknown),
            "yes" => Some(Self::Present),
            _ => None,
        }
    }

    /// Position in confusion-matrix order (-1, 0, 1).
    pub fn index(self) -> usize {
        (self.as_int() + 1) as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Absent => "absent",
            Self::Unknown => "unknown",
            Self::Present => "present",
        }
    }
}

impl fmt::Display for SymptomLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_word())
    }
}

impl FromStr for SymptomLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_word(s).ok_or_else(|| format!("not a label word: `{s}`"))
    }
}

impl Serialize for SymptomLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_i8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for SymptomLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = i64::deserialize(deserializer)?;
        Self::from_int(value)
            .ok_or_else(|| serde::de::Error::custom(format!("label out of range: {value}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub id: String,
    pub text: String,
    pub symptom: String,
    #[serde(rename = "label")]
    pub truth: SymptomLabel,
    pub split: Split,
}

/// Ordered list of the symptom names a dataset may reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct SymptomCatalog {
    names: Vec<String>,
}

pub const DEFAULT_SYMPTOMS: [&str; 12] = [
    "Cystitis",
    "Dysuria",
    "Erectile Dysfunction",
    "Hematuria",
    "Incontinence",
    "Nocturia",
    "Proctitis",
    "Rectal Bleeding",
    "Stricture",
    "Urgency",
    "Urinary Obstruction",
    "Urothelial Carcinoma",
];

impl SymptomCatalog {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(CorpusError::Catalog("empty symptom name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::Catalog(format!("duplicate symptom `{name}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for SymptomCatalog {
    fn default() -> Self {
        Self {
            names: DEFAULT_SYMPTOMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for SymptomCatalog {
    type Error = CorpusError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<SymptomCatalog> for Vec<String> {
    fn from(catalog: SymptomCatalog) -> Self {
        catalog.names
    }
}

/// One prediction for one note, as parsed from a student reply.
///
/// `predicted` is `None` when the reply could not be parsed; such
/// predictions are still scored (always as wrong).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub note_id: String,
    pub predicted: Option<SymptomLabel>,
    pub reasoning: String,
    pub raw_output: String,
}

#[derive(Debug, Deserialize)]
struct RawNote {
    id: String,
    text: String,
    symptom: String,
    label: i64,
    split: Split,
}

/// Validated, immutable set of notes in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    notes: Vec<ClinicalNote>,
}

impl Dataset {
    pub fn from_notes(
        notes: Vec<ClinicalNote>,
        catalog: &SymptomCatalog,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, note) in notes.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(note.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line,
                    id: note.id.clone(),
                });
            }
            if note.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { line });
            }
            if !catalog.contains(&note.symptom) {
                return Err(CorpusError::UnknownSymptom {
                    line,
                    symptom: note.symptom.clone(),
                });
            }
        }
        Ok(Self { notes })
    }

    pub fn parse_jsonl<R: BufRead>(
        reader: R,
        catalog: &SymptomCatalog,
    ) -> Result<Self, CorpusError> {
        let mut notes = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CorpusError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawNote =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let truth = SymptomLabel::from_int(raw.label).ok_or(CorpusError::LabelOutOfRange {
                line: line_no,
                value: raw.label,
            })?;
            if !catalog.contains(&raw.symptom) {
                return Err(CorpusError::UnknownSymptom {
                    line: line_no,
                    symptom: raw.symptom,
                });
            }
            if raw.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { line: line_no });
            }
            if !seen.insert(raw.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line: line_no,
                    id: raw.id,
                });
            }
            notes.push(ClinicalNote {
                id: raw.id,
                text: raw.text,
                symptom: raw.symptom,
                truth,
                split: raw.split,
            });
        }
        Ok(Self { notes })
    }

    /// Canonical line-delimited JSON, one note per line in dataset order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            out.push_str(&serde_json::to_string(note).expect("note serializes"));
            out.push('\n');
        }
        out
    }

    pub fn notes(&self) -> &[ClinicalNote] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ClinicalNote> {
        self.notes.iter().find(|n| n.id == id)
    }

    pub fn select(&self, symptom: &str, split: Split) -> Vec<&ClinicalNote> {
        self.notes
            .iter()
            .filter(|n| n.symptom == symptom && n.split == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&ClinicalNote> {
        self.notes.iter().filter(|n| n.split == split).collect()
    }

    /// Notes grouped by symptom, then split, in file order inside each group.
    pub fn grouped(&self) -> BTreeMap<&str, (Vec<&ClinicalNote>, Vec<&ClinicalNote>)> {
        let mut groups: BTreeMap<&str, (Vec<&ClinicalNote>, Vec<&ClinicalNote>)> =
            BTreeMap::new();
        for note in &self.notes {
            let entry = groups.entry(note.symptom.as_str()).or_default();
            match note.split {
                Split::Train => entry.0.push(note),
                Split::Test => entry.1.push(note),
            }
        }
        groups
    }
}

pub fn load_dataset(path: &Path, catalog: &SymptomCatalog) -> Result<Dataset, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::parse_jsonl(BufReader::new(file), catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitShapeRow {
    pub symptom: String,
    pub expected: SplitCounts,
    pub actual: SplitCounts,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitShapeReport {
    pub rows: Vec<SplitShapeRow>,
}

impl SplitShapeReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, symptom: &str) -> Option<&SplitShapeRow> {
        self.rows.iter().find(|r| r.symptom == symptom)
    }
}

/// Per-symptom train/test counts of the reference cohort: 20/5 everywhere
/// except Urothelial Carcinoma at 15/4.
pub fn reference_split_shape(catalog: &SymptomCatalog) -> BTreeMap<String, SplitCounts> {
    catalog
        .names()
        .iter()
        .map(|name| {
            let counts = if name == "Urothelial Carcinoma" {
                SplitCounts { train: 15, test: 4 }
            } else {
                SplitCounts { train: 20, test: 5 }
            };
            (name.clone(), counts)
        })
        .collect()
}

/// Compares per-symptom split sizes against expectations. Advisory only.
pub fn validate_split_shape(
    dataset: &Dataset,
    expected: &BTreeMap<String, SplitCounts>,
) -> SplitShapeReport {
    let rows = expected
        .iter()
        .map(|(symptom, &expected)| {
            let actual = SplitCounts {
                train: dataset.select(symptom, Split::Train).len(),
                test: dataset.select(symptom, Split::Test).len(),
            };
            SplitShapeRow {
                symptom: symptom.clone(),
                expected,
                actual,
                pass: actual == expected,
            }
        })
        .collect();
    SplitShapeReport { rows }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmluRecord {
    pub index: u64,
    pub question: String,
    pub answer: String,
    pub category: String,
}

pub fn parse_mmlu<R: BufRead>(reader: R) -> Result<Vec<MmluRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MmluRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_mmlu(path: &Path) -> Result<Vec<MmluRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_mmlu(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MmluClinical,
    ContextReasoning,
}

/// A context-reasoning pair plus the note it was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrRecord {
    pub pair: CrPair,
    pub symptom: String,
    pub note_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PoolItem {
    Mmlu(MmluRecord),
    ContextReasoning(CrRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    /// Index in the pool-wide numbering the teacher selects from.
    pub index: usize,
    /// Index inside the entry's own sub-pool.
    pub local_index: usize,
    pub item: PoolItem,
}

impl PoolEntry {
    pub fn provenance(&self) -> Provenance {
        match self.item {
            PoolItem::Mmlu(_) => Provenance::MmluClinical,
            PoolItem::ContextReasoning(_) => Provenance::ContextReasoning,
        }
    }
}

/// Snapshot of fine-tuning candidates: MMLU records first, then every
/// context-reasoning pair in the store in note-id order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FineTunePool {
    entries: Vec<PoolEntry>,
}

impl FineTunePool {
    pub fn new(mmlu: Vec<MmluRecord>, store: &VectorStore) -> Self {
        let mut entries = Vec::new();
        for (local_index, record) in mmlu.into_iter().enumerate() {
            entries.push(PoolEntry {
                index: entries.len(),
                local_index,
                item: PoolItem::Mmlu(record),
            });
        }
        let pairs = store.entries().filter_map(|entry| {
            entry.cr.as_ref().map(|pair| CrRecord {
                pair: pair.clone(),
                symptom: entry.symptom.clone(),
                note_text: entry.text.clone(),
            })
        });
        for (local_index, record) in pairs.enumerate() {
            entries.push(PoolEntry {
                index: entries.len(),
                local_index,
                item: PoolItem::ContextReasoning(record),
            });
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&PoolEntry> {
        self.entries.get(index)
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance() == provenance)
            .count()
    }
}

pub fn load_finetune_pool(
    mmlu_path: &Path,
    store: &VectorStore,
) -> Result<FineTunePool, CorpusError> {
    Ok(FineTunePool::new(load_mmlu(mmlu_path)?, store))
}
