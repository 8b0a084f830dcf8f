use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::types::{ClassProvenance, DatasetManifest, ZeroShotClassifier};

pub const CLASSIFIER_FORMAT: &str = "mizero-classifier/1";

/// Row-norm slack accepted when reading a classifier back from disk.
const READ_UNIT_TOLERANCE: f64 = 1e-4;

/// Exact-string lookup from prompt text to its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable<T> {
    entries: IndexMap<String, Vec<T>>,
    dim: usize,
}

impl<T: Scalar> TextEmbeddingTable<T> {
    pub fn new(dim: usize) -> Self {
        Self { entries: IndexMap::new(), dim }
    }

    /// Inserts a record. Re-inserting an identical vector is a no-op.
    pub fn insert(&mut self, text: impl Into<String>, embedding: Vec<T>) -> Result<()> {
        let text = text.into();
        if embedding.len() != self.dim {
            return Err(Error::RaggedDimensions {
                line: self.entries.len() + 1,
                expected: self.dim,
                found: embedding.len(),
            });
        }
        if let Some((col, _)) = embedding.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFinite { row: self.entries.len(), col });
        }
        match self.entries.get(&text) {
            Some(existing) if *existing == embedding => Ok(()),
            Some(_) => Err(Error::DuplicateText(text)),
            None => {
                self.entries.insert(text, embedding);
                Ok(())
            }
        }
    }

    pub fn get(&self, text: &str) -> Option<&[T]> {
        self.entries.get(text).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[derive(Serialize, Deserialize)]
struct TextRecord<V> {
    text: String,
    embedding: Vec<V>,
}

pub fn parse_text_table(src: &str) -> Result<TextEmbeddingTable<f32>> {
    let mut table: Option<TextEmbeddingTable<f32>> = None;
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord<f32> = serde_json::from_str(line)
            .map_err(|e| Error::InvalidData(format!("line {}: {e}", i + 1)))?;
        let t = table.get_or_insert_with(|| TextEmbeddingTable::new(rec.embedding.len()));
        if rec.embedding.len() != t.dim {
            return Err(Error::RaggedDimensions {
                line: i + 1,
                expected: t.dim,
                found: rec.embedding.len(),
            });
        }
        t.insert(rec.text, rec.embedding)?;
    }
    table.ok_or_else(|| Error::InvalidData("text embedding table has no records".into()))
}

pub fn text_table_to_jsonl(table: &TextEmbeddingTable<f32>) -> String {
    let mut out = String::new();
    for (text, emb) in table.iter() {
        let rec = TextRecord { text: text.to_owned(), embedding: emb.to_vec() };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_text_table(path: impl AsRef<Path>) -> Result<TextEmbeddingTable<f32>> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_text_table(&src).map_err(|e| e.in_file(path))
}

pub fn write_text_table(table: &TextEmbeddingTable<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text_table_to_jsonl(table)).map_err(|e| Error::from(e).in_file(path))
}

/// Serialized form of a [`ZeroShotClassifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFile {
    pub format: String,
    pub class_labels: Vec<String>,
    pub provenance: Vec<ClassProvenance>,
    pub trial_seed: Option<u64>,
    pub dim: usize,
    pub weights: Vec<Vec<f32>>,
}

pub fn classifier_to_json(clf: &ZeroShotClassifier<f32>) -> String {
    let file = ClassifierFile {
        format: CLASSIFIER_FORMAT.into(),
        class_labels: clf.class_labels().to_vec(),
        provenance: clf.provenance().to_vec(),
        trial_seed: clf.trial_seed(),
        dim: clf.dim(),
        weights: clf.weights().iter_rows().map(<[f32]>::to_vec).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("classifier serializes");
    s.push('\n');
    s
}

pub fn classifier_from_json(src: &str) -> Result<ZeroShotClassifier<f32>> {
    let file: ClassifierFile = serde_json::from_str(src)?;
    if file.format != CLASSIFIER_FORMAT {
        return Err(Error::InvalidData(format!("unknown classifier format {:?}", file.format)));
    }
    for row in &file.weights {
        if row.len() != file.dim {
            return Err(Error::DimensionMismatch { expected: file.dim, found: row.len() });
        }
    }
    let weights = Matrix::from_rows(&file.weights)?;
    ZeroShotClassifier::with_tolerance(
        file.class_labels,
        weights,
        file.provenance,
        file.trial_seed,
        READ_UNIT_TOLERANCE,
    )
}

pub fn read_classifier(path: impl AsRef<Path>) -> Result<ZeroShotClassifier<f32>> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    classifier_from_json(&src).map_err(|e| e.in_file(path))
}

pub fn write_classifier(clf: &ZeroShotClassifier<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, classifier_to_json(clf)).map_err(|e| Error::from(e).in_file(path))
}

/// Reads a manifest; relative slide paths are resolved against its directory
/// and must exist.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let load = || -> Result<DatasetManifest> {
        let mut m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.slides {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
            if !s.path.is_file() {
                return Err(Error::InvalidData(format!(
                    "slide {:?}: file {} not found",
                    s.slide_id,
                    s.path.display()
                )));
            }
        }
        Ok(m)
    };
    load().map_err(|e| e.in_file(path))
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(manifest)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::from(e).in_file(path))
}
