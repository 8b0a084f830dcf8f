//! Domain types shared across the pipeline, and the single normalization
//! point for embeddings.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{norm_f64, Scalar};

/// Norms below this are treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;
/// Allowed deviation of a classifier row norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;
/// Slack on cosine scores outside `[-1, 1]`.
pub const SCORE_EPSILON: f64 = 1e-5;

/// Scales `v` to unit L2 norm.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let norm = norm_f64(v);
    if norm.is_nan() || norm < ZERO_NORM {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.iter().map(|&x| T::from_f64_rounded(x.to_f64_lossless() / norm)).collect())
}

/// Same as [`normalize`] but stays in `f64`.
pub fn normalize_f64(v: &[f64]) -> Result<Vec<f64>> {
    normalize(v)
}

/// One whole-slide image as a bag of patch embeddings.
///
/// `embeddings` hold the values exactly as stored; the reciprocal row norms
/// are computed once here, so every consumer sees unit rows without the
/// stored payload being rewritten.
#[derive(Debug, Clone)]
pub struct SlideBag<T> {
    slide_id: String,
    embeddings: Matrix<T>,
    inv_norms: Vec<f64>,
    coords: Option<Vec<[i32; 2]>>,
    label: Option<usize>,
}

impl<T: Scalar> SlideBag<T> {
    pub fn new(
        slide_id: impl Into<String>,
        embeddings: Matrix<T>,
        coords: Option<Vec<[i32; 2]>>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        let (n, d) = (embeddings.rows(), embeddings.cols());
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!("bag {slide_id:?} has shape {n}x{d}")));
        }
        if let Some((row, col)) = embeddings.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: c.len() });
            }
        }
        let inv_norms = embeddings
            .iter_rows()
            .map(|r| {
                let norm = norm_f64(r);
                if norm < ZERO_NORM {
                    Err(Error::ZeroVector { norm })
                } else {
                    Ok(1.0 / norm)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slide_id, embeddings, inv_norms, coords, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Stored (possibly unnormalized) embeddings.
    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    /// `1 / ||x_i||` per patch.
    pub fn inv_norms(&self) -> &[f64] {
        &self.inv_norms
    }

    pub fn coords(&self) -> Option<&[[i32; 2]]> {
        self.coords.as_deref()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Unit-norm copy of patch `i`, in `f64`.
    pub fn unit_row(&self, i: usize) -> Vec<f64> {
        let s = self.inv_norms[i];
        self.embeddings.row(i).iter().map(|&x| x.to_f64_lossless() * s).collect()
    }

    /// Bag with rows reordered so that output row `k` is input row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let coords = self.coords.as_ref().map(|c| perm.iter().map(|&i| c[i]).collect());
        let mut bag = Self::new(self.slide_id.clone(), self.embeddings.select_rows(perm), coords)?;
        bag.label = self.label;
        Ok(bag)
    }
}

/// Origin of one classifier row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassProvenance {
    pub classnames: Vec<String>,
    pub templates: Vec<String>,
}

/// Prompt-embedding classifier: one unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier<T> {
    class_labels: Vec<String>,
    weights: Matrix<T>,
    provenance: Vec<ClassProvenance>,
    trial_seed: Option<u64>,
}

impl<T: Scalar> ZeroShotClassifier<T> {
    pub fn new(
        class_labels: Vec<String>,
        weights: Matrix<T>,
        provenance: Vec<ClassProvenance>,
        trial_seed: Option<u64>,
    ) -> Result<Self> {
        Self::with_tolerance(class_labels, weights, provenance, trial_seed, UNIT_TOLERANCE)
    }

    /// Like [`ZeroShotClassifier::new`] with a custom unit-norm tolerance.
    pub fn with_tolerance(
        class_labels: Vec<String>,
        weights: Matrix<T>,
        provenance: Vec<ClassProvenance>,
        trial_seed: Option<u64>,
        tolerance: f64,
    ) -> Result<Self> {
        let c = weights.rows();
        if c < 2 {
            return Err(Error::InvalidData(format!("classifier needs at least 2 classes, got {c}")));
        }
        if class_labels.len() != c {
            return Err(Error::DimensionMismatch { expected: c, found: class_labels.len() });
        }
        if !provenance.is_empty() && provenance.len() != c {
            return Err(Error::DimensionMismatch { expected: c, found: provenance.len() });
        }
        let mut seen = HashSet::new();
        for l in &class_labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidData(format!("duplicate class label {l:?}")));
            }
        }
        if let Some((row, col)) = weights.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        for (row, w) in weights.iter_rows().enumerate() {
            let norm = norm_f64(w);
            if (norm - 1.0).abs() > tolerance {
                return Err(Error::NonUnitRow { row, norm });
            }
        }
        Ok(Self { class_labels, weights, provenance, trial_seed })
    }

    /// Normalizes each raw row, then builds the classifier.
    pub fn from_raw_rows(class_labels: Vec<String>, rows: &Matrix<T>) -> Result<Self> {
        let mut w = Matrix::zeros(rows.rows(), rows.cols());
        for (i, r) in rows.iter_rows().enumerate() {
            w.row_mut(i).copy_from_slice(&normalize(r)?);
        }
        Self::new(class_labels, w, Vec::new(), None)
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn provenance(&self) -> &[ClassProvenance] {
        &self.provenance
    }

    pub fn trial_seed(&self) -> Option<u64> {
        self.trial_seed
    }
}

/// N x C cosine scores of one bag against one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    pub slide_id: String,
    pub scores: Matrix<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(slide_id: impl Into<String>, scores: Matrix<T>) -> Self {
        Self { slide_id: slide_id.into(), scores }
    }

    pub fn n_patches(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.scores.cols()
    }

    /// Whether every entry is a plausible cosine.
    pub fn within_cosine_range(&self) -> bool {
        self.scores
            .as_slice()
            .iter()
            .all(|&s| s.to_f64_lossless().abs() <= 1.0 + SCORE_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Class list plus labelled slides; the single source of truth for labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub slides: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidData("manifest needs at least 2 classes".into()));
        }
        let mut classes = HashSet::new();
        for c in &self.classes {
            if !classes.insert(c) {
                return Err(Error::InvalidData(format!("duplicate class {c:?}")));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.slides {
            if s.label >= self.classes.len() {
                return Err(Error::InvalidData(format!(
                    "slide {:?} has label {} but only {} classes exist",
                    s.slide_id,
                    s.label,
                    self.classes.len()
                )));
            }
            if !ids.insert(&s.slide_id) {
                return Err(Error::InvalidData(format!("duplicate slide id {:?}", s.slide_id)));
            }
        }
        Ok(())
    }
}
