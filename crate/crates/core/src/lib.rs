//! Zero-shot classification of whole-slide images represented as bags of
//! precomputed patch embeddings.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the widths used by the file formats and the CLI:
//! slide data and classifiers in `f32`, alignment training in `f64`.

pub mod align;
pub mod error;
pub mod eval;
pub mod io;
pub mod matrix;
pub mod prompts;
pub mod rng;
pub mod scalar;
pub mod spatial;
pub mod synth;
pub mod types;
pub mod zeroshot;

pub use error::{Error, ErrorClass, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use types::{normalize, ClassProvenance, DatasetManifest, ManifestEntry};

pub type SlideBag = types::SlideBag<f32>;
pub type ZeroShotClassifier = types::ZeroShotClassifier<f32>;
pub type ScoreMatrix = types::ScoreMatrix<f32>;
pub type TextEmbeddingTable = io::TextEmbeddingTable<f32>;
pub type PairedEmbeddingSet = io::PairedEmbeddingSet<f32>;
pub type AlignmentModel = align::AlignmentModel<f64>;
pub type TrainingPairs = io::PairedEmbeddingSet<f64>;

pub type SlideBag64 = types::SlideBag<f64>;
pub type ZeroShotClassifier64 = types::ZeroShotClassifier<f64>;
pub type ScoreMatrix64 = types::ScoreMatrix<f64>;
