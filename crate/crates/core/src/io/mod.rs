//! On-disk formats.
//!
//! Binary (little-endian, bit-exact):
//!
//! * bags, `MIZB`: magic, version `u32 = 1`, flags `u32` (bit 0: coords
//!   present), `N u64`, `D u32`, `N*D` `f32` row-major, then optionally `N*2`
//!   `i32` (col, row) grid coordinates.
//! * paired embeddings, `MIZP`: magic, version `u32 = 1`, `M u64`,
//!   `D_img u32`, `D_txt u32`, then the image and text `f32` matrices.
//!
//! Text (JSON):
//!
//! * classifiers: one document, weights as shortest round-trip decimals.
//! * text embedding tables: one `{"text", "embedding"}` record per line.
//! * dataset manifests: one document, slide paths relative to the manifest.

mod binary;
mod text;

pub use binary::{
    decode_bag, decode_pairs, encode_bag, encode_pairs, read_bag, read_bag_with_limits, read_pairs,
    write_bag, write_pairs, PairedEmbeddingSet, ReadLimits, BAG_MAGIC, FORMAT_VERSION,
    PAIRS_MAGIC,
};
pub use text::{
    classifier_from_json, classifier_to_json, parse_text_table, read_classifier, read_manifest,
    read_text_table, text_table_to_jsonl, write_classifier, write_manifest, write_text_table,
    ClassifierFile, TextEmbeddingTable, CLASSIFIER_FORMAT,
};

use std::path::Path;

use sha2::{Digest, Sha256};

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> crate::Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| crate::Error::from(e).in_file(path))?;
    Ok(sha256_hex(&bytes))
}
