use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::types::SlideBag;

pub const BAG_MAGIC: [u8; 4] = *b"MIZB";
pub const PAIRS_MAGIC: [u8; 4] = *b"MIZP";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_COORDS: u32 = 1;
const BAG_HEADER: usize = 4 + 4 + 4 + 8 + 4;
const PAIRS_HEADER: usize = 4 + 4 + 8 + 4 + 4;

/// Upper bound on payload sizes a reader will accept from a header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadLimits {
    pub max_payload_bytes: u64,
}

impl Default for ReadLimits {
    fn default() -> Self {
        Self { max_payload_bytes: 16 << 30 }
    }
}

/// Image/text embedding pairs, matched by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEmbeddingSet<T> {
    pub images: Matrix<T>,
    pub texts: Matrix<T>,
}

impl<T: Scalar> PairedEmbeddingSet<T> {
    pub fn new(images: Matrix<T>, texts: Matrix<T>) -> Result<Self> {
        if images.rows() != texts.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} image rows vs {} text rows",
                images.rows(),
                texts.rows()
            )));
        }
        for m in [&images, &texts] {
            if let Some((row, col)) = m.first_non_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { images: self.images.select_rows(idx), texts: self.texts.select_rows(idx) }
    }

    pub fn cast<U: Scalar>(&self) -> PairedEmbeddingSet<U> {
        PairedEmbeddingSet { images: self.images.cast(), texts: self.texts.cast() }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                needed: (self.pos + n) as u64,
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_header(cur: &mut Cursor<'_>, header_len: usize, magic: [u8; 4]) -> Result<()> {
    if cur.buf.len() < header_len {
        // report a bad magic before a short header when the first bytes already disagree
        if cur.buf.len() >= 4 && cur.buf[..4] != magic {
            return Err(Error::BadMagic { expected: magic, found: cur.buf[..4].try_into().unwrap() });
        }
        return Err(Error::TruncatedFile {
            needed: header_len as u64,
            available: cur.buf.len() as u64,
        });
    }
    let found: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

/// Product of the factors in bytes, rejecting overflow and the read cap.
fn payload_bytes(factors: &[u64], limits: ReadLimits) -> Result<u64> {
    let bytes = factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::PayloadTooLarge { requested: u64::MAX, cap: limits.max_payload_bytes })?;
    if bytes > limits.max_payload_bytes {
        return Err(Error::PayloadTooLarge { requested: bytes, cap: limits.max_payload_bytes });
    }
    Ok(bytes)
}

fn need(cur: &Cursor<'_>, bytes: u64) -> Result<()> {
    let available = (cur.buf.len() - cur.pos) as u64;
    if available < bytes {
        return Err(Error::TruncatedFile {
            needed: cur.pos as u64 + bytes,
            available: cur.buf.len() as u64,
        });
    }
    Ok(())
}

pub fn encode_bag(bag: &SlideBag<f32>) -> Vec<u8> {
    let (n, d) = (bag.len(), bag.dim());
    let coords = bag.coords();
    let mut out = Vec::with_capacity(BAG_HEADER + n * d * 4 + coords.map_or(0, |_| n * 8));
    out.extend_from_slice(&BAG_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if coords.is_some() { FLAG_COORDS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for x in bag.embeddings().as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(c) = coords {
        for [col, row] in c {
            out.extend_from_slice(&col.to_le_bytes());
            out.extend_from_slice(&row.to_le_bytes());
        }
    }
    out
}

pub fn decode_bag(bytes: &[u8], slide_id: &str, limits: ReadLimits) -> Result<SlideBag<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_header(&mut cur, BAG_HEADER, BAG_MAGIC)?;
    let flags = cur.u32()?;
    if flags & !FLAG_COORDS != 0 {
        return Err(Error::InvalidData(format!("unknown bag flags {flags:#x}")));
    }
    let n = cur.u64()?;
    let d = cur.u32()? as u64;
    let emb_bytes = payload_bytes(&[n, d, 4], limits)?;
    let coord_bytes = if flags & FLAG_COORDS != 0 { payload_bytes(&[n, 8], limits)? } else { 0 };
    payload_bytes(&[emb_bytes.saturating_add(coord_bytes)], limits)?;
    need(&cur, emb_bytes + coord_bytes)?;
    let (n, d) = (n as usize, d as usize);
    let data = cur.f32s(n * d)?;
    let coords = if flags & FLAG_COORDS != 0 {
        let raw = cur.take(n * 8)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| {
                    [
                        i32::from_le_bytes(c[..4].try_into().unwrap()),
                        i32::from_le_bytes(c[4..].try_into().unwrap()),
                    ]
                })
                .collect(),
        )
    } else {
        None
    };
    cur.finish()?;
    SlideBag::new(slide_id, Matrix::from_vec(n, d, data)?, coords)
}

/// Slide id defaults to the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<SlideBag<f32>> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_bag_with_limits(path, &id, ReadLimits::default())
}

pub fn read_bag_with_limits(
    path: impl AsRef<Path>,
    slide_id: &str,
    limits: ReadLimits,
) -> Result<SlideBag<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_bag(&bytes, slide_id, limits).map_err(|e| e.in_file(path))
}

pub fn write_bag(bag: &SlideBag<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bag(bag)).map_err(|e| Error::from(e).in_file(path))
}

pub fn encode_pairs(set: &PairedEmbeddingSet<f32>) -> Vec<u8> {
    let m = set.len();
    let mut out = Vec::with_capacity(
        PAIRS_HEADER + 4 * (set.images.as_slice().len() + set.texts.as_slice().len()),
    );
    out.extend_from_slice(&PAIRS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(set.images.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(set.texts.cols() as u32).to_le_bytes());
    for x in set.images.as_slice().iter().chain(set.texts.as_slice()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_pairs(bytes: &[u8], limits: ReadLimits) -> Result<PairedEmbeddingSet<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_header(&mut cur, PAIRS_HEADER, PAIRS_MAGIC)?;
    let m = cur.u64()?;
    let d_img = cur.u32()? as u64;
    let d_txt = cur.u32()? as u64;
    let img_bytes = payload_bytes(&[m, d_img, 4], limits)?;
    let txt_bytes = payload_bytes(&[m, d_txt, 4], limits)?;
    payload_bytes(&[img_bytes.saturating_add(txt_bytes)], limits)?;
    need(&cur, img_bytes + txt_bytes)?;
    let (m, d_img, d_txt) = (m as usize, d_img as usize, d_txt as usize);
    let images = Matrix::from_vec(m, d_img, cur.f32s(m * d_img)?)?;
    let texts = Matrix::from_vec(m, d_txt, cur.f32s(m * d_txt)?)?;
    cur.finish()?;
    PairedEmbeddingSet::new(images, texts)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<PairedEmbeddingSet<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_pairs(&bytes, ReadLimits::default()).map_err(|e| e.in_file(path))
}

pub fn write_pairs(set: &PairedEmbeddingSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pairs(set)).map_err(|e| Error::from(e).in_file(path))
}
