//! Instance scoring, parameter-free pooling and slide-level decisions.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot_f64, Scalar};
use crate::spatial::{build_knn, smooth};
use crate::types::{ScoreMatrix, SlideBag, ZeroShotClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PoolMethod {
    Mean,
    TopK { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub pooling: PoolMethod,
    /// KNN neighbor count for spatial smoothing before pooling.
    pub smoothing: Option<usize>,
}

impl PoolConfig {
    pub fn mean() -> Self {
        Self { pooling: PoolMethod::Mean, smoothing: None }
    }

    pub fn topk(k: usize) -> Self {
        Self { pooling: PoolMethod::TopK { k }, smoothing: None }
    }

    pub fn with_smoothing(mut self, knn: usize) -> Self {
        self.smoothing = Some(knn);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let PoolMethod::TopK { k: 0 } = self.pooling {
            return Err(Error::InvalidArgument("topk pooling needs k >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub pooled_scores: Vec<f64>,
    pub predicted_class: usize,
    /// Patches averaged per class: `min(k, N)` for topK, `N` for mean.
    pub effective_k: usize,
}

/// Cosine score of every patch against every class prompt.
pub fn score_bag<T: Scalar>(
    bag: &SlideBag<T>,
    clf: &ZeroShotClassifier<T>,
) -> Result<ScoreMatrix<T>> {
    let d = bag.dim();
    if d != clf.dim() {
        return Err(Error::DimensionMismatch { expected: clf.dim(), found: d });
    }
    let c = clf.n_classes();
    let w = clf.weights();
    let x = bag.embeddings();
    let inv = bag.inv_norms();
    let mut out = vec![T::zero(); bag.len() * c];
    out.par_chunks_mut(c).enumerate().with_min_len(64).for_each(|(i, row_out)| {
        let xi = x.row(i);
        for (o, wc) in row_out.iter_mut().zip(w.iter_rows()) {
            *o = T::from_f64_rounded(dot_f64(xi, wc) * inv[i]);
        }
    });
    Ok(ScoreMatrix::new(bag.slide_id(), Matrix::from_vec(bag.len(), c, out)?))
}

/// Column-wise arithmetic mean.
pub fn mean_pool<T: Scalar>(s: &ScoreMatrix<T>) -> Result<Vec<f64>> {
    let n = s.n_patches();
    if n == 0 {
        return Err(Error::InvalidData("cannot pool an empty score matrix".into()));
    }
    let mut acc = vec![0.0f64; s.n_classes()];
    for row in s.scores.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.to_f64_lossless();
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Descending by value, ascending by index among equal values.
#[inline]
fn rank_order(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    // IEEE comparison, so that -0.0 and 0.0 tie and fall back to the index.
    move |&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `min(k, len)` largest values, best first; ties go to the
/// lower index. Linear-time selection followed by a sort of the winners only.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    let cmp = rank_order(values);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Per class, the mean of its `min(k, N)` largest scores, summed best first.
/// Returns the pooled vector and the effective `k`.
pub fn topk_pool<T: Scalar>(s: &ScoreMatrix<T>, k: usize) -> Result<(Vec<f64>, usize)> {
    let n = s.n_patches();
    if n == 0 {
        return Err(Error::InvalidData("cannot pool an empty score matrix".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("topk pooling needs k >= 1".into()));
    }
    let eff = k.min(n);
    let mut column = vec![0.0f64; n];
    let pooled = (0..s.n_classes())
        .map(|c| {
            for (i, v) in column.iter_mut().enumerate() {
                *v = s.scores[(i, c)].to_f64_lossless();
            }
            let sum: f64 = top_k_indices(&column, eff).iter().map(|&i| column[i]).sum();
            sum / eff as f64
        })
        .collect();
    Ok((pooled, eff))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class whose prompt embedding has the largest dot product with `u`.
pub fn classify_instance<T: Scalar>(u: &[T], clf: &ZeroShotClassifier<T>) -> Result<usize> {
    if u.len() != clf.dim() {
        return Err(Error::DimensionMismatch { expected: clf.dim(), found: u.len() });
    }
    let logits: Vec<f64> = clf.weights().iter_rows().map(|w| dot_f64(u, w)).collect();
    Ok(argmax(&logits))
}

/// Pools an already computed score matrix, smoothing first when configured.
pub fn pool_scores<T: Scalar>(
    bag: &SlideBag<T>,
    scores: ScoreMatrix<T>,
    cfg: &PoolConfig,
) -> Result<SlidePrediction> {
    cfg.validate()?;
    let scores = match cfg.smoothing {
        Some(knn) => {
            let coords = bag.coords().ok_or_else(|| Error::MissingCoords(bag.slide_id().into()))?;
            smooth(&scores, &build_knn(coords, knn))?
        }
        None => scores,
    };
    let (pooled_scores, effective_k) = match cfg.pooling {
        PoolMethod::Mean => (mean_pool(&scores)?, scores.n_patches()),
        PoolMethod::TopK { k } => topk_pool(&scores, k)?,
    };
    Ok(SlidePrediction {
        slide_id: bag.slide_id().to_owned(),
        predicted_class: argmax(&pooled_scores),
        pooled_scores,
        effective_k,
    })
}

pub fn classify_slide<T: Scalar>(
    bag: &SlideBag<T>,
    clf: &ZeroShotClassifier<T>,
    cfg: &PoolConfig,
) -> Result<SlidePrediction> {
    cfg.validate()?;
    if cfg.smoothing.is_some() && bag.coords().is_none() {
        return Err(Error::MissingCoords(bag.slide_id().into()));
    }
    pool_scores(bag, score_bag(bag, clf)?, cfg)
}

/// Per-patch heatmap export: `col,row,score_class0,...` then one line per patch.
pub fn score_map_csv<T: Scalar>(bag: &SlideBag<T>, scores: &ScoreMatrix<T>) -> Result<String> {
    let coords = bag.coords().ok_or_else(|| Error::MissingCoords(bag.slide_id().into()))?;
    if coords.len() != scores.n_patches() {
        return Err(Error::DimensionMismatch { expected: coords.len(), found: scores.n_patches() });
    }
    let mut out = String::from("col,row");
    for c in 0..scores.n_classes() {
        write!(out, ",score_class{c}").unwrap();
    }
    out.push('\n');
    for (row, [x, y]) in scores.scores.iter_rows().zip(coords) {
        write!(out, "{x},{y}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clf2() -> ZeroShotClassifier<f64> {
        ZeroShotClassifier::new(vec!["a".into(), "b".into()], Matrix::identity(2), vec![], None)
            .unwrap()
    }

    fn scores(rows: &[[f64; 2]]) -> ScoreMatrix<f64> {
        ScoreMatrix::new("s", Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn orthonormal_scores() {
        let bag = SlideBag::new("s", Matrix::<f64>::identity(2), None).unwrap();
        let s = score_bag(&bag, &clf2()).unwrap();
        assert_eq!(s.scores.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unnormalized_row_scores_cosine() {
        let bag = SlideBag::new("s", Matrix::from_rows(&[[3.0f64, 4.0]]).unwrap(), None).unwrap();
        let s = score_bag(&bag, &clf2()).unwrap();
        assert!((s.scores[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((s.scores[(0, 1)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let bag = SlideBag::new("s", Matrix::<f64>::identity(3), None).unwrap();
        assert!(matches!(score_bag(&bag, &clf2()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool(&scores(&[[1.0, 0.0], [0.0, 1.0]])).unwrap(), vec![0.5, 0.5]);
        assert_eq!(mean_pool(&scores(&[[0.2, 0.7]])).unwrap(), vec![0.2, 0.7]);
        let m = mean_pool(&scores(&[[0.9, 0.1], [0.1, 0.5], [0.5, 0.3]])).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let s = scores(&[[0.9, 0.0], [0.1, 0.0], [0.5, 0.0]]);
        let (p, eff) = topk_pool(&s, 2).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-12);
        assert_eq!(eff, 2);
        let (p, _) = topk_pool(&s, 1).unwrap();
        assert_eq!(p[0], 0.9);
        let (p, eff) = topk_pool(&s, 50).unwrap();
        assert_eq!(eff, 3);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!(topk_pool(&s, 0).is_err());
    }

    #[test]
    fn top_k_indices_tie_break() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.5, 0.5], 3), vec![1, 0, 2]);
        assert_eq!(top_k_indices(&[1.0; 5], 2), vec![0, 1]);
        assert!(top_k_indices(&[1.0], 0).is_empty());
    }

    #[test]
    fn classify_instance_examples() {
        let clf = clf2();
        assert_eq!(classify_instance(&[0.0, 1.0], &clf).unwrap(), 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(classify_instance(&[h, h], &clf).unwrap(), 0);
        assert_eq!(classify_instance(&[0.6, 0.8], &clf).unwrap(), 1);
        assert!(classify_instance(&[1.0, 0.0, 0.0], &clf).is_err());
    }

    #[test]
    fn smoothing_without_coords_fails() {
        let bag = SlideBag::new("s", Matrix::<f64>::identity(2), None).unwrap();
        let cfg = PoolConfig::topk(1).with_smoothing(8);
        assert!(matches!(classify_slide(&bag, &clf2(), &cfg), Err(Error::MissingCoords(_))));
    }

    #[test]
    fn mean_and_full_topk_agree() {
        let bag = SlideBag::new(
            "s",
            Matrix::from_rows(&[[0.3f64, 0.9], [1.0, -0.2], [0.5, 0.5], [-1.0, 0.1]]).unwrap(),
            None,
        )
        .unwrap();
        let a = classify_slide(&bag, &clf2(), &PoolConfig::mean()).unwrap();
        let b = classify_slide(&bag, &clf2(), &PoolConfig::topk(4)).unwrap();
        for (x, y) in a.pooled_scores.iter().zip(&b.pooled_scores) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.predicted_class, b.predicted_class);
    }

    #[test]
    fn score_map_layout() {
        let bag =
            SlideBag::new("s", Matrix::<f32>::identity(2), Some(vec![[3, 4], [5, -1]])).unwrap();
        let clf = ZeroShotClassifier::new(
            vec!["a".into(), "b".into()],
            Matrix::<f32>::identity(2),
            vec![],
            None,
        )
        .unwrap();
        let s = score_bag(&bag, &clf).unwrap();
        let csv = score_map_csv(&bag, &s).unwrap();
        assert_eq!(csv, "col,row,score_class0,score_class1\n3,4,1,0\n5,-1,0,1\n");
    }
}
