//! Directed KNN graph over patch-grid coordinates and mean-filter smoothing.

use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::types::ScoreMatrix;

/// Neighbor count used when smoothing is requested without an explicit value.
pub const DEFAULT_KNN: usize = 8;

/// Out-neighbors per node, self excluded, sorted by (squared distance, index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn from_lists(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvalidData(format!("bad neighbor list for node {i}")));
            }
        }
        Ok(Self { neighbors })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }
}

#[inline]
fn dist2(a: [i32; 2], b: [i32; 2]) -> i128 {
    let dx = a[0] as i128 - b[0] as i128;
    let dy = a[1] as i128 - b[1] as i128;
    dx * dx + dy * dy
}

/// Uniform bucket grid over the coordinate bounding box.
struct BucketGrid {
    origin: [i64; 2],
    cell: i64,
    dims: [i64; 2],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl BucketGrid {
    fn new(coords: &[[i32; 2]]) -> Self {
        let n = coords.len();
        let (mut lo, mut hi) = ([i64::MAX; 2], [i64::MIN; 2]);
        for c in coords {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a] as i64);
                hi[a] = hi[a].max(c[a] as i64);
            }
        }
        let extent = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1];
        // about one point per cell, never more than ~4n cells
        let area = extent[0] as f64 * extent[1] as f64;
        let mut cell = ((area / n as f64).sqrt().ceil() as i64).max(1);
        let cells_for = |s: i64| ((extent[0] + s - 1) / s, (extent[1] + s - 1) / s);
        loop {
            let (gx, gy) = cells_for(cell);
            if (gx as f64) * (gy as f64) <= (4 * n + 16) as f64 {
                break;
            }
            cell *= 2;
        }
        let (gx, gy) = cells_for(cell);
        let n_cells = (gx * gy) as usize;
        let id = |c: &[i32; 2]| {
            let cx = (c[0] as i64 - lo[0]) / cell;
            let cy = (c[1] as i64 - lo[1]) / cell;
            (cy * gx + cx) as usize
        };
        let mut starts = vec![0usize; n_cells + 1];
        for c in coords {
            starts[id(c) + 1] += 1;
        }
        for i in 0..n_cells {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut members = vec![0usize; n];
        for (i, c) in coords.iter().enumerate() {
            let b = id(c);
            members[fill[b]] = i;
            fill[b] += 1;
        }
        Self { origin: lo, cell, dims: [gx, gy], starts, members }
    }

    fn cell_of(&self, c: [i32; 2]) -> [i64; 2] {
        [(c[0] as i64 - self.origin[0]) / self.cell, (c[1] as i64 - self.origin[1]) / self.cell]
    }

    fn bucket(&self, cx: i64, cy: i64) -> &[usize] {
        let b = (cy * self.dims[0] + cx) as usize;
        &self.members[self.starts[b]..self.starts[b + 1]]
    }

    /// Calls `f` on every member of the cells at Chebyshev distance exactly `r`.
    fn for_ring(&self, center: [i64; 2], r: i64, mut f: impl FnMut(usize)) {
        let [cx, cy] = center;
        let [gx, gy] = self.dims;
        for y in (cy - r).max(0)..=(cy + r).min(gy - 1) {
            let full_row = (y - cy).abs() == r;
            if full_row {
                for x in (cx - r).max(0)..=(cx + r).min(gx - 1) {
                    self.bucket(x, y).iter().for_each(|&j| f(j));
                }
            } else {
                for x in [cx - r, cx + r] {
                    if x >= 0 && x < gx {
                        self.bucket(x, y).iter().for_each(|&j| f(j));
                    }
                }
            }
        }
    }
}

/// Links every node to its `min(k, N - 1)` nearest other nodes by squared
/// Euclidean distance on grid coordinates; ties go to the lower index.
/// Duplicate coordinates are allowed and rank first.
pub fn build_knn(coords: &[[i32; 2]], k: usize) -> KnnGraph {
    let n = coords.len();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return KnnGraph { neighbors: vec![Vec::new(); n] };
    }
    let grid = BucketGrid::new(coords);
    let max_ring = grid.dims[0].max(grid.dims[1]);
    let neighbors = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let q = coords[i];
            let center = grid.cell_of(q);
            // max-heap on (d2, index): the top is the current worst keeper
            let mut heap: BinaryHeap<(i128, usize)> = BinaryHeap::with_capacity(k + 1);
            for r in 0..=max_ring {
                grid.for_ring(center, r, |j| {
                    if j == i {
                        return;
                    }
                    let cand = (dist2(q, coords[j]), j);
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                });
                // unvisited points are more than r * cell away along some axis
                let reach = (r * grid.cell) as i128;
                if heap.len() == k && heap.peek().unwrap().0 <= reach * reach {
                    break;
                }
            }
            heap.into_sorted_vec().into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    KnnGraph { neighbors }
}

/// Simultaneous mean filter: output row `i` averages input rows `{i} ∪ N(i)`.
pub fn smooth<T: Scalar>(s: &ScoreMatrix<T>, g: &KnnGraph) -> Result<ScoreMatrix<T>> {
    let (n, c) = (s.n_patches(), s.n_classes());
    if g.n_nodes() != n {
        return Err(Error::SizeMismatch { graph: g.n_nodes(), rows: n });
    }
    let input = &s.scores;
    let mut out = vec![T::zero(); n * c];
    if c > 0 {
        out.par_chunks_mut(c).enumerate().with_min_len(256).for_each(|(i, row)| {
            let mut acc: Vec<f64> = input.row(i).iter().map(|v| v.to_f64_lossless()).collect();
            let nb = g.neighbors(i);
            for &j in nb {
                for (a, v) in acc.iter_mut().zip(input.row(j)) {
                    *a += v.to_f64_lossless();
                }
            }
            let count = (nb.len() + 1) as f64;
            for (o, a) in row.iter_mut().zip(acc) {
                *o = T::from_f64_rounded(a / count);
            }
        });
    }
    Ok(ScoreMatrix::new(s.slide_id.clone(), Matrix::from_vec(n, c, out)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let g = build_knn(&[[0, 0], [1, 0], [2, 0]], 1);
        assert_eq!(g.lists(), &[vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn zero_k_and_single_node() {
        let g = build_knn(&[[0, 0], [1, 0], [2, 0]], 0);
        assert!(g.lists().iter().all(Vec::is_empty));
        let g = build_knn(&[[5, 5]], 8);
        assert_eq!(g.lists(), &[Vec::<usize>::new()]);
    }

    #[test]
    fn duplicates_rank_first() {
        let g = build_knn(&[[0, 0], [3, 0], [0, 0], [1, 0]], 2);
        assert_eq!(g.neighbors(0), &[2, 3]);
        assert_eq!(g.neighbors(2), &[0, 3]);
    }

    #[test]
    fn sparse_extreme_coordinates() {
        let coords = [[i32::MIN, i32::MIN], [i32::MAX, i32::MAX], [0, 0], [1, 1]];
        let g = build_knn(&coords, 1);
        assert_eq!(g.neighbors(2), &[3]);
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(1), &[3]);
    }

    fn sm(rows: &[[f64; 2]]) -> ScoreMatrix<f64> {
        ScoreMatrix::new("s", Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn smooth_examples() {
        let s = sm(&[[1.0, 0.0], [0.0, 1.0]]);
        let g = KnnGraph::from_lists(vec![vec![1], vec![0]]).unwrap();
        assert_eq!(smooth(&s, &g).unwrap().scores.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        let empty = KnnGraph::from_lists(vec![vec![], vec![]]).unwrap();
        assert_eq!(smooth(&s, &empty).unwrap(), s);
    }

    #[test]
    fn smooth_complete_graph_gives_column_mean() {
        let s = sm(&[[0.9, 0.1], [0.1, 0.5], [0.5, 0.3]]);
        let g = build_knn(&[[0, 0], [0, 1], [5, 5]], 2);
        let out = smooth(&s, &g).unwrap();
        for row in out.scores.iter_rows() {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_size_mismatch() {
        let s = sm(&[[1.0, 0.0]]);
        let g = KnnGraph::from_lists(vec![vec![], vec![]]).unwrap();
        assert!(matches!(smooth(&s, &g), Err(Error::SizeMismatch { graph: 2, rows: 1 })));
    }
}
