//! Independent reference implementations used by the test suites.
//!
//! These are deliberately naive (full sorts, exhaustive pair scans,
//! numerical differentiation) and share no code with the paths they check.
#![allow(dead_code)]

use mizero_core::align::{batch_loss, AlignmentModel};
use mizero_core::io::PairedEmbeddingSet;
use mizero_core::rng::SplitMix64;
use mizero_core::Matrix;

/// Top-`k` of a column by full sort: indices best first (ties to the lower
/// index) and their mean, summed in that order.
pub fn topk_by_sort(column: &[f64], k: usize) -> (Vec<usize>, f64) {
    let k = k.min(column.len());
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[b].partial_cmp(&column[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let mut sum = 0.0;
    for &i in &idx {
        sum += column[i];
    }
    (idx, sum / k as f64)
}

/// Neighbor lists from all pairwise squared distances.
pub fn knn_by_brute_force(coords: &[[i32; 2]], k: usize) -> Vec<Vec<usize>> {
    (0..coords.len())
        .map(|i| {
            let mut cands: Vec<(i128, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = coords[i][0] as i128 - coords[j][0] as i128;
                    let dy = coords[i][1] as i128 - coords[j][1] as i128;
                    (dx * dx + dy * dy, j)
                })
                .collect();
            cands.sort();
            cands.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Central differences of the batch loss over every parameter, flattened
/// in the `HeadParams::slices` order.
pub fn numerical_gradient(
    model: &AlignmentModel<f64>,
    batch: &PairedEmbeddingSet<f64>,
    eps: f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let n_slices = probe.params.slices().len();
    let mut out = Vec::new();
    for s in 0..n_slices {
        let len = probe.params.slices()[s].len();
        for i in 0..len {
            let orig = probe.params.slices()[s][i];
            probe.params.slices_mut()[s][i] = orig + eps;
            let plus = batch_loss(&probe, batch).unwrap();
            probe.params.slices_mut()[s][i] = orig - eps;
            let minus = batch_loss(&probe, batch).unwrap();
            probe.params.slices_mut()[s][i] = orig;
            out.push((plus - minus) / (2.0 * eps));
        }
    }
    out
}

pub fn gaussian_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random model and batch for gradient checks: `M <= 16`, every dim `<= 8`,
/// biases and `log_tau` trainable, `tau` in `[0.5, 5]`.
pub fn random_gradcheck_case(seed: u64) -> (AlignmentModel<f64>, PairedEmbeddingSet<f64>) {
    let mut rng = SplitMix64::new(seed);
    let m = 2 + rng.below_usize(15);
    let d_img = 1 + rng.below_usize(8);
    let d_txt = 1 + rng.below_usize(8);
    let d_s = 2 + rng.below_usize(7);
    let tau = 0.5 + 4.5 * rng.uniform();
    let mut model = AlignmentModel::<f64>::init(d_img, d_txt, d_s, tau, rng.next_u64()).unwrap();
    model.tau_trainable = true;
    for b in model.params.b_img.iter_mut().chain(model.params.b_txt.iter_mut()) {
        *b = 0.3 * rng.normal();
    }
    let images = gaussian_matrix(&mut rng, m, d_img, 1.0);
    let texts = gaussian_matrix(&mut rng, m, d_txt, 1.0);
    (model, PairedEmbeddingSet::new(images, texts).unwrap())
}
