//! Deterministic synthetic fixtures: planted-signal bags, fake prompt
//! embedding tables and planted-latent paired embeddings.
//!
//! Every generator is a pure function of its seed; sub-streams come from
//! [`derive_seed`] so items can be generated in any order.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::io::{write_bag, write_classifier, write_manifest, PairedEmbeddingSet, TextEmbeddingTable};
use crate::matrix::Matrix;
use crate::prompts::{instantiate, PromptPool, DEFAULT_TEMPLATES};
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::types::{normalize_f64, DatasetManifest, ManifestEntry, SlideBag, ZeroShotClassifier};

/// One planted-signal bag: `ceil(signal_fraction * n_patches)` patches lie
/// near the class direction, the rest point in uniformly random directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedBagSpec {
    pub n_patches: usize,
    pub dim: usize,
    pub signal_fraction: f64,
    pub noise_sigma: f64,
    pub class: usize,
    pub seed: u64,
}

impl PlantedBagSpec {
    pub fn n_signal(&self) -> usize {
        ((self.signal_fraction * self.n_patches as f64).ceil() as usize).clamp(1, self.n_patches)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("planted bag needs patches and a dimension".into()));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::InvalidArgument("signal fraction must be in (0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

/// `count` orthonormal rows in `dim` dimensions (Gram-Schmidt on Gaussians).
pub fn random_orthonormal(count: usize, dim: usize, seed: u64) -> Result<Matrix<f64>> {
    if count > dim {
        return Err(Error::InvalidArgument(format!("cannot fit {count} orthonormal rows in {dim} dims")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v = gaussian_vec(&mut rng, dim);
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        if let Ok(u) = normalize_f64(&v) {
            rows.push(u);
        }
    }
    Matrix::from_rows(&rows)
}

/// Grid layout: a `W x H` raster with `W = ceil(sqrt(N))`; signal patches
/// fill a compact block at a random origin, background patches take the
/// remaining cells in raster order.
fn layout(spec: &PlantedBagSpec, rng: &mut SplitMix64) -> (Vec<[i32; 2]>, Vec<[i32; 2]>) {
    let n = spec.n_patches;
    let n_sig = spec.n_signal();
    let w = (n as f64).sqrt().ceil() as usize;
    let h = n.div_ceil(w);
    let bw = ((n_sig as f64).sqrt().ceil() as usize).min(w);
    let bh = n_sig.div_ceil(bw);
    let ox = rng.below_usize(w - bw + 1);
    let oy = rng.below_usize(h.max(bh) - bh + 1);
    let signal: Vec<[i32; 2]> =
        (0..n_sig).map(|i| [(ox + i % bw) as i32, (oy + i / bw) as i32]).collect();
    let rows = h.max(oy + bh);
    let background = (0..rows)
        .flat_map(|y| (0..w).map(move |x| [x as i32, y as i32]))
        .filter(|c| !signal.contains(c))
        .take(n - n_sig)
        .collect();
    (signal, background)
}

/// Draw order from `spec.seed`: block origin, signal patches, background
/// patches, then a shuffle of the row order.
pub fn planted_bag(spec: &PlantedBagSpec, class_dir: &[f64], slide_id: &str) -> Result<SlideBag<f32>> {
    spec.validate()?;
    if class_dir.len() != spec.dim {
        return Err(Error::DimensionMismatch { expected: spec.dim, found: class_dir.len() });
    }
    let mut rng = SplitMix64::new(spec.seed);
    let (sig_coords, bg_coords) = layout(spec, &mut rng);
    let mut rows: Vec<(Vec<f64>, [i32; 2])> = Vec::with_capacity(spec.n_patches);
    for c in sig_coords {
        let mut v = gaussian_vec(&mut rng, spec.dim);
        v.iter_mut().zip(class_dir).for_each(|(x, w)| *x = w + spec.noise_sigma * *x);
        rows.push((normalize_f64(&v)?, c));
    }
    for c in bg_coords {
        rows.push((normalize_f64(&gaussian_vec(&mut rng, spec.dim))?, c));
    }
    rng.shuffle(&mut rows);
    let data = rows.iter().flat_map(|(v, _)| v.iter().map(|&x| x as f32)).collect();
    let coords = rows.iter().map(|(_, c)| *c).collect();
    Ok(SlideBag::new(slide_id, Matrix::from_vec(spec.n_patches, spec.dim, data)?, Some(coords))?
        .with_label(spec.class))
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<SlideBag<f32>>,
    pub classifier: ZeroShotClassifier<f32>,
    /// Class directions in full precision.
    pub directions: Matrix<f64>,
}

impl PlantedDataset {
    /// Writes `manifest.json`, `classifier.json` and one `.mizb` per slide.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
        for (bag, entry) in self.bags.iter().zip(&self.manifest.slides) {
            write_bag(bag, dir.join(&entry.path))?;
        }
        write_classifier(&self.classifier, dir.join("classifier.json"))?;
        let path = dir.join("manifest.json");
        write_manifest(&self.manifest, &path)?;
        Ok(path)
    }
}

/// Class labels `class0..class{C-1}`.
pub fn class_labels(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(|c| format!("class{c}")).collect()
}

/// `slides_per_class` bags per class from `class_specs[c]`; the `class` and
/// `seed` fields of each spec are replaced per slide. Slide `i` has class
/// `i % C` and seed `derive_seed(seed, i + 1)`; the class directions come
/// from `derive_seed(seed, 0)`.
pub fn make_planted_dataset(
    n_classes: usize,
    class_specs: &[PlantedBagSpec],
    slides_per_class: usize,
    seed: u64,
) -> Result<PlantedDataset> {
    if n_classes < 2 || class_specs.len() != n_classes {
        return Err(Error::InvalidArgument("need >= 2 classes and one spec per class".into()));
    }
    let dim = class_specs[0].dim;
    if class_specs.iter().any(|s| s.dim != dim) {
        return Err(Error::InvalidArgument("all classes must share one dimension".into()));
    }
    let directions = random_orthonormal(n_classes, dim, derive_seed(seed, 0))?;
    let labels = class_labels(n_classes);
    let total = n_classes * slides_per_class;
    let mut bags = Vec::with_capacity(total);
    let mut slides = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % n_classes;
        let spec = PlantedBagSpec { class, seed: derive_seed(seed, i as u64 + 1), ..class_specs[class] };
        let id = format!("slide_{i:05}");
        bags.push(planted_bag(&spec, directions.row(class), &id)?);
        slides.push(ManifestEntry { slide_id: id.clone(), path: PathBuf::from(format!("{id}.mizb")), label: class });
    }
    let classifier = ZeroShotClassifier::new(labels.clone(), directions.cast::<f32>(), Vec::new(), None)?;
    Ok(PlantedDataset { manifest: DatasetManifest { classes: labels, slides }, bags, classifier, directions })
}

/// Default templates with `names_per_class` synthetic classnames per class.
pub fn synthetic_pool(n_classes: usize, names_per_class: usize) -> PromptPool {
    let classnames: IndexMap<String, Vec<String>> = class_labels(n_classes)
        .into_iter()
        .map(|c| {
            let names = (0..names_per_class).map(|j| format!("{c} variant {j}")).collect();
            (c, names)
        })
        .collect();
    PromptPool {
        templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        classnames,
    }
}

/// Embeds every prompt of `pool` as its class direction plus Gaussian noise
/// of scale `noise`. Prompt `k` (class-major, then classname, then template)
/// uses stream `derive_seed(seed, k)`.
pub fn make_text_table(
    pool: &PromptPool,
    directions: &Matrix<f64>,
    noise: f64,
    seed: u64,
) -> Result<TextEmbeddingTable<f32>> {
    pool.validate()?;
    if directions.rows() != pool.classnames.len() {
        return Err(Error::DimensionMismatch { expected: pool.classnames.len(), found: directions.rows() });
    }
    let dim = directions.cols();
    let mut table = TextEmbeddingTable::new(dim);
    let mut k = 0u64;
    for (c, names) in pool.classnames.values().enumerate() {
        for name in names {
            for t in &pool.templates {
                let mut rng = SplitMix64::new(derive_seed(seed, k));
                k += 1;
                let emb = directions
                    .row(c)
                    .iter()
                    .map(|&w| (w + noise * rng.normal()) as f32)
                    .collect();
                table.insert(instantiate(t, name), emb)?;
            }
        }
    }
    Ok(table)
}

/// Ground-truth linear maps behind a planted-latent pair set.
#[derive(Debug, Clone)]
pub struct LatentMaps {
    /// `D_img x D_latent`
    pub image_map: Matrix<f64>,
    /// `D_txt x D_latent`
    pub text_map: Matrix<f64>,
}

/// Image row `A z + noise * e`, text row `B z + noise * e'`, with Gaussian
/// latents `z`. Streams from `seed`: 0 latents, 1 noise, 2 `A`, 3 `B`.
pub fn make_paired_latent<T: Scalar>(
    m: usize,
    d_img: usize,
    d_txt: usize,
    d_latent: usize,
    noise: f64,
    seed: u64,
) -> Result<(PairedEmbeddingSet<T>, LatentMaps)> {
    if d_latent == 0 || d_latent > d_img.min(d_txt) {
        return Err(Error::InvalidArgument(format!(
            "latent dim {d_latent} must be in 1..=min({d_img}, {d_txt})"
        )));
    }
    let gauss = |rows: usize, cols: usize, stream: u64, scale: f64| {
        let mut rng = SplitMix64::new(derive_seed(seed, stream));
        let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    };
    let scale = 1.0 / (d_latent as f64).sqrt();
    let maps = LatentMaps { image_map: gauss(d_img, d_latent, 2, scale), text_map: gauss(d_txt, d_latent, 3, scale) };
    let latents = gauss(m, d_latent, 0, 1.0);
    let set = paired_from_maps(&latents, &maps, noise, derive_seed(seed, 1))?;
    Ok((set, maps))
}

/// Pairs from explicit latents and maps; noise drawn from `noise_seed`,
/// image rows first.
pub fn paired_from_maps<T: Scalar>(
    latents: &Matrix<f64>,
    maps: &LatentMaps,
    noise: f64,
    noise_seed: u64,
) -> Result<PairedEmbeddingSet<T>> {
    let mut rng = SplitMix64::new(noise_seed);
    let mut side = |map: &Matrix<f64>| -> Result<Matrix<T>> {
        let mut noisy = latents.matmul(&map.transpose())?;
        noisy.as_mut_slice().iter_mut().for_each(|x| *x += noise * rng.normal());
        Ok(noisy.cast())
    };
    let images = side(&maps.image_map)?;
    let texts = side(&maps.text_map)?;
    PairedEmbeddingSet::new(images, texts)
}
