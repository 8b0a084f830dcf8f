//! Symmetric temperature-scaled contrastive alignment of frozen image and
//! text embeddings through two trainable linear projection heads.
//!
//! Logits are `tau * u_i . v_j` (tau multiplies), with `tau = exp(log_tau)`.
//! The reported loss is `(L_i2t + L_t2i) / (2M)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PairedEmbeddingSet;
use crate::matrix::Matrix;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::types::ZERO_NORM;

pub const MODEL_FORMAT: &str = "mizero-alignment/1";
pub const LOGIT_CONVENTION: &str = "logit = tau * cosine";

/// Conventional CLIP temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Shared latent width of the reference setup.
pub const DEFAULT_SHARED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Image,
    Text,
}

/// How a user-facing temperature value maps onto the logit multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureReading {
    /// `tau = 1 / temperature`, e.g. 0.07 gives a multiplier of ~14.29.
    Divisor,
    /// `tau = temperature`, multiplied into the logits as given.
    Literal,
}

impl TemperatureReading {
    pub fn multiplier(self, temperature: f64) -> f64 {
        match self {
            TemperatureReading::Divisor => 1.0 / temperature,
            TemperatureReading::Literal => temperature,
        }
    }
}

/// Every trainable tensor of the two heads. Also used for gradients and
/// optimizer moments, which share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `D_s x D_img`
    pub w_img: Matrix<T>,
    pub b_img: Vec<T>,
    /// `D_s x D_txt`
    pub w_txt: Matrix<T>,
    pub b_txt: Vec<T>,
    pub log_tau: T,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            w_img: Matrix::zeros(other.w_img.rows(), other.w_img.cols()),
            b_img: vec![T::zero(); other.b_img.len()],
            w_txt: Matrix::zeros(other.w_txt.rows(), other.w_txt.cols()),
            b_txt: vec![T::zero(); other.b_txt.len()],
            log_tau: T::zero(),
        }
    }

    /// Flat views in a fixed order: `w_img, b_img, w_txt, b_txt, log_tau`.
    pub fn slices(&self) -> [&[T]; 5] {
        [
            self.w_img.as_slice(),
            &self.b_img,
            self.w_txt.as_slice(),
            &self.b_txt,
            std::slice::from_ref(&self.log_tau),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.w_img.as_mut_slice(),
            &mut self.b_img,
            self.w_txt.as_mut_slice(),
            &mut self.b_txt,
            std::slice::from_mut(&mut self.log_tau),
        ]
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.slices().concat()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel<T> {
    pub params: HeadParams<T>,
    pub tau_trainable: bool,
    pub use_bias: bool,
}

impl<T: Scalar> AlignmentModel<T> {
    /// Gaussian weights with variance `1 / D_in`, zero biases, fixed `tau`.
    pub fn init(d_img: usize, d_txt: usize, d_shared: usize, tau: f64, seed: u64) -> Result<Self> {
        if d_img == 0 || d_txt == 0 || d_shared == 0 {
            return Err(Error::InvalidArgument("head dimensions must be positive".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        let gauss = |rows: usize, cols: usize, stream: u64| {
            let mut rng = SplitMix64::new(derive_seed(seed, stream));
            let scale = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| T::from_f64_rounded(rng.normal() * scale)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        Ok(Self {
            params: HeadParams {
                w_img: gauss(d_shared, d_img, 0),
                b_img: vec![T::zero(); d_shared],
                w_txt: gauss(d_shared, d_txt, 1),
                b_txt: vec![T::zero(); d_shared],
                log_tau: T::from_f64_rounded(tau.ln()),
            },
            tau_trainable: false,
            use_bias: true,
        })
    }

    pub fn d_shared(&self) -> usize {
        self.params.w_img.rows()
    }

    pub fn d_img(&self) -> usize {
        self.params.w_img.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.params.w_txt.cols()
    }

    pub fn tau(&self) -> T {
        self.params.log_tau.exp()
    }

    fn head(&self, side: Side) -> (&Matrix<T>, &[T]) {
        match side {
            Side::Image => (&self.params.w_img, &self.params.b_img),
            Side::Text => (&self.params.w_txt, &self.params.b_txt),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.w_img.rows() != p.w_txt.rows()
            || p.b_img.len() != p.w_img.rows()
            || p.b_txt.len() != p.w_txt.rows()
        {
            return Err(Error::ShapeMismatch("inconsistent head shapes".into()));
        }
        if !p.all_finite() {
            return Err(Error::InvalidData("non-finite head parameter".into()));
        }
        Ok(())
    }
}

/// Pre-normalization projections `z = W x + b`, their norms and unit rows.
struct Projection<T> {
    norms: Vec<T>,
    unit: Matrix<T>,
}

fn forward<T: Scalar>(model: &AlignmentModel<T>, side: Side, x: &Matrix<T>) -> Result<Projection<T>> {
    let (w, b) = model.head(side);
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch { expected: w.cols(), found: x.cols() });
    }
    let ds = w.rows();
    let mut unit = Matrix::zeros(x.rows(), ds);
    let mut norms = Vec::with_capacity(x.rows());
    for m in 0..x.rows() {
        let xm = x.row(m);
        let z = unit.row_mut(m);
        for (k, zk) in z.iter_mut().enumerate() {
            let mut acc = if model.use_bias { b[k] } else { T::zero() };
            for (&wkj, &xj) in w.row(k).iter().zip(xm) {
                acc += wkj * xj;
            }
            *zk = acc;
        }
        let norm = z.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm.is_nan() || norm.to_f64_lossless() < ZERO_NORM {
            return Err(Error::ZeroVector { norm: norm.to_f64_lossless() });
        }
        z.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok(Projection { norms, unit })
}

/// Row `m` is `normalize(W x_m + b)` for the chosen head.
pub fn project<T: Scalar>(model: &AlignmentModel<T>, side: Side, x: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(forward(model, side, x)?.unit)
}

fn logits<T: Scalar>(u: &Matrix<T>, v: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    if u.rows() != v.rows() || u.cols() != v.cols() {
        return Err(Error::ShapeMismatch(format!(
            "U is {}x{}, V is {}x{}",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if u.rows() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if !(tau >= T::zero() && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be finite and >= 0, got {tau}")));
    }
    let m = u.rows();
    let mut l = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let dot = u.row(i).iter().zip(v.row(j)).fold(T::zero(), |a, (&x, &y)| a + x * y);
            l[(i, j)] = tau * dot;
        }
    }
    Ok(l)
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    max + xs.fold(T::zero(), |a, x| a + (x - max).exp()).ln()
}

fn loss_from_logits<T: Scalar>(l: &Matrix<T>) -> T {
    let m = l.rows();
    let mut i2t = T::zero();
    let mut t2i = T::zero();
    for i in 0..m {
        i2t += log_sum_exp((0..m).map(|j| l[(i, j)])) - l[(i, i)];
    }
    for j in 0..m {
        t2i += log_sum_exp((0..m).map(|i| l[(i, j)])) - l[(j, j)];
    }
    (i2t + t2i) / T::from_usize(2 * m).unwrap()
}

/// Symmetric InfoNCE over matched rows of `u` and `v`, averaged per pair.
pub fn contrastive_loss<T: Scalar>(u: &Matrix<T>, v: &Matrix<T>, tau: T) -> Result<T> {
    Ok(loss_from_logits(&logits(u, v, tau)?))
}

/// Loss of the model on a batch.
pub fn batch_loss<T: Scalar>(model: &AlignmentModel<T>, batch: &PairedEmbeddingSet<T>) -> Result<T> {
    let u = project(model, Side::Image, &batch.images)?;
    let v = project(model, Side::Text, &batch.texts)?;
    contrastive_loss(&u, &v, model.tau())
}

fn head_backward<T: Scalar>(
    proj: &Projection<T>,
    d_unit: &Matrix<T>,
    x: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: &mut [T],
    use_bias: bool,
) {
    let ds = d_unit.cols();
    let mut dz = vec![T::zero(); ds];
    for m in 0..x.rows() {
        let u = proj.unit.row(m);
        let g = d_unit.row(m);
        let ug = u.iter().zip(g).fold(T::zero(), |a, (&a1, &b1)| a + a1 * b1);
        for k in 0..ds {
            dz[k] = (g[k] - u[k] * ug) / proj.norms[m];
        }
        let xm = x.row(m);
        for (k, &dzk) in dz.iter().enumerate() {
            for (dwk, &xj) in dw.row_mut(k).iter_mut().zip(xm) {
                *dwk += dzk * xj;
            }
            if use_bias {
                db[k] += dzk;
            }
        }
    }
}

/// Loss and exact gradients with respect to every trainable parameter.
/// Frozen parameters (bias when disabled, `log_tau` when fixed) get zeros.
pub fn loss_and_gradients<T: Scalar>(
    model: &AlignmentModel<T>,
    batch: &PairedEmbeddingSet<T>,
) -> Result<(T, HeadParams<T>)> {
    let pu = forward(model, Side::Image, &batch.images)?;
    let pv = forward(model, Side::Text, &batch.texts)?;
    let tau = model.tau();
    let l = logits(&pu.unit, &pv.unit, tau)?;
    let loss = loss_from_logits(&l);
    let m = l.rows();
    let two_m = T::from_usize(2 * m).unwrap();

    // dloss/dlogit = (rowsoftmax + colsoftmax - 2I) / 2M
    let mut g = Matrix::zeros(m, m);
    for i in 0..m {
        let lse = log_sum_exp((0..m).map(|j| l[(i, j)]));
        for j in 0..m {
            g[(i, j)] = (l[(i, j)] - lse).exp();
        }
    }
    for j in 0..m {
        let lse = log_sum_exp((0..m).map(|i| l[(i, j)]));
        for i in 0..m {
            g[(i, j)] += (l[(i, j)] - lse).exp();
        }
    }
    for i in 0..m {
        g[(i, i)] -= T::from_f64_rounded(2.0);
    }
    g.as_mut_slice().iter_mut().for_each(|x| *x /= two_m);

    let ds = model.d_shared();
    let mut du = Matrix::zeros(m, ds);
    let mut dv = Matrix::zeros(m, ds);
    let mut d_log_tau = T::zero();
    for i in 0..m {
        for j in 0..m {
            let gij = g[(i, j)];
            for k in 0..ds {
                du[(i, k)] += tau * gij * pv.unit[(j, k)];
                dv[(j, k)] += tau * gij * pu.unit[(i, k)];
            }
            // l = tau * cos, so dl/dlog_tau = l
            d_log_tau += gij * l[(i, j)];
        }
    }

    let mut grads = HeadParams::zeros_like(&model.params);
    head_backward(&pu, &du, &batch.images, &mut grads.w_img, &mut grads.b_img, model.use_bias);
    head_backward(&pv, &dv, &batch.texts, &mut grads.w_txt, &mut grads.b_txt, model.use_bias);
    if model.tau_trainable {
        grads.log_tau = d_log_tau;
    }
    Ok((loss, grads))
}

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the peak, then cosine decay to zero.
    Cosine { warmup_steps: usize },
}

impl LrSchedule {
    pub fn rate(&self, peak: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    peak * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total.saturating_sub(warmup_steps).max(1) as f64;
                    let t = (step - warmup_steps) as f64 / span;
                    0.5 * peak * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to the weight matrices only.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            epochs: 50,
            max_steps: None,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if n_pairs < self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "{n_pairs} pairs cannot fill a batch of {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> usize {
        n_pairs / self.batch_size
    }

    pub fn total_steps(&self, n_pairs: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(n_pairs);
        self.max_steps.map_or(all, |s| s.min(all))
    }
}

struct AdamW<T> {
    m: HeadParams<T>,
    v: HeadParams<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    fn new(p: &HeadParams<T>) -> Self {
        Self { m: HeadParams::zeros_like(p), v: HeadParams::zeros_like(p), t: 0 }
    }

    fn step(&mut self, params: &mut HeadParams<T>, grads: &HeadParams<T>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decays = [true, false, true, false, false];
        let p = params.slices_mut();
        let g = grads.slices();
        let m = self.m.slices_mut();
        let v = self.v.slices_mut();
        for ((((p, g), m), v), decay) in p.into_iter().zip(g).zip(m).zip(v).zip(decays) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = g.to_f64_lossless();
                let mf = b1 * m.to_f64_lossless() + (1.0 - b1) * gf;
                let vf = b2 * v.to_f64_lossless() + (1.0 - b2) * gf * gf;
                *m = T::from_f64_rounded(mf);
                *v = T::from_f64_rounded(vf);
                let mut pf = p.to_f64_lossless();
                if decay {
                    pf -= lr * cfg.weight_decay * pf;
                }
                pf -= lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
                *p = T::from_f64_rounded(pf);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: AlignmentModel<T>,
    /// Batch loss before each optimizer step.
    pub losses: Vec<T>,
}

/// Minibatch AdamW. Each epoch visits a fresh permutation drawn from
/// `derive_seed(cfg.seed, epoch)`; a trailing partial batch is dropped.
pub fn train<T: Scalar>(
    model: &AlignmentModel<T>,
    data: &PairedEmbeddingSet<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    cfg.validate(data.len())?;
    let mut model = model.clone();
    let mut opt = AdamW::new(&model.params);
    let total = cfg.total_steps(data.len());
    let per_epoch = cfg.steps_per_epoch(data.len());
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        SplitMix64::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        for b in 0..per_epoch {
            if step >= total {
                break 'epochs;
            }
            let batch = data.select(&order[b * cfg.batch_size..(b + 1) * cfg.batch_size]);
            let (loss, grads) = loss_and_gradients(&model, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { step, loss: loss.to_f64_lossless() });
            }
            losses.push(loss);
            let lr = cfg.schedule.rate(cfg.learning_rate, step, total);
            opt.step(&mut model.params, &grads, lr, cfg);
            if !model.params.all_finite() {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Fraction of images whose most similar text (over all texts in `data`)
/// is their own pair.
pub fn retrieval_top1<T: Scalar>(model: &AlignmentModel<T>, data: &PairedEmbeddingSet<T>) -> Result<f64> {
    let u = project(model, Side::Image, &data.images)?;
    let v = project(model, Side::Text, &data.texts)?;
    let l = logits(&u, &v, T::one())?;
    let hits = (0..l.rows())
        .filter(|&i| crate::zeroshot::argmax(&l.row(i).iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>()) == i)
        .count();
    Ok(hits as f64 / l.rows() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureRecord {
    pub value: f64,
    pub reading: TemperatureReading,
}

/// Serialized heads, stored in `f32`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub convention: String,
    pub temperature: Option<TemperatureRecord>,
    pub tau: f64,
    pub log_tau: f64,
    pub tau_trainable: bool,
    pub use_bias: bool,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_shared: usize,
    pub w_img: Vec<Vec<f32>>,
    pub b_img: Vec<f32>,
    pub w_txt: Vec<Vec<f32>>,
    pub b_txt: Vec<f32>,
    /// Free-form record of how the model was produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl ModelFile {
    pub fn from_model<T: Scalar>(
        model: &AlignmentModel<T>,
        temperature: Option<TemperatureRecord>,
        provenance: serde_json::Value,
    ) -> Self {
        let rows = |m: &Matrix<T>| m.cast::<f32>().iter_rows().map(<[f32]>::to_vec).collect();
        let vec = |v: &[T]| v.iter().map(|x| x.to_f64_lossless() as f32).collect();
        let p = &model.params;
        Self {
            format: MODEL_FORMAT.into(),
            convention: LOGIT_CONVENTION.into(),
            temperature,
            tau: model.tau().to_f64_lossless(),
            log_tau: p.log_tau.to_f64_lossless(),
            tau_trainable: model.tau_trainable,
            use_bias: model.use_bias,
            d_img: model.d_img(),
            d_txt: model.d_txt(),
            d_shared: model.d_shared(),
            w_img: rows(&p.w_img),
            b_img: vec(&p.b_img),
            w_txt: rows(&p.w_txt),
            b_txt: vec(&p.b_txt),
            provenance,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<AlignmentModel<T>> {
        if self.format != MODEL_FORMAT || self.convention != LOGIT_CONVENTION {
            return Err(Error::InvalidData(format!(
                "unsupported model file {:?} / {:?}",
                self.format, self.convention
            )));
        }
        let mat = |rows: &[Vec<f32>]| Matrix::<f32>::from_rows(rows).map(|m| m.cast::<T>());
        let vec = |v: &[f32]| v.iter().map(|&x| T::from_f64_rounded(x as f64)).collect();
        let model = AlignmentModel {
            params: HeadParams {
                w_img: mat(&self.w_img)?,
                b_img: vec(&self.b_img),
                w_txt: mat(&self.w_txt)?,
                b_txt: vec(&self.b_txt),
                log_tau: T::from_f64_rounded(self.log_tau),
            },
            tau_trainable: self.tau_trainable,
            use_bias: self.use_bias,
        };
        model.validate()?;
        if model.d_img() != self.d_img || model.d_txt() != self.d_txt || model.d_shared() != self.d_shared {
            return Err(Error::ShapeMismatch("model file dimensions disagree with weights".into()));
        }
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        serde_json::from_str(&src).map_err(|e| Error::from(e).in_file(path))
    }
}

/// `step,loss` lines under a header.
pub fn loss_trace_csv<T: Scalar>(losses: &[T]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", l.to_f64_lossless()));
    }
    out
}
