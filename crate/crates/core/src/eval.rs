//! Zero-shot evaluation protocol: balanced accuracy per sampled prompt trial,
//! summarized by median and interquartile range across trials.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bag_with_limits, ReadLimits, TextEmbeddingTable};
use crate::prompts::{build_classifier, sample_trials_with, PromptPool, PromptTrial, SamplingOptions};
use crate::rng::PRNG_ID;
use crate::types::{DatasetManifest, SlideBag};
use crate::zeroshot::{classify_slide, PoolConfig, SlidePrediction};

pub const REPORT_FORMAT: &str = "mizero-eval-report/1";
pub const QUANTILE_RULE: &str = "linear interpolation between order statistics at 0-based position p*(n-1), \
     evaluated exactly on shortest round-trip decimal forms, then rounded to nearest f64";

/// Mean over classes of per-class recall. Rows are ground truth, columns
/// predictions.
pub fn balanced_accuracy(confusion: &[Vec<u64>]) -> Result<f64> {
    let c = confusion.len();
    if c == 0 {
        return Err(Error::InvalidData("empty confusion matrix".into()));
    }
    let mut sum = 0.0;
    for (i, row) in confusion.iter().enumerate() {
        if row.len() != c {
            return Err(Error::ShapeMismatch(format!("confusion row {i} has {} columns", row.len())));
        }
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::EmptyClass { class: i.to_string() });
        }
        sum += row[i] as f64 / total as f64;
    }
    Ok(sum / c as f64)
}

/// Finite decimal `mantissa * 10^exp`.
#[derive(Debug, Clone, Copy)]
struct Decimal {
    mantissa: i128,
    exp: i32,
}

impl Decimal {
    /// Shortest decimal that round-trips to `x`.
    fn from_f64(x: f64) -> Self {
        let s = format!("{x:e}");
        let (m, e) = s.split_once('e').expect("exponent");
        let exp: i32 = e.parse().expect("exponent");
        let frac = m.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
        let mantissa: i128 = m.replace('.', "").parse().expect("mantissa");
        Self { mantissa, exp: exp - frac }
    }

    fn rescale(self, exp: i32) -> Option<i128> {
        let shift = u32::try_from(self.exp - exp).ok()?;
        self.mantissa.checked_mul(10i128.checked_pow(shift)?)
    }

    fn add(self, other: Self) -> Option<Self> {
        let exp = self.exp.min(other.exp);
        Some(Self { mantissa: self.rescale(exp)?.checked_add(other.rescale(exp)?)?, exp })
    }

    fn mul(self, other: Self) -> Option<Self> {
        Some(Self { mantissa: self.mantissa.checked_mul(other.mantissa)?, exp: self.exp + other.exp })
    }

    fn neg(self) -> Self {
        Self { mantissa: -self.mantissa, exp: self.exp }
    }

    fn to_f64(self) -> f64 {
        format!("{}e{}", self.mantissa, self.exp).parse().expect("decimal parses")
    }
}

/// Quantile of ascending `sorted` by linear interpolation at `p * (n - 1)`.
///
/// `lo + w * (hi - lo)` is evaluated exactly on the shortest decimal forms
/// of its operands, so decimal inputs give the decimal answer
/// (`{0.6, 0.7, 0.8, 0.9}` has first quartile exactly `0.675`).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    if w == 0.0 || a == b {
        return a;
    }
    let exact = || {
        let (da, db, dw) = (Decimal::from_f64(a), Decimal::from_f64(b), Decimal::from_f64(w));
        da.add(dw.mul(db.add(da.neg())?)?)
    };
    // extreme exponent spreads overflow i128; fall back to binary arithmetic
    exact().map_or_else(|| a + w * (b - a), Decimal::to_f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
            min: s[0],
            max: s[s.len() - 1],
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Bags of a manifest, loaded once and shared by every trial.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<SlideBag<f32>>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, bags: Vec<SlideBag<f32>>) -> Result<Self> {
        manifest.validate()?;
        if bags.len() != manifest.slides.len() {
            return Err(Error::DimensionMismatch { expected: manifest.slides.len(), found: bags.len() });
        }
        let bags = bags
            .into_iter()
            .zip(&manifest.slides)
            .map(|(b, s)| if b.label().is_some() { b } else { b.with_label(s.label) })
            .collect();
        Ok(Self { manifest, bags })
    }

    /// Loads every slide of an already-resolved manifest, in parallel.
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let bags = manifest
            .slides
            .par_iter()
            .map(|s| {
                read_bag_with_limits(&s.path, &s.slide_id, ReadLimits::default())
                    .map(|b| b.with_label(s.label))
                    .map_err(|e| e.in_slide(&s.slide_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, bags })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_index: usize,
    pub trial_seed: u64,
    pub templates: Vec<String>,
    pub classnames: Vec<Vec<String>>,
    pub balanced_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<SlidePrediction>,
}

/// Classifies every slide with the trial's classifier.
pub fn run_trial(
    data: &Dataset,
    pool: &PromptPool,
    table: &TextEmbeddingTable<f32>,
    trial: &PromptTrial,
    cfg: &PoolConfig,
) -> Result<TrialResult> {
    cfg.validate()?;
    let classes = &data.manifest.classes;
    let pool = if pool.class_labels() == *classes { pool.clone() } else { pool.reordered(classes)? };
    let clf = build_classifier(trial, &pool, table)?;
    let predictions = data
        .bags
        .par_iter()
        .map(|bag| classify_slide(bag, &clf, cfg).map_err(|e| e.in_slide(bag.slide_id())))
        .collect::<Result<Vec<_>>>()?;
    let c = classes.len();
    let mut confusion = vec![vec![0u64; c]; c];
    for (p, s) in predictions.iter().zip(&data.manifest.slides) {
        confusion[s.label][p.predicted_class] += 1;
    }
    let balanced_accuracy = balanced_accuracy(&confusion).map_err(|e| match e {
        Error::EmptyClass { class } => {
            let idx: usize = class.parse().unwrap_or(0);
            Error::EmptyClass { class: classes.get(idx).cloned().unwrap_or(class) }
        }
        e => e,
    })?;
    Ok(TrialResult {
        trial_index: 0,
        trial_seed: trial.trial_seed,
        templates: trial.templates.clone(),
        classnames: trial.classnames.clone(),
        balanced_accuracy,
        confusion,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub prng: String,
    pub quantile_rule: String,
    pub master_seed: u64,
    pub n_trials: usize,
    pub pool_config: PoolConfig,
    pub classname_subsets: bool,
    pub pool_hash: String,
    pub classes: Vec<String>,
    pub n_slides: usize,
    pub summary: Summary,
    pub trials: Vec<TrialResult>,
    /// Caller-supplied provenance (input digests, command line).
    #[serde(default)]
    pub inputs: serde_json::Value,
}

impl EvalReport {
    /// Recomputes every derived number from the per-trial data.
    pub fn verify(&self) -> Result<()> {
        if self.trials.len() != self.n_trials || self.n_trials == 0 {
            return Err(Error::InvalidData("trial count disagrees with the trial list".into()));
        }
        for t in &self.trials {
            if balanced_accuracy(&t.confusion)? != t.balanced_accuracy {
                return Err(Error::InvalidData(format!(
                    "trial {} accuracy disagrees with its confusion matrix",
                    t.trial_index
                )));
            }
        }
        let accs: Vec<f64> = self.trials.iter().map(|t| t.balanced_accuracy).collect();
        if Summary::of(&accs) != self.summary {
            return Err(Error::InvalidData("summary statistics disagree with trials".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(src)?;
        r.verify()?;
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::from(e).in_file(path))
    }

    /// `trial,trial_seed,n_templates,balanced_accuracy`, one line per trial.
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,trial_seed,n_templates,balanced_accuracy\n");
        for t in &self.trials {
            writeln!(out, "{},{},{},{}", t.trial_index, t.trial_seed, t.templates.len(), t.balanced_accuracy)
                .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_trials: usize,
    pub master_seed: u64,
    pub pool_config: PoolConfig,
    pub sampling: SamplingOptions,
}

/// Samples prompt trials, runs each, and assembles the report in trial order.
pub fn run_evaluation(
    data: &Dataset,
    pool: &PromptPool,
    table: &TextEmbeddingTable<f32>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.pool_config.validate()?;
    let pool = pool.reordered(&data.manifest.classes)?;
    let trials = sample_trials_with(&pool, opts.n_trials, opts.master_seed, opts.sampling)?;
    let results = trials
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            run_trial(data, &pool, table, t, &opts.pool_config).map(|mut r| {
                r.trial_index = i;
                r
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = results.iter().map(|r| r.balanced_accuracy).collect();
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        prng: PRNG_ID.into(),
        quantile_rule: QUANTILE_RULE.into(),
        master_seed: opts.master_seed,
        n_trials: opts.n_trials,
        pool_config: opts.pool_config,
        classname_subsets: opts.sampling.classname_subsets,
        pool_hash: pool.hash(),
        classes: data.manifest.classes.clone(),
        n_slides: data.bags.len(),
        summary: Summary::of(&accs),
        trials: results,
        inputs: serde_json::Value::Null,
    };
    report.verify()?;
    Ok(report)
}
