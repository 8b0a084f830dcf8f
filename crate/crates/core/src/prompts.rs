//! Prompt pools, seeded prompt-trial sampling and embedding-space ensembling.
//!
//! A trial draws `n ~ Uniform{1..=|templates|}` templates without
//! replacement (kept in pool order and shared by all classes) and one
//! classname per class, all from the sub-stream `derive_seed(master, t)`.
//! The draw order within a trial is: template count, template indices,
//! then classnames class by class.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, TextEmbeddingTable};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::types::{normalize_f64, ClassProvenance, ZeroShotClassifier};

pub const PLACEHOLDER: &str = "CLASSNAME";

/// Trial count used by the evaluation protocol.
pub const DEFAULT_TRIALS: usize = 50;

pub const DEFAULT_TEMPLATES: [&str; 16] = [
    "CLASSNAME.",
    "a photomicrograph showing CLASSNAME.",
    "a photomicrograph of CLASSNAME.",
    "an image of CLASSNAME.",
    "an image showing CLASSNAME.",
    "an example of CLASSNAME.",
    "CLASSNAME is shown.",
    "this is CLASSNAME.",
    "there is CLASSNAME.",
    "a histopathological image showing CLASSNAME.",
    "a histopathological image of CLASSNAME.",
    "a histopathological photograph of CLASSNAME.",
    "a histopathological photograph showing CLASSNAME.",
    "shows CLASSNAME.",
    "presence of CLASSNAME.",
    "CLASSNAME is present.",
];

/// Built-in cancer subtyping tasks with their classname pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Brca,
    Nsclc,
    Rcc,
}

impl Task {
    fn classnames(self) -> Vec<(&'static str, Vec<&'static str>)> {
        match self {
            Task::Brca => vec![
                ("IDC", vec!["invasive ductal carcinoma", "carcinoma of the breast, ductal pattern"]),
                ("ILC", vec!["invasive lobular carcinoma", "carcinoma of the breast, lobular pattern"]),
            ],
            Task::Nsclc => vec![
                (
                    "LUAD",
                    vec![
                        "adenocarcinoma",
                        "lung adenocarcinoma",
                        "adenocarcinoma of the lung",
                        "pulmonary adenocarcinoma",
                        "adenocarcinoma, lepidic pattern",
                        "adenocarcinoma, solid pattern",
                        "adenocarcinoma, micropapillary pattern",
                        "adenocarcinoma, acinar pattern",
                        "adenocarcinoma, papillary pattern",
                    ],
                ),
                (
                    "LUSC",
                    vec![
                        "squamous cell carcinoma",
                        "lung squamous cell carcinoma",
                        "squamous cell carcinoma of the lung",
                        "pulmonary squamous cell carcinoma",
                    ],
                ),
            ],
            Task::Rcc => vec![
                (
                    "CCRCC",
                    vec![
                        "clear cell renal cell carcinoma",
                        "renal cell carcinoma, clear cell type",
                        "renal cell carcinoma of the clear cell type",
                        "clear cell RCC",
                    ],
                ),
                (
                    "PRCC",
                    vec![
                        "papillary renal cell carcinoma",
                        "renal cell carcinoma, papillary type",
                        "renal cell carcinoma of the papillary type",
                        "papillary RCC",
                    ],
                ),
                (
                    "CHRCC",
                    vec![
                        "chromophobe renal cell carcinoma",
                        "renal cell carcinoma, chromophobe type",
                        "renal cell carcinoma of the chromophobe type",
                        "chromophobe RCC",
                    ],
                ),
            ],
        }
    }
}

/// Templates plus per-class classname lists. Class order is significant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPool {
    pub templates: Vec<String>,
    pub classnames: IndexMap<String, Vec<String>>,
}

impl PromptPool {
    pub fn new(templates: Vec<String>, classnames: IndexMap<String, Vec<String>>) -> Result<Self> {
        let pool = Self { templates, classnames };
        pool.validate()?;
        Ok(pool)
    }

    /// The 16 default templates with a built-in task's classnames.
    pub fn for_task(task: Task) -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            classnames: task
                .classnames()
                .into_iter()
                .map(|(c, names)| (c.to_string(), names.into_iter().map(String::from).collect()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::EmptyPool("no templates".into()));
        }
        if self.classnames.is_empty() {
            return Err(Error::EmptyPool("no classes".into()));
        }
        for t in &self.templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::BadTemplate(t.clone()));
            }
        }
        for (class, names) in &self.classnames {
            if names.is_empty() {
                return Err(Error::EmptyPool(format!("class {class:?} has no classnames")));
            }
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Vec<String> {
        self.classnames.keys().cloned().collect()
    }

    /// Same pool with classes reordered to `order`; every label must exist.
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        let mut classnames = IndexMap::new();
        for c in order {
            let names = self.classnames.get(c).ok_or_else(|| {
                Error::InvalidData(format!("class {c:?} is missing from the prompt pool"))
            })?;
            classnames.insert(c.clone(), names.clone());
        }
        if classnames.len() != self.classnames.len() {
            return Err(Error::InvalidData("prompt pool has classes the dataset lacks".into()));
        }
        Ok(Self { templates: self.templates.clone(), classnames })
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("pool serializes").as_bytes())
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let pool: Self = serde_json::from_str(src)?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_json(&src).map_err(|e| e.in_file(path))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pool serializes");
        s.push('\n');
        s
    }
}

/// One sampled prompt configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTrial {
    pub trial_seed: u64,
    pub templates: Vec<String>,
    /// Per class, the classnames substituted into every template.
    pub classnames: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplingOptions {
    /// Ensemble a random non-empty subset of each class's classnames
    /// instead of a single one.
    pub classname_subsets: bool,
}

pub fn instantiate(template: &str, classname: &str) -> String {
    template.replacen(PLACEHOLDER, classname, 1)
}

/// Draws one trial from its own seed.
pub fn sample_trial(pool: &PromptPool, trial_seed: u64, opts: SamplingOptions) -> PromptTrial {
    let mut rng = SplitMix64::new(trial_seed);
    let n_templates = pool.templates.len();
    let count = 1 + rng.below_usize(n_templates);
    let mut picked = rng.sample_without_replacement(n_templates, count);
    picked.sort_unstable();
    let templates = picked.into_iter().map(|i| pool.templates[i].clone()).collect();
    let classnames = pool
        .classnames
        .values()
        .map(|names| {
            if opts.classname_subsets {
                let count = 1 + rng.below_usize(names.len());
                let mut idx = rng.sample_without_replacement(names.len(), count);
                idx.sort_unstable();
                idx.into_iter().map(|i| names[i].clone()).collect()
            } else {
                vec![names[rng.below_usize(names.len())].clone()]
            }
        })
        .collect();
    PromptTrial { trial_seed, templates, classnames }
}

pub fn sample_trials(pool: &PromptPool, n_trials: usize, master_seed: u64) -> Result<Vec<PromptTrial>> {
    sample_trials_with(pool, n_trials, master_seed, SamplingOptions::default())
}

/// Trial `t` is drawn from `derive_seed(master_seed, t)`.
pub fn sample_trials_with(
    pool: &PromptPool,
    n_trials: usize,
    master_seed: u64,
    opts: SamplingOptions,
) -> Result<Vec<PromptTrial>> {
    pool.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    Ok((0..n_trials)
        .map(|t| sample_trial(pool, derive_seed(master_seed, t as u64), opts))
        .collect())
}

/// `normalize(mean_t normalize(embedding(t)))`, in `f64`.
pub fn ensemble_class<T: Scalar, S: AsRef<str>>(
    texts: &[S],
    table: &TextEmbeddingTable<T>,
) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(Error::EmptyPool("no prompts to ensemble".into()));
    }
    let mut acc = vec![0.0f64; table.dim()];
    for t in texts {
        let t = t.as_ref();
        let e = table.get(t).ok_or_else(|| Error::MissingText(t.to_owned()))?;
        let e: Vec<f64> = e.iter().map(|x| x.to_f64_lossless()).collect();
        for (a, u) in acc.iter_mut().zip(normalize_f64(&e)?) {
            *a += u;
        }
    }
    let n = texts.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    normalize_f64(&acc)
}

/// Classifier whose row `c` ensembles the trial's templates filled with
/// class `c`'s chosen classnames.
pub fn build_classifier<T: Scalar>(
    trial: &PromptTrial,
    pool: &PromptPool,
    table: &TextEmbeddingTable<T>,
) -> Result<ZeroShotClassifier<T>> {
    let c = pool.classnames.len();
    if trial.classnames.len() != c {
        return Err(Error::DimensionMismatch { expected: c, found: trial.classnames.len() });
    }
    let mut weights = Matrix::zeros(c, table.dim());
    let mut provenance = Vec::with_capacity(c);
    for (row, names) in trial.classnames.iter().enumerate() {
        let texts: Vec<String> = names
            .iter()
            .flat_map(|n| trial.templates.iter().map(move |t| instantiate(t, n)))
            .collect();
        let w = ensemble_class(&texts, table)?;
        for (dst, v) in weights.row_mut(row).iter_mut().zip(w) {
            *dst = T::from_f64_rounded(v);
        }
        provenance.push(ClassProvenance { classnames: names.clone(), templates: trial.templates.clone() });
    }
    ZeroShotClassifier::new(pool.class_labels(), weights, provenance, Some(trial.trial_seed))
}
