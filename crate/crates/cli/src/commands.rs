use std::fs;
use std::path::{Path, PathBuf};

use mizero_core::align::{
    batch_loss, loss_trace_csv, retrieval_top1, train, AlignmentModel, LrSchedule, ModelFile,
    TemperatureReading, TemperatureRecord, TrainConfig,
};
use mizero_core::eval::{balanced_accuracy, run_evaluation, Dataset, EvalOptions, EvalReport, Summary};
use mizero_core::io::{
    decode_bag, read_bag, read_classifier, read_manifest, read_pairs, read_text_table, sha256_hex,
    write_classifier, write_pairs, write_text_table, ReadLimits,
};
use mizero_core::prompts::{build_classifier, sample_trial, PromptPool, SamplingOptions};
use mizero_core::spatial::{build_knn, smooth};
use mizero_core::synth::{make_paired_latent, make_planted_dataset, make_text_table, synthetic_pool, PlantedBagSpec};
use mizero_core::zeroshot::{classify_slide, score_bag, score_map_csv, PoolConfig, SlidePrediction};
use mizero_core::{DatasetManifest, Error, SlideBag};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::{bench, Result};

pub const PREDICTIONS_FORMAT: &str = "mizero-predictions/1";
pub const SWEEP_FORMAT: &str = "mizero-eval-sweep/1";
const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::BuildClassifier(a) => build_classifier_cmd(a),
        Command::Align(a) => align(a),
        Command::ScoreMap(a) => score_map(a),
        Command::Bench(a) => bench::run(a),
        Command::Synth(SynthCommand::Planted(a)) => synth_planted(a),
        Command::Synth(SynthCommand::Pairs(a)) => synth_pairs(a),
    }
}

/// Input files and parameters of one run. Echoed to standard error and
/// embedded in every output document. Thread counts and output paths are
/// left out so that outputs are byte-identical across runs.
struct Provenance {
    command: &'static str,
    seed: Option<u64>,
    params: Value,
    files: Vec<(String, PathBuf, String)>,
}

impl Provenance {
    fn new(command: &'static str, seed: Option<u64>, params: Value) -> Self {
        Self { command, seed, params, files: Vec::new() }
    }

    fn file(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        self.files.push((name.to_owned(), path.to_owned(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn digest(&mut self, name: &str, path: &Path, sha: String) {
        self.files.push((name.to_owned(), path.to_owned(), sha));
    }

    fn banner(&self) {
        let seed = self.seed.map_or_else(|| "-".to_owned(), |s| s.to_string());
        let mut line = format!("mizero {VERSION} {} seed={seed}", self.command);
        for (name, _, sha) in &self.files {
            line.push_str(&format!(" {name}.sha256={sha}"));
        }
        eprintln!("{line}");
    }

    fn to_value(&self) -> Value {
        let files: serde_json::Map<String, Value> = self
            .files
            .iter()
            .map(|(name, path, sha)| (name.clone(), json!({ "path": path, "sha256": sha })))
            .collect();
        json!({
            "tool": format!("mizero {VERSION}"),
            "command": self.command,
            "seed": self.seed,
            "params": self.params,
            "files": files,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    write_text(path, &s)
}

/// Reads the manifest and every bag it lists; bag bytes are hashed as they
/// are decoded so each file is read once.
fn load_dataset(path: &Path, prov: &mut Provenance) -> Result<Dataset> {
    prov.file("manifest", path)?;
    let manifest: DatasetManifest = read_manifest(path)?;
    let loaded = manifest
        .slides
        .par_iter()
        .map(|s| {
            let bytes = fs::read(&s.path).map_err(|e| Error::from(e).in_file(&s.path))?;
            let bag = decode_bag(&bytes, &s.slide_id, ReadLimits::default())
                .map_err(|e| e.in_file(&s.path).in_slide(&s.slide_id))?;
            Ok((bag.with_label(s.label), sha256_hex(&bytes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut listing = String::new();
    for (s, (_, sha)) in manifest.slides.iter().zip(&loaded) {
        listing.push_str(&format!("{} {sha}\n", s.slide_id));
    }
    prov.digest("bags", path, sha256_hex(listing.as_bytes()));
    Dataset::new(manifest, loaded.into_iter().map(|(b, _)| b).collect())
}

fn load_pool(src: &PoolSource, prov: &mut Provenance) -> Result<PromptPool> {
    match (&src.pool_file, src.task) {
        (Some(path), _) => {
            let bytes = prov.file("pool", path)?;
            let text = String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()).in_file(path))?;
            PromptPool::from_json(&text).map_err(|e| e.in_file(path))
        }
        (None, Some(task)) => Ok(PromptPool::for_task(task.into())),
        (None, None) => Err(Error::InvalidArgument("one of --pool-file or --task is required".into())),
    }
}

#[derive(Serialize)]
/// `label` and `predicted_label` index the manifest classes; the flattened
/// `predicted_class` indexes the classifier rows.
struct LabeledPrediction<'a> {
    slide_id: &'a str,
    label: usize,
    label_name: &'a str,
    predicted_label: usize,
    predicted_name: &'a str,
    #[serde(flatten)]
    prediction: &'a SlidePrediction,
}

#[derive(Serialize)]
struct PredictionsDoc<'a> {
    format: &'static str,
    classes: &'a [String],
    pool_config: PoolConfig,
    balanced_accuracy: Option<f64>,
    confusion: Vec<Vec<u64>>,
    predictions: Vec<LabeledPrediction<'a>>,
    inputs: Value,
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let cfg = a.pooling.config();
    cfg.validate()?;
    let mut prov = Provenance::new("classify", None, json!({ "pool_config": cfg }));
    prov.file("classifier", &a.classifier)?;
    let clf = read_classifier(&a.classifier)?;
    let data = load_dataset(&a.manifest, &mut prov)?;
    prov.banner();
    let classes = &data.manifest.classes;
    // Classifier rows may list the classes in another order; predictions
    // are reported in manifest class indices.
    let to_manifest: Vec<usize> = clf
        .class_labels()
        .iter()
        .map(|l| {
            classes.iter().position(|c| c == l).ok_or_else(|| {
                Error::InvalidData(format!("classifier class {l:?} is not a manifest class"))
            })
        })
        .collect::<Result<_>>()?;
    if to_manifest.len() != classes.len() {
        return Err(Error::DimensionMismatch { expected: classes.len(), found: to_manifest.len() });
    }
    let preds = data
        .bags
        .par_iter()
        .map(|bag| classify_slide(bag, &clf, &cfg).map_err(|e| e.in_slide(bag.slide_id())))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    let mut labeled = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(&data.manifest.slides) {
        let predicted = to_manifest[p.predicted_class];
        confusion[s.label][predicted] += 1;
        labeled.push(LabeledPrediction {
            slide_id: &s.slide_id,
            label: s.label,
            label_name: &classes[s.label],
            predicted_label: predicted,
            predicted_name: &classes[predicted],
            prediction: p,
        });
    }
    let bacc = balanced_accuracy(&confusion).ok();
    let doc = PredictionsDoc {
        format: PREDICTIONS_FORMAT,
        classes,
        pool_config: cfg,
        balanced_accuracy: bacc,
        confusion,
        predictions: labeled,
        inputs: prov.to_value(),
    };
    write_json(&a.out, &doc)?;
    match bacc {
        Some(b) => eprintln!("classified {} slides, balanced accuracy {b:.4}", preds.len()),
        None => eprintln!("classified {} slides", preds.len()),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepDoc {
    format: &'static str,
    k_values: Vec<usize>,
    reports: Vec<EvalReport>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let configs: Vec<PoolConfig> = if a.k_sweep {
        K_SWEEP
            .iter()
            .map(|&k| {
                let cfg = PoolConfig::topk(k);
                if a.pooling.smooth { cfg.with_smoothing(a.pooling.knn) } else { cfg }
            })
            .collect()
    } else {
        vec![a.pooling.config()]
    };
    for c in &configs {
        c.validate()?;
    }
    if a.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be at least 1".into()));
    }
    let sampling = SamplingOptions { classname_subsets: a.classname_subsets };
    let params = json!({
        "trials": a.trials,
        "pool_configs": configs,
        "classname_subsets": a.classname_subsets,
        "k_sweep": a.k_sweep,
    });
    let mut prov = Provenance::new("evaluate", Some(a.seed), params);
    let pool = load_pool(&a.pool_source, &mut prov)?;
    prov.file("text_table", &a.text_table)?;
    let table = read_text_table(&a.text_table)?;
    let data = load_dataset(&a.manifest, &mut prov)?;
    prov.banner();
    let inputs = prov.to_value();
    let mut reports = Vec::with_capacity(configs.len());
    for cfg in configs {
        let opts = EvalOptions { n_trials: a.trials, master_seed: a.seed, pool_config: cfg, sampling };
        let mut report = run_evaluation(&data, &pool, &table, &opts)?;
        report.inputs = inputs.clone();
        let s: &Summary = &report.summary;
        eprintln!(
            "{}: median balanced accuracy {:.4} (IQR {:.4}-{:.4}) over {} trials",
            describe(&cfg),
            s.median,
            s.q1,
            s.q3,
            report.n_trials
        );
        reports.push(report);
    }
    if a.k_sweep {
        write_json(&a.report, &SweepDoc { format: SWEEP_FORMAT, k_values: K_SWEEP.to_vec(), reports: reports.clone() })?;
    } else {
        reports[0].write(&a.report)?;
    }
    if let Some(path) = &a.trials_csv {
        let mut csv = String::from("k,trial,trial_seed,n_templates,balanced_accuracy\n");
        for r in &reports {
            let k = match r.pool_config.pooling {
                mizero_core::zeroshot::PoolMethod::TopK { k } => k.to_string(),
                mizero_core::zeroshot::PoolMethod::Mean => "all".to_owned(),
            };
            for line in r.trials_csv().lines().skip(1) {
                csv.push_str(&format!("{k},{line}\n"));
            }
        }
        write_text(path, &csv)?;
    }
    Ok(())
}

fn describe(cfg: &PoolConfig) -> String {
    let base = match cfg.pooling {
        mizero_core::zeroshot::PoolMethod::Mean => "mean".to_owned(),
        mizero_core::zeroshot::PoolMethod::TopK { k } => format!("topk k={k}"),
    };
    match cfg.smoothing {
        Some(knn) => format!("{base} + smoothing knn={knn}"),
        None => base,
    }
}

fn build_classifier_cmd(a: BuildClassifierArgs) -> Result<()> {
    let sampling = SamplingOptions { classname_subsets: a.classname_subsets };
    let params = json!({ "classname_subsets": a.classname_subsets });
    let mut prov = Provenance::new("build-classifier", Some(a.trial_seed), params);
    let pool = load_pool(&a.pool_source, &mut prov)?;
    pool.validate()?;
    prov.file("text_table", &a.text_table)?;
    let table = read_text_table(&a.text_table)?;
    prov.banner();
    let trial = sample_trial(&pool, a.trial_seed, sampling);
    let clf = build_classifier(&trial, &pool, &table)?;
    write_classifier(&clf, &a.out)?;
    eprintln!("classifier with {} classes from {} templates", clf.n_classes(), trial.templates.len());
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let reading = if a.literal_temp { TemperatureReading::Literal } else { TemperatureReading::Divisor };
    if !(a.temp > 0.0 && a.temp.is_finite()) {
        return Err(Error::InvalidArgument(format!("--temp must be positive, got {}", a.temp)));
    }
    let cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        max_steps: a.max_steps,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        schedule: match a.cosine_warmup {
            Some(warmup_steps) => LrSchedule::Cosine { warmup_steps },
            None => LrSchedule::Constant,
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    let params = json!({
        "dim_shared": a.dim_shared,
        "temperature": a.temp,
        "reading": reading,
        "train_tau": a.train_tau,
        "use_bias": !a.no_bias,
        "train": cfg,
    });
    let mut prov = Provenance::new("align", Some(a.seed), params);
    prov.file("pairs", &a.pairs)?;
    let data = read_pairs(&a.pairs)?.cast::<f64>();
    cfg.validate(data.len())?;
    prov.banner();
    let tau = reading.multiplier(a.temp);
    let mut model = AlignmentModel::init(data.images.cols(), data.texts.cols(), a.dim_shared, tau, a.seed)?;
    model.tau_trainable = a.train_tau;
    model.use_bias = !a.no_bias;
    let before = batch_loss(&model, &data)?;
    let out = train(&model, &data, &cfg)?;
    let after = batch_loss(&out.model, &data)?;
    let top1 = retrieval_top1(&out.model, &data)?;
    let file = ModelFile::from_model(&out.model, Some(TemperatureRecord { value: a.temp, reading }), prov.to_value());
    file.write(&a.out)?;
    let trace = a.loss_trace.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_text(&trace, &loss_trace_csv(&out.losses))?;
    eprintln!(
        "{} steps; training loss {before:.4} -> {after:.4}; training retrieval top-1 {top1:.3}",
        out.losses.len()
    );
    Ok(())
}

fn score_map(a: ScoreMapArgs) -> Result<()> {
    let mut prov = Provenance::new("score-map", None, json!({ "smooth": a.smooth, "knn": a.knn }));
    prov.file("bag", &a.bag)?;
    prov.file("classifier", &a.classifier)?;
    prov.banner();
    let bag: SlideBag = read_bag(&a.bag)?;
    let clf = read_classifier(&a.classifier)?;
    let mut scores = score_bag(&bag, &clf)?;
    if a.smooth {
        let coords = bag.coords().ok_or_else(|| Error::MissingCoords(bag.slide_id().into()))?;
        scores = smooth(&scores, &build_knn(coords, a.knn))?;
    }
    write_text(&a.out, &score_map_csv(&bag, &scores)?)
}

fn synth_planted(a: SynthPlantedArgs) -> Result<()> {
    let spec = PlantedBagSpec {
        n_patches: a.n,
        dim: a.dim,
        signal_fraction: a.signal_fraction,
        noise_sigma: a.sigma,
        class: 0,
        seed: 0,
    };
    spec.validate()?;
    if a.names_per_class == 0 {
        return Err(Error::InvalidArgument("--names-per-class must be at least 1".into()));
    }
    let prov = Provenance::new("synth planted", Some(a.seed), json!({}));
    prov.banner();
    let specs = vec![spec; a.classes];
    let mut planted = make_planted_dataset(a.classes, &specs, a.slides_per_class, a.seed)?;
    if a.no_coords {
        planted.bags = planted
            .bags
            .iter()
            .map(|b| {
                let bag = SlideBag::new(b.slide_id(), b.embeddings().clone(), None)?;
                Ok(match b.label() {
                    Some(l) => bag.with_label(l),
                    None => bag,
                })
            })
            .collect::<Result<_>>()?;
    }
    let manifest = planted.write(&a.out_dir)?;
    let pool = synthetic_pool(a.classes, a.names_per_class);
    write_text(&a.out_dir.join("pool.json"), &pool.to_json())?;
    let table = make_text_table(&pool, &planted.directions, a.text_noise, a.seed)?;
    write_text_table(&table, a.out_dir.join("text_table.jsonl"))?;
    eprintln!("wrote {} slides to {}", planted.bags.len(), manifest.display());
    Ok(())
}

fn synth_pairs(a: SynthPairsArgs) -> Result<()> {
    let prov = Provenance::new("synth pairs", Some(a.seed), json!({}));
    prov.banner();
    let (set, _) = make_paired_latent::<f32>(a.m, a.d_img, a.d_txt, a.d_latent, a.noise, a.seed)?;
    write_pairs(&set, &a.out)?;
    eprintln!("wrote {} pairs to {}", set.len(), a.out.display());
    Ok(())
}
