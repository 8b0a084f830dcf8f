use mizero_core::eval::{balanced_accuracy, run_evaluation, run_trial, Dataset, EvalOptions, EvalReport, Summary};
use mizero_core::prompts::{sample_trials, SamplingOptions};
use mizero_core::rng::SplitMix64;
use mizero_core::synth::{make_planted_dataset, make_text_table, synthetic_pool, PlantedBagSpec};
use mizero_core::zeroshot::PoolConfig;
use mizero_core::{Matrix, SlideBag};

#[test]
fn balanced_accuracy_examples() {
    assert_eq!(balanced_accuracy(&[vec![5, 0], vec![0, 7]]).unwrap(), 1.0);
    assert_eq!(balanced_accuracy(&[vec![50, 50], vec![0, 100]]).unwrap(), 0.75);
    assert_eq!(balanced_accuracy(&[vec![1, 0], vec![0, 0]]).unwrap_err().kind(), "EmptyClass");
}

#[test]
fn uniform_guessing_scores_one_third() {
    let mut rng = SplitMix64::new(31);
    let mut total = 0.0;
    for _ in 0..1000 {
        let mut conf = vec![vec![0u64; 3]; 3];
        for row in conf.iter_mut() {
            for _ in 0..30 {
                row[rng.below_usize(3)] += 1;
            }
        }
        total += balanced_accuracy(&conf).unwrap();
    }
    let mean = total / 1000.0;
    assert!((mean - 1.0 / 3.0).abs() <= 0.02, "{mean}");
}

#[test]
fn relabeling_classes_keeps_balanced_accuracy() {
    let conf = vec![vec![7, 2, 1], vec![3, 3, 4], vec![0, 1, 9]];
    let perm = [2, 0, 1];
    let mut relabeled = vec![vec![0u64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            relabeled[perm[i]][perm[j]] = conf[i][j];
        }
    }
    assert_eq!(balanced_accuracy(&conf).unwrap(), balanced_accuracy(&relabeled).unwrap());
}

#[test]
fn quartile_rule() {
    let s = Summary::of(&[0.9, 0.6, 0.8, 0.7]);
    assert_eq!((s.q1, s.median, s.q3), (0.675, 0.75, 0.825));
    assert_eq!((s.min, s.max), (0.6, 0.9));
    let one = Summary::of(&[0.42]);
    assert_eq!((one.q1, one.median, one.q3), (0.42, 0.42, 0.42));
}

fn separable_fixture(slides_per_class: usize, seed: u64) -> (Dataset, mizero_core::prompts::PromptPool, mizero_core::TextEmbeddingTable) {
    let spec = PlantedBagSpec { n_patches: 60, dim: 12, signal_fraction: 0.5, noise_sigma: 0.1, class: 0, seed: 0 };
    let planted = make_planted_dataset(2, &[spec, spec], slides_per_class, seed).unwrap();
    let pool = synthetic_pool(2, 3);
    let table = make_text_table(&pool, &planted.directions, 0.05, seed).unwrap();
    (Dataset::new(planted.manifest, planted.bags).unwrap(), pool, table)
}

#[test]
fn separable_bags_score_perfectly() {
    let (data, pool, table) = separable_fixture(10, 1);
    for trial in sample_trials(&pool, 5, 3).unwrap() {
        let r = run_trial(&data, &pool, &table, &trial, &PoolConfig::topk(10)).unwrap();
        assert_eq!(r.balanced_accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![10, 0], vec![0, 10]]);
    }
}

#[test]
fn all_zero_scores_predict_class_zero() {
    let (data, pool, table) = separable_fixture(4, 2);
    // Embeddings supported on extra coordinates are orthogonal to every prompt.
    let bags: Vec<SlideBag> = data
        .bags
        .iter()
        .map(|b| {
            let mut e = Matrix::zeros(b.len(), 24);
            for i in 0..b.len() {
                e.row_mut(i)[12..].copy_from_slice(b.embeddings().row(i));
            }
            SlideBag::new(b.slide_id(), e, None).unwrap()
        })
        .collect();
    let mut wide = mizero_core::TextEmbeddingTable::new(24);
    for (text, e) in table.iter() {
        let mut v = e.to_vec();
        v.extend(std::iter::repeat_n(0.0, 12));
        wide.insert(text, v).unwrap();
    }
    let data = Dataset::new(data.manifest.clone(), bags).unwrap();
    let trial = &sample_trials(&pool, 1, 0).unwrap()[0];
    for cfg in [PoolConfig::mean(), PoolConfig::topk(5)] {
        let r = run_trial(&data, &pool, &wide, trial, &cfg).unwrap();
        assert!(r.predictions.iter().all(|p| p.predicted_class == 0));
        assert_eq!(r.balanced_accuracy, 0.5);
    }
}

#[test]
fn manifest_order_does_not_change_confusion() {
    let spec = PlantedBagSpec { n_patches: 80, dim: 8, signal_fraction: 0.05, noise_sigma: 0.3, class: 0, seed: 0 };
    let planted = make_planted_dataset(2, &[spec, spec], 15, 5).unwrap();
    let pool = synthetic_pool(2, 3);
    let table = make_text_table(&pool, &planted.directions, 0.3, 5).unwrap();
    let mut order: Vec<usize> = (0..planted.bags.len()).collect();
    SplitMix64::new(8).shuffle(&mut order);
    let mut manifest = planted.manifest.clone();
    manifest.slides = order.iter().map(|&i| planted.manifest.slides[i].clone()).collect();
    let bags = order.iter().map(|&i| planted.bags[i].clone()).collect();
    let a = Dataset::new(planted.manifest.clone(), planted.bags.clone()).unwrap();
    let b = Dataset::new(manifest, bags).unwrap();
    for trial in sample_trials(&pool, 5, 1).unwrap() {
        let ra = run_trial(&a, &pool, &table, &trial, &PoolConfig::mean()).unwrap();
        let rb = run_trial(&b, &pool, &table, &trial, &PoolConfig::mean()).unwrap();
        assert_eq!(ra.confusion, rb.confusion);
    }
}

fn options(n_trials: usize) -> EvalOptions {
    EvalOptions {
        n_trials,
        master_seed: 12,
        pool_config: PoolConfig::topk(5).with_smoothing(8),
        sampling: SamplingOptions::default(),
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let (data, pool, table) = separable_fixture(6, 4);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_evaluation(&data, &pool, &table, &options(20)).unwrap().to_json())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

#[test]
fn report_round_trip_and_self_check() {
    let (data, pool, table) = separable_fixture(3, 6);
    let report = run_evaluation(&data, &pool, &table, &options(7)).unwrap();
    let text = report.to_json();
    let back = EvalReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json(), text);
    assert_eq!(report.trials_csv().lines().count(), 8);

    let mut tampered = report.clone();
    tampered.summary.median += 0.01;
    assert_eq!(EvalReport::from_json(&tampered.to_json()).unwrap_err().kind(), "InvalidData");
}

#[test]
fn pool_of_size_one_has_zero_spread() {
    let (data, _, table) = separable_fixture(3, 7);
    let mut pool = synthetic_pool(2, 1);
    pool.templates.truncate(1);
    let report = run_evaluation(&data, &pool, &table, &options(50)).unwrap();
    assert_eq!(report.summary.iqr(), 0.0);
}
