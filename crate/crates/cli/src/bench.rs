//! Load-versus-compute timing on a synthetic bag.
//!
//! Each iteration reads the bag file, decodes it (row norms included), then
//! scores it against a C-class classifier and topK-pools the scores. The
//! phases are timed separately.

use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use mizero_core::io::{decode_bag, write_bag, ReadLimits};
use mizero_core::rng::SplitMix64;
use mizero_core::zeroshot::{score_bag, topk_pool};
use mizero_core::{Error, Matrix, SlideBag, ZeroShotClassifier};
use serde::Serialize;

use crate::args::BenchArgs;
use crate::Result;

#[derive(Debug, Serialize)]
struct Phase {
    min_ms: f64,
    median_ms: f64,
    mean_ms: f64,
    max_ms: f64,
}

impl Phase {
    fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self { min_ms: s[0], median_ms: median, mean_ms: s.iter().sum::<f64>() / n as f64, max_ms: s[n - 1] }
    }
}

#[derive(Debug, Serialize)]
struct BenchReport {
    format: &'static str,
    n: usize,
    d: usize,
    c: usize,
    k: usize,
    iters: usize,
    threads: usize,
    file_bytes: u64,
    cold_cache: bool,
    read: Phase,
    decode: Phase,
    load: Phase,
    score: Phase,
    pool: Phase,
    compute: Phase,
    /// Median load time over median load+compute time.
    io_fraction: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn synthetic_inputs(a: &BenchArgs) -> Result<(SlideBag, ZeroShotClassifier)> {
    let mut rng = SplitMix64::new(a.seed);
    let emb = Matrix::from_vec(a.n, a.d, (0..a.n * a.d).map(|_| rng.normal() as f32).collect())?;
    let w = (a.n as f64).sqrt().ceil() as i32;
    let coords = (0..a.n as i32).map(|i| [i % w, i / w]).collect();
    let bag = SlideBag::new("bench", emb, Some(coords))?;
    let raw = Matrix::from_vec(a.c, a.d, (0..a.c * a.d).map(|_| rng.normal() as f32).collect())?;
    let labels = (0..a.c).map(|i| format!("class{i}")).collect();
    Ok((bag, ZeroShotClassifier::from_raw_rows(labels, &raw)?))
}

#[cfg(target_os = "linux")]
fn evict(path: &Path) -> bool {
    use std::os::fd::AsRawFd;
    match File::open(path) {
        Ok(f) => unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) == 0 },
        Err(_) => false,
    }
}

#[cfg(not(target_os = "linux"))]
fn evict(_path: &Path) -> bool {
    false
}

pub fn run(a: BenchArgs) -> Result<()> {
    if a.n == 0 || a.d == 0 || a.c < 2 || a.k == 0 || a.iters == 0 {
        return Err(Error::InvalidArgument("bench needs n, d, k, iters >= 1 and c >= 2".into()));
    }
    let threads = rayon::current_num_threads();
    eprintln!(
        "mizero {} bench seed={} n={} d={} c={} k={} iters={} threads={threads}",
        env!("CARGO_PKG_VERSION"),
        a.seed,
        a.n,
        a.d,
        a.c,
        a.k,
        a.iters
    );
    let (bag, clf) = synthetic_inputs(&a)?;
    let dir = match &a.dir {
        Some(d) => tempfile::tempdir_in(d),
        None => tempfile::tempdir(),
    }
    .map_err(Error::from)?;
    let path = dir.path().join("bench.mizb");
    write_bag(&bag, &path)?;
    File::open(&path).and_then(|f| f.sync_all()).map_err(|e| Error::from(e).in_file(&path))?;
    drop(bag);
    let file_bytes = fs::metadata(&path).map_err(|e| Error::from(e).in_file(&path))?.len();

    let mut cold = a.cold;
    let mut samples: [Vec<f64>; 4] = Default::default();
    for it in 0..=a.iters {
        if cold && !evict(&path) {
            eprintln!("warning: could not evict the bench file from the page cache; timing warm reads");
            cold = false;
        }
        let t = Instant::now();
        let bytes = fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
        let read = ms(t);
        let t = Instant::now();
        let bag = decode_bag(&bytes, "bench", ReadLimits::default())?;
        let decode = ms(t);
        drop(bytes);
        let t = Instant::now();
        let scores = score_bag(&bag, &clf)?;
        let score = ms(t);
        let t = Instant::now();
        let (pooled, _) = topk_pool(&scores, a.k)?;
        let pool = ms(t);
        std::hint::black_box(pooled);
        // Iteration 0 warms allocator and code paths and is not recorded.
        if it > 0 {
            for (s, v) in samples.iter_mut().zip([read, decode, score, pool]) {
                s.push(v);
            }
        }
    }
    let [read, decode, score, pool] = samples;
    let load: Vec<f64> = read.iter().zip(&decode).map(|(a, b)| a + b).collect();
    let compute: Vec<f64> = score.iter().zip(&pool).map(|(a, b)| a + b).collect();
    let report = BenchReport {
        format: "mizero-bench/1",
        n: a.n,
        d: a.d,
        c: a.c,
        k: a.k,
        iters: a.iters,
        threads,
        file_bytes,
        cold_cache: cold,
        read: Phase::of(&read),
        decode: Phase::of(&decode),
        load: Phase::of(&load),
        score: Phase::of(&score),
        pool: Phase::of(&pool),
        compute: Phase::of(&compute),
        io_fraction: 0.0,
    };
    let io_fraction = report.load.median_ms / (report.load.median_ms + report.compute.median_ms);
    let report = BenchReport { io_fraction, ..report };
    eprintln!("phase      median_ms   min_ms   mean_ms");
    for (name, p) in [
        ("read", &report.read),
        ("decode", &report.decode),
        ("load", &report.load),
        ("score", &report.score),
        ("pool", &report.pool),
        ("compute", &report.compute),
    ] {
        eprintln!("{name:<10} {:>9.3} {:>8.3} {:>9.3}", p.median_ms, p.min_ms, p.mean_ms);
    }
    eprintln!(
        "score+topK {:.3} ms per bag; loading is {:.0}% of the total ({} cache)",
        report.compute.median_ms,
        100.0 * io_fraction,
        if cold { "cold" } else { "warm" }
    );
    if let Some(out) = &a.out {
        let mut s = serde_json::to_string_pretty(&report)?;
        s.push('\n');
        fs::write(out, s).map_err(|e| Error::from(e).in_file(out))?;
    }
    Ok(())
}
