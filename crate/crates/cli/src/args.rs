use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mizero_core::prompts::{Task, DEFAULT_TRIALS};
use mizero_core::spatial::DEFAULT_KNN;
use mizero_core::zeroshot::PoolConfig;

#[derive(Debug, Parser)]
#[command(name = "mizero", version, about = "Zero-shot whole-slide classification over patch-embedding bags")]
pub struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify every slide of a manifest with a fixed classifier.
    Classify(ClassifyArgs),
    /// Run the prompt-sampling evaluation protocol.
    Evaluate(EvaluateArgs),
    /// Build the classifier of one prompt trial.
    BuildClassifier(BuildClassifierArgs),
    /// Train the two projection heads on paired embeddings.
    Align(AlignArgs),
    /// Export per-patch scores of one bag as CSV.
    ScoreMap(ScoreMapArgs),
    /// Time bag loading and score+pool on a synthetic bag.
    Bench(BenchArgs),
    /// Write synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolKind {
    Mean,
    Topk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Brca,
    Nsclc,
    Rcc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Brca => Task::Brca,
            TaskArg::Nsclc => Task::Nsclc,
            TaskArg::Rcc => Task::Rcc,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PoolingArgs {
    #[arg(long, value_enum, default_value = "topk")]
    pub pool: PoolKind,
    /// Patches averaged per class by topK pooling.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Mean-filter scores over the spatial KNN graph before pooling.
    #[arg(long)]
    pub smooth: bool,
    /// Neighbors per patch for --smooth.
    #[arg(long, default_value_t = DEFAULT_KNN)]
    pub knn: usize,
}

impl PoolingArgs {
    pub fn config(&self) -> PoolConfig {
        self.config_with_k(self.k)
    }

    pub fn config_with_k(&self, k: usize) -> PoolConfig {
        let cfg = match self.pool {
            PoolKind::Mean => PoolConfig::mean(),
            PoolKind::Topk => PoolConfig::topk(k),
        };
        if self.smooth {
            cfg.with_smoothing(self.knn)
        } else {
            cfg
        }
    }
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct PoolSource {
    /// Prompt pool document `{templates, classnames}`.
    #[arg(long)]
    pub pool_file: Option<PathBuf>,
    /// Built-in prompt pool.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    /// Predictions document to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Values of k swept by --k-sweep.
pub const K_SWEEP: [usize; 5] = [1, 5, 10, 50, 100];

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub pool_source: PoolSource,
    /// Prompt embeddings, one `{text, embedding}` record per line.
    #[arg(long)]
    pub text_table: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    /// Ensemble a random subset of classnames per class instead of one.
    #[arg(long)]
    pub classname_subsets: bool,
    /// Evaluate topK pooling at k = 1, 5, 10, 50, 100 (ignores --pool and --k).
    #[arg(long)]
    pub k_sweep: bool,
    #[arg(long)]
    pub report: PathBuf,
    /// Optional per-trial CSV for plotting.
    #[arg(long)]
    pub trials_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildClassifierArgs {
    #[command(flatten)]
    pub pool_source: PoolSource,
    #[arg(long)]
    pub text_table: PathBuf,
    /// Seed of the trial to rebuild (as listed in an evaluation report).
    #[arg(long)]
    pub trial_seed: u64,
    #[arg(long)]
    pub classname_subsets: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Paired embeddings (MIZP).
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = mizero_core::align::DEFAULT_SHARED_DIM)]
    pub dim_shared: usize,
    /// Temperature; by default the logit multiplier is 1/temp.
    #[arg(long, default_value_t = mizero_core::align::DEFAULT_TEMPERATURE)]
    pub temp: f64,
    /// Use --temp itself as the logit multiplier.
    #[arg(long)]
    pub literal_temp: bool,
    /// Train log(tau) along with the heads.
    #[arg(long)]
    pub train_tau: bool,
    #[arg(long)]
    pub no_bias: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Cosine learning-rate decay after this many linear warmup steps.
    #[arg(long)]
    pub cosine_warmup: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (default: next to --out with a `.loss.csv` suffix).
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreMapArgs {
    #[arg(long)]
    pub bag: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    /// Write KNN-smoothed scores instead of raw ones.
    #[arg(long)]
    pub smooth: bool,
    #[arg(long, default_value_t = DEFAULT_KNN)]
    pub knn: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 8767)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evict the bag file from the page cache before every read (Linux).
    #[arg(long)]
    pub cold: bool,
    /// Directory for the temporary bag file (default: the system temp dir).
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Timing summary as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Planted-signal bags with a manifest, classifier, prompt pool and text table.
    Planted(SynthPlantedArgs),
    /// Paired embeddings from a shared Gaussian latent.
    Pairs(SynthPairsArgs),
}

#[derive(Debug, Args)]
pub struct SynthPlantedArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Slides per class.
    #[arg(long, default_value_t = 100)]
    pub slides_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub signal_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub names_per_class: usize,
    /// Noise added to prompt embeddings around their class direction.
    #[arg(long, default_value_t = 0.3)]
    pub text_noise: f64,
    /// Drop patch coordinates from the bags.
    #[arg(long)]
    pub no_coords: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthPairsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 64)]
    pub d_img: usize,
    #[arg(long, default_value_t = 48)]
    pub d_txt: usize,
    #[arg(long, default_value_t = 8)]
    pub d_latent: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}
