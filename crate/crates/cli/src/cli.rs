use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rcm", version, about = "Pretrain and apply a transformer channel model on OFDM channel data")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: $RCM_OUT_DIR or the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic channel dataset.
    Simulate(SimulateArgs),
    /// Print dataset dimensions and frame statistics.
    Verify(VerifyArgs),
    /// Ensemble correlation statistics of the simulator against closed forms.
    SimStats(SimStatsArgs),
    /// Build the channel vocabulary and feature map from datasets.
    Vocab(VocabArgs),
    /// Vocabulary round trip and quantization error on a dataset.
    Tokenize(TokenizeArgs),
    /// Pretrain a model with masked-channel and next-frame objectives.
    Pretrain(PretrainArgs),
    /// Held-out losses, accuracies and pseudo-perplexity.
    Eval(EvalArgs),
    /// Search the normalising scale that minimises perplexity.
    FindScale(FindScaleArgs),
    /// Adapt a pretrained model to rescaled target data.
    Transfer(TransferArgs),
    /// Flag anomalous (contaminated) second frames.
    Detect(DetectArgs),
    /// Replace second frames by the model's reconstruction.
    Mitigate(MitigateArgs),
    /// Pooled [CLS] compression and its ratio.
    Compress(CompressArgs),
    /// Fingerprints over windows of consecutive sequences.
    Fingerprint(FingerprintArgs),
    /// t-SNE chart of a fingerprint file.
    Chart(ChartArgs),
    /// Per-head attention accounting by domain.
    Attention(AttentionArgs),
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SimArgs {
    #[arg(long, default_value_t = 200)]
    pub subcarriers: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub antennas: usize,
    /// Subcarrier spacing in Hz.
    #[arg(long, default_value_t = 90e3)]
    pub spacing: f64,
    /// Seconds between frames.
    #[arg(long, default_value_t = 1e-3)]
    pub interval: f64,
    /// Carrier frequency in Hz.
    #[arg(long, default_value_t = 1.9e9)]
    pub carrier: f64,
    /// User speed in m/s.
    #[arg(long, default_value_t = 1.4)]
    pub speed: f64,
    #[arg(long, default_value_t = 8)]
    pub taps: usize,
    /// RMS delay spread in seconds.
    #[arg(long, default_value_t = 300e-9)]
    pub rms_delay: f64,
    #[arg(long, default_value_t = 100e-9)]
    pub tap_spacing: f64,
    /// Correlation between adjacent antennas.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Multiplies every value after generation.
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    /// Frames to contaminate with a co-pilot interferer.
    #[arg(long, value_delimiter = ',')]
    pub contaminate: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub sir_db: f64,
    #[arg(long, default_value_t = 1_000_003)]
    pub interferer_seed: u64,
    #[arg(long, default_value = "dataset.cfrd")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimStatsArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Single-frame grids drawn with consecutive seeds.
    #[arg(long, default_value_t = 1000)]
    pub realizations: u64,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    pub dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Share the token embedding with the output projection.
    #[arg(long)]
    pub tie_weights: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    pub dataset: Vec<PathBuf>,
    /// Held-out datasets for per-epoch evaluation.
    #[arg(long, value_delimiter = ',')]
    pub eval_dataset: Vec<PathBuf>,
    /// Existing vocabulary; built from the datasets when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 12)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Overrides the step count implied by --epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub negative_rate: f64,
    #[arg(long, default_value_t = 10)]
    pub negative_gap: usize,
    /// Global gradient-norm cap.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub eval_examples: usize,
    /// Write a checkpoint every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ModelInputs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Feature map of the model; checked against the dataset when given.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long, required = true, value_delimiter = ',')]
    pub dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub examples: usize,
    /// Frame pairs scored by pseudo-perplexity (0 skips it).
    #[arg(long, default_value_t = 4)]
    pub pll_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SpacingArg {
    Log,
    Linear,
}

#[derive(Args, Debug)]
pub struct FindScaleArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0.0625)]
    pub s_min: f64,
    #[arg(long, default_value_t = 16.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 33)]
    pub points: usize,
    #[arg(long, value_enum, default_value_t = SpacingArg::Log)]
    pub spacing: SpacingArg,
    #[arg(long)]
    pub refine: bool,
    #[arg(long, default_value_t = 16)]
    pub eval_sequences: usize,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Source checkpoint and vocabulary. The feature map is mandatory here.
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Held-out target data for the before/after perplexity report.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    /// Normaliser applied to the target data (values are divided by it).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 12)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub pll_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Margin above which a pair is anomalous.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct MitigateArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frames to reconstruct, each from its predecessor; default: frames
    /// the detector flags.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    /// Uncontaminated copy of the dataset, for error reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sequences combined into one representation.
    #[arg(long, default_value_t = 12)]
    pub batch: u64,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Dimensions used when no checkpoint is given.
    #[arg(long, default_value_t = 200)]
    pub subcarriers: u64,
    #[arg(long, default_value_t = 2)]
    pub frames: u64,
    #[arg(long, default_value_t = 2)]
    pub antennas: u64,
    #[arg(long, default_value_t = 768)]
    pub hidden: u64,
}

#[derive(Args, Debug)]
pub struct FingerprintArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// One label per dataset, in order.
    #[arg(long, required = true, value_delimiter = ',')]
    pub dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Sequence offset between successive windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Maximum fingerprints per dataset.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ChartArgs {
    #[arg(long)]
    pub fingerprints: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 100.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "chart.tsv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// First frame of the pair to inspect.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value_t = 5)]
    pub radius: u32,
    /// Zero the query and key projections first, so every head attends
    /// uniformly.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Dropout rate of the dropout variant.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}
