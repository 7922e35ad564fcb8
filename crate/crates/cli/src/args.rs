//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "compass-lab",
    version,
    about = "Desk-scale MoE training, alignment, data-mixture, quantization and pipeline-planning lab"
)]
pub struct Cli {
    /// JSON config for the subcommand; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed (default 0, or `seed` from the config file).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output root; artifacts go to `<out>/<subcommand>/`.
    #[arg(
        long,
        global = true,
        value_name = "DIR",
        env = "COMPASS_LAB_OUT",
        default_value = "runs"
    )]
    pub out: PathBuf,
    /// Worker threads for independent jobs (default 1). Never changes results.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic language shards, their unigram check and an instruction set.
    GenSynthetic(GenArgs),
    /// Train an MoE language model on synthetic shards.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning with packing and the mixed loss mask.
    Sft(SftArgs),
    /// Preference alignment with token-level DPO, or OTPO with --otpo.
    Align(AlignArgs),
    /// Train the margin reward model on separable preference pairs.
    RmTrain(RmArgs),
    /// Proxy sweep, regression and mixture selection.
    MixtureSearch(MixtureArgs),
    /// Naive vs expert-aware FP8 quantization on the skewed-routing scenario.
    Quantize(QuantizeArgs),
    /// Pipeline partition, schedule simulation and memory model.
    PlanParallel(PlanArgs),
    /// Per-suite, per-slice loss and accuracy of a model.
    Eval(EvalArgs),
    /// Run the full acceptance suite.
    Acceptance(AcceptanceArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Pretrain(_) => "pretrain",
            Command::Sft(_) => "sft",
            Command::Align(_) => "align",
            Command::RmTrain(_) => "rm-train",
            Command::MixtureSearch(_) => "mixture-search",
            Command::Quantize(_) => "quantize",
            Command::PlanParallel(_) => "plan-parallel",
            Command::Eval(_) => "eval",
            Command::Acceptance(_) => "acceptance",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n_shards: Option<usize>,
    /// Tokens per shard.
    #[arg(long)]
    pub n_tokens: Option<usize>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Instruction records in `sft.jsonl`.
    #[arg(long)]
    pub sft_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `shards.json` written by gen-synthetic; shards are generated when absent.
    #[arg(long, value_name = "PATH")]
    pub shards: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Model directory written by pretrain.
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    /// JSON Lines instruction data; templates are rendered when absent.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Weight tokens by optimal transport instead of uniformly.
    #[arg(long)]
    pub otpo: bool,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub beta_dpo: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run the reference model during training instead of caching its log-probs.
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RmArgs {
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixtureArgs {
    /// Proxy runs in the sweep.
    #[arg(long)]
    pub n_mixtures: Option<usize>,
    /// Proxy training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Mixtures re-trained at the wider scale (0 skips the cross-scale check).
    #[arg(long)]
    pub cross_scale: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    E4m3,
    Identity,
}

impl From<GridArg> for compass_quant::Grid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::E4m3 => compass_quant::Grid::E4m3,
            GridArg::Identity => compass_quant::Grid::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub tau: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub grid: Option<GridArg>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    /// Pipeline stages.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Model chunks per stage of the uniform (interleaved) plan.
    #[arg(long)]
    pub chunks: Option<usize>,
    #[arg(long)]
    pub microbatches: Option<usize>,
    /// Stages that recompute activations, e.g. `--recompute 0,1`.
    #[arg(long, value_delimiter = ',')]
    pub recompute: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory written by pretrain or sft; a fresh model otherwise.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// Also evaluate a quantized copy on this grid.
    #[arg(long, value_enum)]
    pub grid: Option<GridArg>,
}

#[derive(Debug, Args)]
pub struct AcceptanceArgs {
    /// Skip the determinism replay (criterion 13), which reruns the suite.
    #[arg(long)]
    pub skip_replay: bool,
    /// Run only these criteria, e.g. `--only 1,3,12`.
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<usize>>,
}
