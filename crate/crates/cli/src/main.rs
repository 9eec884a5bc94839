//! `abtok`: filter, split, tokenize, pretrain, fine-tune, evaluate, embed and
//! benchmark antibody sequences.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use abtok::data::{Chain, Task};
use abtok::embed::Pooling;
use abtok::tokenizers::{VocabKind, DEFAULT_BPE_VOCAB_SIZE};

#[derive(Debug, Parser)]
#[command(name = "abtok", version, about = "Antibody language-model toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Keep human sequences with complete framework regions.
    Filter(FilterArgs),
    /// Seeded train / test / valid split.
    Split(SplitArgs),
    /// Write an SAA, DAA or BPE vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Masked-language-model pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder on a classification task, one run per seed.
    Finetune(FinetuneArgs),
    /// Score predictions or a fine-tuned checkpoint.
    Evaluate(EvaluateArgs),
    /// Export pooled sequence embeddings.
    Embed(EmbedArgs),
    /// Tokenizer throughput and length reduction.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Defaults to `<output>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Receives train.csv, test.csv and valid.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.70)]
    pub train: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test: f64,
    #[arg(long, default_value_t = 0.15)]
    pub valid: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub kind: VocabKind,
    /// Record file whose sequences train the BPE merges.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Only use sequences of this chain from the corpus.
    #[arg(long)]
    pub chain: Option<Chain>,
    /// Target BPE vocabulary size, specials included.
    #[arg(long, default_value_t = DEFAULT_BPE_VOCAB_SIZE)]
    pub target: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 12 layers, hidden 768, 12 heads, intermediate 3072.
    Roberta,
    /// 2 layers, hidden 8, 2 heads, intermediate 16, 32 positions.
    Toy,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Roberta)]
    pub preset: Preset,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub intermediate_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Hidden and attention dropout.
    #[arg(long)]
    pub dropout: Option<f64>,
}

/// Overrides on top of the command's default optimizer settings.
#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Record file with training sequences.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint path; the epoch log goes to `<output>.log.jsonl`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub chain: Option<Chain>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub p_select: f64,
    #[arg(long, default_value_t = 0.8)]
    pub p_mask: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_random: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p_keep: f64,
    /// Random replacements never reproduce the original token.
    #[arg(long)]
    pub exclude_original: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Seeds(pub Vec<u64>);

impl std::str::FromStr for Seeds {
    type Err = String;

    /// `N` means seeds 1..=N; a comma list is taken literally.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
        if s.contains(',') {
            let seeds = s
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?;
            if seeds.is_empty() {
                return Err("empty seed list".into());
            }
            Ok(Seeds(seeds))
        } else {
            match parse(s)? {
                0 => Err("need at least one seed".into()),
                n => Ok(Seeds((1..=n).collect())),
            }
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out records scored after every epoch.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value = "heavy")]
    pub chain: Chain,
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Receives summary.json and one sub-directory per seed.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `N` for seeds 1..=N, or a comma list such as `1,2,3`.
    #[arg(long, default_value = "5")]
    pub seeds: Seeds,
    /// Use the task's reference class list instead of first appearance.
    #[arg(long, conflicts_with = "classes")]
    pub canonical_classes: bool,
    /// Explicit class order, e.g. `neg,pos`; lifts the per-task class count.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Softmax,
    Logits,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// CSV with a `label` column and either a `prediction` column or one
    /// score column per class.
    #[arg(long, conflicts_with_all = ["checkpoint", "input"])]
    pub predictions: Option<PathBuf>,
    /// Fine-tuned checkpoint to score `--input` with.
    #[arg(long, requires_all = ["input", "vocab", "task"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value = "heavy")]
    pub chain: Chain,
    #[arg(long, value_enum, default_value_t = ScoreKind::Softmax)]
    pub scores: ScoreKind,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub chain: Option<Chain>,
    #[arg(long, default_value = "mean")]
    pub pooling: Pooling,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Embed a uniform sample of this many records.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `saa`, `daa`, or `name=path/to/vocab.json`; repeatable.
    #[arg(long = "tokenizer", default_values = ["saa", "daa"])]
    pub tokenizers: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    /// JSON report; the table is printed to stdout.
    #[arg(long)]
    pub output: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let schema = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<abtok::Error>(),
            Some(abtok::Error::Schema(_))
        )
    });
    if schema {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABTOK_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Filter(a) => commands::filter(a),
        Command::Split(a) => commands::split(a),
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Embed(a) => commands::embed(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_forms() {
        assert_eq!("5".parse::<Seeds>().unwrap().0, vec![1, 2, 3, 4, 5]);
        assert_eq!("3,7".parse::<Seeds>().unwrap().0, vec![3, 7]);
        assert_eq!("4,".parse::<Seeds>().unwrap().0, vec![4]);
        assert!("0".parse::<Seeds>().is_err());
        assert!("a,b".parse::<Seeds>().is_err());
    }

    #[test]
    fn schema_errors_exit_with_two() {
        let e = anyhow::Error::new(abtok::Error::Schema("x".into())).context("reading");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
