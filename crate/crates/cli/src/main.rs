mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "todspec",
    version,
    about = "Domain specialization of dialog encoders"
)]
struct Cli {
    /// JSON config whose keys match the subcommand's long flags (with
    /// underscores); flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which run directories are created. Defaults to
    /// `$TODSPEC_DATA_ROOT/runs`, or `./runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a finished run directory with the same config digest.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank domain n-grams by TF-IDF and curate the top N.
    ExtractTerms(ExtractTermsArgs),
    /// Filter a flat corpus (cc) or mine dialog triples from threads (reddit).
    BuildCorpus(BuildCorpusArgs),
    /// Specialize an encoder (or a fresh adapter bank) on a domain corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune on state tracking or response retrieval and test.
    Finetune(FinetuneArgs),
    /// Test a fine-tuned checkpoint without training.
    Evaluate(EvaluateArgs),
    /// Fine-tune on nested fractions of the training dialogs.
    FewShot(FewShotArgs),
    /// Fine-tune every specialized model on every target domain.
    CrossDomain(CrossDomainArgs),
    /// Compare full multi-domain specialization with composed adapters.
    MultiDomain(MultiDomainArgs),
    /// Finite-difference gradient checks on a tiny model.
    GradCheck(GradCheckArgs),
    /// Collect evaluation reports from run directories (read-only).
    Report(ReportArgs),
    /// Convert a MultiWOZ 2.1 directory into dialog JSONL splits.
    ConvertMultiwoz(ConvertMultiwozArgs),
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct ExtractTermsArgs {
    #[arg(long)]
    pub dialogs: Option<PathBuf>,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Count only dialogs whose sole domain is the target.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_domain: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    Cc,
    Reddit,
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct BuildCorpusArgs {
    #[arg(value_enum)]
    pub source: CorpusSource,
    /// Text lines (cc) or a JSONL comment dump (reddit).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub terms: Option<PathBuf>,
    /// Lines to keep for cc.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct PretrainArgs {
    /// mlm, rs-class or rs-contrast.
    #[arg(long)]
    pub objective: Option<String>,
    /// corpus.jsonl for mlm, triples.jsonl otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint to start from; a fresh encoder is built otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Train a new adapter bank for this domain on the frozen model.
    #[arg(long)]
    pub adapter_domain: Option<String>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    /// dual or linear scoring for the response-selection objectives.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// One or more learning rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Fine-tuning options shared by the downstream subcommands.
#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct DownstreamArgs {
    /// dst or rr.
    #[arg(long)]
    pub task: Option<String>,
    /// Directory with train.jsonl, dev.jsonl, test.jsonl and optionally
    /// ontology.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Also update adapter weights during fine-tuning.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub train_adapters: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Adapter bank directories to inject before fine-tuning.
    #[arg(long, value_delimiter = ',')]
    pub banks: Option<Vec<PathBuf>>,
    /// single, stack or fuse.
    #[arg(long)]
    pub compose: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub ft: DownstreamArgs,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct FewShotArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub percents: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub ft: DownstreamArgs,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct CrossDomainArgs {
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// `domain=checkpoint` pairs.
    #[arg(long, value_delimiter = ',')]
    pub specialized: Option<Vec<String>>,
    /// `domain=data-dir` pairs.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub ft: DownstreamArgs,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct MultiDomainArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// full_ft, stack or fuse.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub banks: Option<Vec<PathBuf>>,
    /// Concatenated triples for full_ft (RS-Class).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub spec_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub spec_lr: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub ft: DownstreamArgs,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: perturb the analytic gradient of this parameter group.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct ReportArgs {
    /// Run directories to read.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// json or tsv.
    #[arg(long, default_value = "tsv")]
    pub format: String,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
pub struct ConvertMultiwozArgs {
    /// Directory holding data.json, valListFile.txt and testListFile.txt.
    #[arg(long, env = "MULTIWOZ_DIR")]
    pub multiwoz: Option<PathBuf>,
    /// Keep dialogs touching this domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// With --domain, keep only dialogs whose sole domain it is.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_domain: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_root = cli.out.clone().unwrap_or_else(run::default_out_root);
    let ctx = commands::Ctx {
        config: cli.config.clone(),
        out_root,
        force: cli.force,
    };
    let result = match cli.command {
        Command::ExtractTerms(a) => commands::extract_terms(&ctx, &a),
        Command::BuildCorpus(a) => commands::build_corpus(&ctx, &a),
        Command::Pretrain(a) => commands::pretrain(&ctx, &a),
        Command::Finetune(a) => commands::finetune(&ctx, &a),
        Command::Evaluate(a) => commands::evaluate(&ctx, &a),
        Command::FewShot(a) => commands::few_shot(&ctx, &a),
        Command::CrossDomain(a) => commands::cross_domain(&ctx, &a),
        Command::MultiDomain(a) => commands::multi_domain(&ctx, &a),
        Command::GradCheck(a) => commands::grad_check(&ctx, &a),
        Command::Report(a) => commands::report(&a),
        Command::ConvertMultiwoz(a) => commands::convert_multiwoz(&ctx, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<todspec::Error>()
                .map_or("error", todspec::Error::kind);
            let record = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
