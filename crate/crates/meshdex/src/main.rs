use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meshdex::pipeline::{self, Command as Stage, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "meshdex",
    version,
    about = "Semantic indexing of biomedical documents: retrieval, transformer scoring, thresholding, evaluation"
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model profile preset: "base" or "large".
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Number of retrieved neighbor documents.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of candidate indexes kept per document.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Index supplementary concepts jointly with major headings.
    #[arg(long, global = true)]
    joint_supplementary: bool,
    /// Fractions for the efficiency curve, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Output directory (also settable via MESHDEX_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Build the vocabulary from the training corpus.
    Prep,
    /// Retrieval index operations.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Retrieve candidate indexes for every configured corpus split.
    Retrieve,
    /// Masked-language-model pretraining on the unlabeled corpus.
    Pretrain,
    /// Supervised fine-tuning on the labeled training corpus.
    Finetune,
    /// Decision-threshold operations.
    Thresholds {
        #[command(subcommand)]
        action: ThresholdsAction,
    },
    /// Score the test corpus and apply fitted thresholds.
    Predict,
    /// Evaluate predictions: flat and hierarchical measures.
    Evaluate {
        /// Gold label file (doc_id<TAB>comma-separated ids); enables
        /// standalone file mode together with --pred and --ontology.
        #[arg(long, requires = "pred", requires = "ontology")]
        gold: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        ontology: Option<PathBuf>,
    },
    /// Fine-tune and evaluate over chronological training fractions.
    EfficiencyCurve,
}

#[derive(Subcommand)]
enum IndexAction {
    /// Build the annotated neighbor index over the training corpus.
    Build {
        /// Embedding source: "file" or "random".
        #[arg(long)]
        init: Option<String>,
        /// Dimension of randomly initialized embeddings.
        #[arg(long)]
        dim: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ThresholdsAction {
    /// Fit per-index thresholds maximizing training micro-F.
    Fit,
    /// Apply fitted thresholds to test scores.
    Apply,
}

fn run(cli: Cli) -> meshdex::Result<()> {
    let mut overrides = Overrides {
        seed: cli.seed,
        profile: cli.profile,
        k: cli.k,
        m: cli.m,
        joint_supplementary: cli.joint_supplementary.then_some(true),
        fractions: cli.fractions,
        out_dir: cli.out,
        ..Overrides::default()
    };
    if let CliCommand::Index {
        action: IndexAction::Build { init, dim },
    } = &cli.command
    {
        overrides.embedding_init = init.clone();
        overrides.embedding_dim = *dim;
    }

    if let CliCommand::Evaluate {
        gold: Some(gold),
        pred: Some(pred),
        ontology: Some(ontology),
    } = &cli.command
    {
        let report = pipeline::evaluate_files(gold, pred, ontology)?;
        print!("{}", report.to_table());
        return Ok(());
    }

    let cfg = PipelineConfig::parse(cli.config.as_deref(), &overrides)?;
    let stage = match cli.command {
        CliCommand::Prep => Stage::Prep,
        CliCommand::Index { .. } => Stage::IndexBuild,
        CliCommand::Retrieve => Stage::Retrieve,
        CliCommand::Pretrain => Stage::Pretrain,
        CliCommand::Finetune => Stage::Finetune,
        CliCommand::Thresholds {
            action: ThresholdsAction::Fit,
        } => Stage::ThresholdsFit,
        CliCommand::Thresholds {
            action: ThresholdsAction::Apply,
        } => Stage::ThresholdsApply,
        CliCommand::Predict => Stage::Predict,
        CliCommand::Evaluate { .. } => Stage::Evaluate,
        CliCommand::EfficiencyCurve => Stage::EfficiencyCurve,
    };
    pipeline::run(stage, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version; usage problems exit with 1
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
