//! Command-line driver: feature extraction, synthetic corpora, training,
//! s-vector export, verification scoring and model inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "fhvae", version, about = "Factorized hierarchical VAE toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute features for every WAV file listed in a manifest.
    Extract(ExtractArgs),
    /// Draw a synthetic corpus with known latents.
    Synth(SynthArgs),
    /// Fit a model and write a checkpoint.
    Train(TrainArgs),
    /// Export one s-vector per sequence.
    Svector(SvectorArgs),
    /// Score verification trials and report the equal error rate.
    Verify(VerifyArgs),
    /// Decode a segment while sweeping one latent dimension.
    Traverse(TraverseArgs),
    /// Move one sequence's sequence-level attributes to another's.
    Transform(TransformArgs),
    /// Report latent variance ratios, bound terms and sequence accuracy.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Kind {
    Fbank80,
    Logspec200,
}

#[derive(Args)]
pub struct ExtractArgs {
    /// `id<TAB>wav-path[<TAB>label]` lines; relative paths resolve against the manifest's directory.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch bounds; defaults to the checkpoint path with a `.log.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Embedding {
    /// MAP s-vector.
    Mu2,
    /// Averaged segment latent.
    Mu1,
}

#[derive(Args)]
pub struct SvectorArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mu2")]
    which: Embedding,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    svectors: PathBuf,
    /// `id<TAB>label` lines.
    #[arg(long)]
    labels: PathBuf,
    /// Project onto this many LDA dimensions first.
    #[arg(long, requires_all = ["lda_svectors", "lda_labels"])]
    lda: Option<usize>,
    /// Training-split vectors to fit the LDA on.
    #[arg(long)]
    lda_svectors: Option<PathBuf>,
    #[arg(long)]
    lda_labels: Option<PathBuf>,
    /// Trials to score instead of every pair.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Write every trial with its score here.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TraverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sequence id, optionally followed by `:k` for its k-th segment.
    #[arg(long)]
    segment: String,
    #[arg(long, value_parser = ["z1", "z2"])]
    which: String,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 7)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TransformArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long)]
    reference: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    if cli.threads > 1 {
        log::info!("--threads {} requested; computation runs on one thread", cli.threads);
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Extract(a) => commands::extract(&a),
        Command::Synth(a) => commands::synth(&a, seed),
        Command::Train(a) => commands::train(&a, seed),
        Command::Svector(a) => commands::svector(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Traverse(a) => commands::traverse(&a),
        Command::Transform(a) => commands::transform(&a),
        Command::Diagnose(a) => commands::diagnose(&a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
