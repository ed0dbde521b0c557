//! `vlrm`: generate a synthetic captioning corpus, warm-start a captioner,
//! fine-tune it with token-level rewards, evaluate retrieval, and inspect
//! per-token returns.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vlrm_core::trainer::Flavor;

#[derive(Parser)]
#[command(name = "vlrm", version, about = "Token-level reward fine-tuning for a synthetic captioning task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes with reference captions and the vocabulary.
    GenCorpus(GenCorpusArgs),
    /// Maximum-likelihood warm start on reference captions; also fits the reference LM.
    Pretrain(PretrainArgs),
    /// Reinforcement fine-tuning from a warm start or a saved RL checkpoint.
    RlTrain(RlTrainArgs),
    /// Caption scenes and run text-to-scene retrieval.
    Eval(EvalArgs),
    /// Print the reward breakdown and per-token returns for one caption.
    Score(ScoreArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training scenes.
    #[arg(long)]
    scenes: usize,
    /// Additional held-out scenes written to heldout.jsonl.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Existing output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory written by gen-corpus.
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides pretrain.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct RlTrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Warm-start checkpoint from `pretrain`.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// RL checkpoint to continue; must come from the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Overrides trainer.flavor.
    #[arg(long, value_parser = parse_flavor)]
    flavor: Option<Flavor>,
    /// Train until this many steps have been taken in total.
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference LM dump; fitted on the training corpus when omitted.
    #[arg(long)]
    reflm: Option<PathBuf>,
    #[arg(long)]
    bad_phrases: Option<PathBuf>,
    /// Also write the checkpoint every N steps.
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeChoice {
    Beam,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Scenes to caption; defaults to heldout when heldout.jsonl exists.
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// `greedy` forces a single beam without n-gram blocking.
    #[arg(long, value_enum, default_value_t = DecodeChoice::Beam)]
    decode: DecodeChoice,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reflm: Option<PathBuf>,
    #[arg(long)]
    bad_phrases: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    /// Scene id from corpus.jsonl or heldout.jsonl.
    #[arg(long)]
    scene: u64,
    /// Whitespace-separated caption.
    #[arg(long, allow_hyphen_values = true)]
    caption: String,
    /// Score the caption as given, without appending <eos>.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reflm: Option<PathBuf>,
    #[arg(long)]
    bad_phrases: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_flavor(s: &str) -> Result<Flavor, String> {
    s.parse().map_err(|e: vlrm_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::RlTrain(a) => commands::rl_train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
