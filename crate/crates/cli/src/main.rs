//! `ilf`: every pipeline stage as a subcommand over the run-directory layout.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 backend or runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ilf_core::config::BackendSpec;
use ilf_core::{Beta, FinetuneMode, RunConfig, ScorerKind};

#[derive(Parser, Debug)]
#[command(
    name = "ilf",
    version,
    about = "Finetune language models on refinements written from language feedback"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for `ilf-run` and `serve`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Policy backend: rule-mock[:CORRUPTION], categorical:TOK=P,..., constant:TEXT,
    /// scripted:DIR or http:MODEL@BASE_URL.
    #[arg(long, global = true)]
    pub backend: Option<BackendSpec>,
    /// Backend writing refinements, same syntax as --backend.
    #[arg(long, global = true)]
    pub refine_backend: Option<BackendSpec>,
    /// instructrm_ensemble, instructrm_single:I, embedding_similarity, max_length or random.
    #[arg(long, global = true)]
    pub scorer: Option<ScorerKind>,
    /// Candidate refinements per context (the N of best-of-N).
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Importance-weight temperature, a positive number or `infinity`.
    #[arg(long, global = true)]
    pub beta: Option<Beta>,
    /// Number of ILF iterations K.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// continuous, from_scratch_concat or emit_only.
    #[arg(long, global = true)]
    pub mode: Option<FinetuneMode>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

impl GlobalArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.backend {
            config.backend = v.clone();
        }
        if let Some(v) = &self.refine_backend {
            config.refine_backend = Some(v.clone());
        }
        if let Some(v) = self.scorer {
            config.scorer = v;
        }
        if let Some(v) = self.n {
            config.n = v;
        }
        if let Some(v) = self.beta {
            config.beta = v;
        }
        if let Some(v) = self.iterations {
            config.k = v;
        }
        if let Some(v) = self.mode {
            config.finetune_mode = v;
        }
        if let Some(v) = self.parallelism {
            config.parallelism = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the word-removal task set as JSONL.
    Wordgen(commands::WordgenArgs),
    /// Exact-match accuracy on word-removal tasks.
    Wordeval(commands::WordevalArgs),
    /// Sample N refinements per sample.
    Refine(commands::RefineArgs),
    /// Score refinements and select the best.
    Select(commands::SelectArgs),
    /// Importance-weight scored refinements into a finetuning dataset.
    Weight(commands::WeightArgs),
    /// Run the ILF loop in a run directory, resuming if it already has iterations.
    IlfRun(commands::IlfRunArgs),
    /// Mean fractional rank per method.
    RankEval(commands::RankEvalArgs),
    /// Win rate of one method against another.
    Winrate(commands::WinrateArgs),
    /// Monte-Carlo KL divergence between two backends.
    Kl(commands::KlArgs),
    /// Analytic KL of best-of-N sampling for `--n` candidates.
    BonKl(commands::BonKlArgs),
    /// Reward-model accuracy on human comparisons.
    RmEval(commands::RmEvalArgs),
    /// Per-token negative log-likelihood of a finetuning dataset.
    Nll(commands::NllArgs),
    /// Serve the annotation queue of a run directory over HTTP.
    Serve(commands::ServeArgs),
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Wordgen(a) => commands::wordgen(g, a),
        Command::Wordeval(a) => commands::wordeval(g, a),
        Command::Refine(a) => commands::refine(g, a),
        Command::Select(a) => commands::select(g, a),
        Command::Weight(a) => commands::weight(g, a),
        Command::IlfRun(a) => commands::ilf_run(g, a),
        Command::RankEval(a) => commands::rank_eval(a),
        Command::Winrate(a) => commands::winrate(a),
        Command::Kl(a) => commands::kl(g, a),
        Command::BonKl(a) => commands::bon_kl(g, a),
        Command::RmEval(a) => commands::rm_eval(g, a),
        Command::Nll(a) => commands::nll(g, a),
        Command::Serve(a) => commands::serve(g, a),
    }
}

/// A reader that stops early, as `head` does, is not an error.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

/// Input errors map to 1, everything else to 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<ilf_core::Error>() {
        return if e.is_validation() { 1 } else { 2 };
    }
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose {
        tracing_subscriber::filter::LevelFilter::INFO
    } else {
        tracing_subscriber::filter::LevelFilter::WARN
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
