mod commands;
mod failure;
mod run;
mod settings;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kctutor_core::simulator::Policy;
use kctutor_core::Difficulty;
use serde::Serialize;

use failure::{Failure, Kind};

/// Exit status when EM stops at the iteration cap without converging.
pub const EXIT_NOT_CONVERGED: u8 = 4;

/// Hierarchical knowledge tracing: fit, simulate, verify and serve.
#[derive(Debug, Parser)]
#[command(name = "kctutor", version)]
struct Cli {
    /// JSON object of flag values. Command-line flags override it; it
    /// overrides KCTUTOR_* environment variables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic tree, parameters, cohort, questions and corpus.
    Synth(SynthArgs),
    /// Fit model parameters to a cohort with EM.
    Fit(FitArgs),
    /// Run practice simulations and score a fixed exam.
    Simulate(SimulateArgs),
    /// Train or apply the question/concept verifier.
    #[command(subcommand)]
    Verifier(VerifierCommand),
    /// Report which concept would be selected for each truncated history.
    AnalyzeRank(RankArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum VerifierCommand {
    Train(TrainArgs),
    Score(ScoreArgs),
    Identify(IdentifyArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    students: usize,
    #[arg(long, default_value_t = 50)]
    records: usize,
    /// Children per node at each depth.
    #[arg(long, value_delimiter = ',', default_value = "5,6")]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    questions_per_kc: usize,
    #[arg(long, default_value_t = 30)]
    corpus_per_kc: usize,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Stop once the log-likelihood changes by at most this much.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    min_prob: f64,
    #[arg(long, default_value_t = 0.999)]
    max_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GeneratorKind {
    Template,
    Remote,
}

#[derive(Debug, Args, Serialize)]
struct GeneratorArgs {
    #[arg(long, value_enum)]
    generator: Option<GeneratorKind>,
    /// Template library for `--generator template`.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Generator URL for `--generator remote`.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Language the generator is asked to write in.
    #[arg(long, default_value = "English")]
    language: String,
    /// Audience named in the prompt, plural form.
    #[arg(long, default_value = "third grade students")]
    audience: String,
    /// Audience named in the prompt, singular form.
    #[arg(long, default_value = "a third grade student")]
    audience_one: String,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    /// Question file the exam is drawn from.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "initial,random,oracle")]
    policy: Vec<Policy>,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 60)]
    exam_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    cut_points: Vec<usize>,
    #[arg(long, default_value = "medium")]
    update_difficulty: Difficulty,
    /// Verifier model; required by generator policies.
    #[arg(long)]
    verifier: Option<PathBuf>,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 70)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sibling concepts added as negatives per pair.
    #[arg(long, default_value_t = 1)]
    hard_negatives: usize,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    question: String,
    /// Only print this concept's row.
    #[arg(long)]
    kc: Option<String>,
    /// Candidate concepts (default: every leaf).
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Question text; repeatable.
    #[arg(long)]
    question: Vec<String>,
    /// File with one question per line.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
struct RankArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    cut_points: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Catalog id of the tree (default: file stem).
    #[arg(long)]
    tree_id: Option<String>,
    /// Catalog id of the parameters (default: file stem).
    #[arg(long)]
    params_id: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Allowed browser origins (default: any).
    #[arg(long, value_delimiter = ',')]
    cors_origin: Vec<String>,
    /// Append-only session log, replayed at startup.
    #[arg(long)]
    event_log: Option<PathBuf>,
    #[command(flatten)]
    generator: GeneratorArgs,
}

fn parse() -> Result<Cli, ExitCode> {
    let env: std::collections::HashMap<String, String> =
        std::env::vars().filter(|(k, _)| k.starts_with(settings::ENV_PREFIX)).collect();
    let argv = match settings::resolve_argv(Cli::command(), std::env::args_os().collect(), &env) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Err(ExitCode::from(Kind::Usage as u8));
        }
    };
    Cli::try_parse_from(argv).map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            ExitCode::from(Kind::Usage as u8)
        } else {
            ExitCode::SUCCESS
        }
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(Kind::Usage as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(Kind::Runtime as u8);
        }
    }
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Verifier(VerifierCommand::Train(a)) => commands::verifier_train(&a),
        Command::Verifier(VerifierCommand::Score(a)) => commands::verifier_score(&a),
        Command::Verifier(VerifierCommand::Identify(a)) => commands::verifier_identify(&a),
        Command::AnalyzeRank(a) => commands::analyze_rank(&a),
        Command::Serve(a) => commands::serve(&a, cli.jobs),
    }
}
