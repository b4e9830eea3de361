mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use readme_drift::forge::StateFilter;
use readme_drift::metrics::Averaging;
use readme_drift::pipeline::Mode;

use config::AppConfig;
use exit::{input, CliResult, InputContext};

#[derive(Debug, Parser)]
#[command(name = "readme-drift", version, about = "Detect README sections made stale by a pull request")]
struct Cli {
    /// TOML settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch pull requests of a repository into a corpus file.
    Ingest(IngestArgs),
    /// Filter a corpus into positive and negative datasets.
    BuildDataset(BuildArgs),
    /// Run the pipeline on one pull request and print the report.
    Analyze(AnalyzeArgs),
    /// Run the pipeline over datasets and print metrics.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Response cache directory; responses are stored and reused.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Answer only from the cache, never touching the network.
    #[arg(long, requires = "cache")]
    pub offline: bool,
    /// API root of the forge.
    #[arg(long)]
    pub forge_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Repository as owner/name.
    #[arg(long)]
    pub repo: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StateArg::Merged)]
    pub state: StateArg,
    #[command(flatten)]
    pub forge: ForgeArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StateArg {
    Merged,
    Closed,
    All,
}

impl From<StateArg> for StateFilter {
    fn from(s: StateArg) -> Self {
        match s {
            StateArg::Merged => StateFilter::Merged,
            StateArg::Closed => StateFilter::Closed,
            StateArg::All => StateFilter::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Outlier bounds as paragraphs,files,commits.
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<(usize, usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub negative_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Pipeline variant.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Retrieval window size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Iteration budget.
    #[arg(long)]
    pub p: Option<usize>,
    /// Replay file answering every chat call offline.
    #[arg(long, conflicts_with = "backend_url")]
    pub replay: Option<PathBuf>,
    /// Chat-completions endpoint.
    #[arg(long)]
    pub backend_url: Option<String>,
    /// Chat model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Embeddings endpoint; without it a local hashed embedder is used.
    #[arg(long)]
    pub embed_url: Option<String>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Write every chat exchange to a replay file.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Static,
    Agentic,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// owner/name#number, or a corpus file.
    pub target: String,
    /// Record to pick from a corpus file holding several.
    #[arg(long)]
    pub pr: Option<String>,
    /// Print the structured report instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub forge: ForgeArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub positives: PathBuf,
    #[arg(long)]
    pub negatives: PathBuf,
    /// Score the weighted random guesser instead of the pipeline.
    #[arg(long)]
    pub random: bool,
    /// Probability the random guesser predicts a positive.
    #[arg(long, default_value_t = 0.01)]
    pub prevalence: f64,
    /// Random guesser trials.
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-entry results as JSON lines.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, default_value_t = AveragingArg::Macro)]
    pub averaging: AveragingArg,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Macro,
    Micro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        }
    }
}

fn parse_thresholds(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a count")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [p, f, c] => Ok((p, f, c)),
        _ => Err("expected paragraphs,files,commits".into()),
    }
}

impl BackendArgs {
    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(m) = self.mode {
            cfg.pipeline.mode = match m {
                ModeArg::Static => Mode::Static,
                ModeArg::Agentic => Mode::Agentic,
            };
        }
        if let Some(k) = self.k {
            cfg.pipeline.window_size_k = k;
        }
        if let Some(p) = self.p {
            cfg.pipeline.max_iterations_p = p;
        }
        if let Some(u) = &self.backend_url {
            cfg.llm.url = Some(u.clone());
            cfg.paths.replay = None;
        }
        if let Some(r) = &self.replay {
            cfg.paths.replay = Some(r.clone());
            cfg.llm.url = None;
        }
        if let Some(m) = &self.model {
            cfg.llm.model = m.clone();
        }
        if let Some(u) = &self.embed_url {
            cfg.embedding.url = Some(u.clone());
        }
        if let Some(t) = &self.templates {
            cfg.paths.templates_dir = Some(t.clone());
        }
    }
}

impl ForgeArgs {
    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(c) = &self.cache {
            cfg.paths.cache_dir = Some(c.clone());
        }
        if let Some(u) = &self.forge_url {
            cfg.forge.base_url = u.clone();
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref()).map_err(input)?;
    match &cli.command {
        Command::Ingest(a) => a.forge.apply(&mut cfg),
        Command::BuildDataset(a) => {
            if let Some((p, f, c)) = a.thresholds {
                cfg.dataset.max_readme_paragraphs = p;
                cfg.dataset.max_changed_files = f;
                cfg.dataset.max_commits = c;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(r) = a.negative_ratio {
                cfg.dataset.negative_ratio = r;
            }
        }
        Command::Analyze(a) => {
            a.backend.apply(&mut cfg);
            a.forge.apply(&mut cfg);
        }
        Command::Evaluate(a) => {
            a.backend.apply(&mut cfg);
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if a.workers.is_some() {
                cfg.workers = a.workers;
            }
        }
    }
    cfg.validate().input_ctx(|| "invalid configuration".into())?;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&cfg, &a),
        Command::BuildDataset(a) => commands::build_dataset(&cfg, &a),
        Command::Analyze(a) => commands::analyze(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
