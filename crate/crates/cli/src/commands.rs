use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::anyhow;
use serde::Serialize;

use readme_drift::clock::{Clock, LogicalClock, SystemClock};
use readme_drift::corpus::{ground_truth_indices, load_corpus, write_corpus, PrKey, PullRequest};
use readme_drift::dataset::build_datasets;
use readme_drift::forge::{CachedTransport, ForgeClient, Transport, UreqTransport};
use readme_drift::llm::{ChatBackend, HttpChatBackend, LlmGateway, PromptTemplates, RecordingBackend, ScriptedBackend};
use readme_drift::metrics::{evaluate as score, random_baseline, BaselineParams, CorpusStats, MetricsOptions, RunResult};
use readme_drift::pipeline::{run, Backends, Decision, Mode, Recommendation, REPORT_VERSION};
use readme_drift::readme::{build_hierarchy, segment_readme};
use readme_drift::retrieval::{CachedEmbedder, EmbeddingBackend, HashedBagOfWords, HttpEmbeddingBackend};
use readme_drift::MetricsReport;

use crate::config::{llm_api_key, AppConfig};
use crate::exit::{backend, input, CliResult, InputContext};
use crate::{AnalyzeArgs, BuildArgs, EvaluateArgs, IngestArgs};

fn forge_client(cfg: &AppConfig, offline: bool) -> CliResult<ForgeClient> {
    let transport: Arc<dyn Transport> = match (&cfg.paths.cache_dir, offline) {
        (Some(dir), true) => Arc::new(CachedTransport::offline(dir)),
        (Some(dir), false) => Arc::new(CachedTransport::new(dir, Arc::new(UreqTransport::new(cfg.forge_timeout())))),
        (None, true) => return Err(input(anyhow!("--offline needs a cache directory"))),
        (None, false) => Arc::new(UreqTransport::new(cfg.forge_timeout())),
    };
    Ok(ForgeClient::new(cfg.forge_config(), transport)?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).input_ctx(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).input_ctx(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_corpus(path: &Path) -> CliResult<Vec<PullRequest>> {
    let f = File::open(path).input_ctx(|| format!("cannot read {}", path.display()))?;
    let (prs, report) = load_corpus(BufReader::new(f)).input_ctx(|| format!("cannot read {}", path.display()))?;
    for (line, err) in &report.errors {
        log::warn!("{}:{line}: skipped record: {err}", path.display());
    }
    Ok(prs)
}

pub fn ingest(cfg: &AppConfig, args: &IngestArgs) -> CliResult<()> {
    if args.repo.split('/').count() != 2 || args.repo.split('/').any(str::is_empty) {
        return Err(input(anyhow!("repository must be owner/name, got `{}`", args.repo)));
    }
    let client = forge_client(cfg, args.forge.offline)?;
    let prs = client.ingest(&args.repo, args.state.into())?;
    let mut out = create(&args.out)?;
    write_corpus(&mut out, &prs)
        .and_then(|_| out.flush())
        .input_ctx(|| format!("cannot write {}", args.out.display()))?;
    eprintln!("wrote {} records to {}", prs.len(), args.out.display());
    Ok(())
}

pub fn build_dataset(cfg: &AppConfig, args: &BuildArgs) -> CliResult<()> {
    let prs = read_corpus(&args.input)?;
    let sets = build_datasets(prs, &cfg.thresholds(), &cfg.build_options());
    std::fs::create_dir_all(&args.out_dir).input_ctx(|| format!("cannot create {}", args.out_dir.display()))?;
    for (name, prs) in [("positives.jsonl", &sets.positives), ("negatives.jsonl", &sets.negatives)] {
        let path = args.out_dir.join(name);
        let mut out = create(&path)?;
        write_corpus(&mut out, prs)
            .and_then(|_| out.flush())
            .input_ctx(|| format!("cannot write {}", path.display()))?;
    }
    let report = serde_json::to_string_pretty(&sets.report).map_err(input)?;
    let path = args.out_dir.join("report.json");
    std::fs::write(&path, format!("{report}\n")).input_ctx(|| format!("cannot write {}", path.display()))?;
    println!("{report}");
    Ok(())
}

/// Chat and embedding backends shared by every run of one command.
struct Engine {
    gateway: LlmGateway,
    embedder: Box<dyn EmbeddingBackend<f64> + Send + Sync>,
    replay: bool,
    recorder: Option<Arc<RecordingBackend<Arc<dyn ChatBackend>>>>,
}

impl Engine {
    fn new(cfg: &AppConfig, record: bool) -> CliResult<Self> {
        let (chat, replay): (Arc<dyn ChatBackend>, bool) = match (&cfg.paths.replay, &cfg.llm.url) {
            (Some(_), Some(_)) => return Err(input(anyhow!("set either a replay file or a backend url, not both"))),
            (Some(path), None) => (Arc::new(ScriptedBackend::load(path).map_err(|e| input(anyhow!(e)))?), true),
            (None, Some(url)) => {
                let http = HttpChatBackend {
                    url: url.clone(),
                    model: cfg.llm.model.clone(),
                    api_key: llm_api_key(),
                    timeout: Duration::from_secs(cfg.llm.timeout_secs),
                };
                (Arc::new(http), false)
            }
            (None, None) => return Err(input(anyhow!("no chat backend: pass --replay or --backend-url"))),
        };
        let recorder = record.then(|| Arc::new(RecordingBackend::new(chat.clone())));
        let chat: Arc<dyn ChatBackend> = match &recorder {
            Some(r) => r.clone(),
            None => chat,
        };
        let templates = match &cfg.paths.templates_dir {
            Some(dir) => PromptTemplates::from_dir(dir).map_err(input)?,
            None => PromptTemplates::default(),
        };
        let embedder: Box<dyn EmbeddingBackend<f64> + Send + Sync> = match &cfg.embedding.url {
            Some(url) => Box::new(CachedEmbedder::new(HttpEmbeddingBackend {
                url: url.clone(),
                model: cfg.embedding.model.clone(),
                api_key: llm_api_key(),
                timeout: Duration::from_secs(cfg.embedding.timeout_secs),
            })),
            None => Box::new(HashedBagOfWords::default()),
        };
        Ok(Self {
            gateway: LlmGateway::with_config(chat, templates, cfg.gateway_config()),
            embedder,
            replay,
            recorder,
        })
    }

    /// Replays run on a logical clock anchored at the PR, so reports are reproducible.
    fn run(&self, cfg: &AppConfig, pr: &PullRequest) -> Recommendation {
        let clock: Box<dyn Clock> = if self.replay {
            Box::new(LogicalClock::new(pr.created_at))
        } else {
            Box::new(SystemClock)
        };
        let backends = Backends {
            gateway: &self.gateway,
            embedder: self.embedder.as_ref(),
            clock: clock.as_ref(),
        };
        run(pr, &cfg.pipeline, &backends)
    }

    fn write_recording(&self, path: Option<&Path>) -> CliResult<()> {
        let (Some(rec), Some(path)) = (&self.recorder, path) else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&rec.to_replay()).map_err(input)?;
        std::fs::write(path, format!("{text}\n")).input_ctx(|| format!("cannot write {}", path.display()))
    }
}

fn resolve_target(cfg: &AppConfig, args: &AnalyzeArgs) -> CliResult<PullRequest> {
    let path = Path::new(&args.target);
    if path.is_file() {
        let mut prs = read_corpus(path)?;
        return match &args.pr {
            Some(key) => {
                let key: PrKey = key.parse().map_err(|e: String| input(anyhow!(e)))?;
                prs.into_iter()
                    .find(|p| p.key() == key)
                    .ok_or_else(|| input(anyhow!("{key} is not in {}", path.display())))
            }
            None if prs.len() == 1 => Ok(prs.remove(0)),
            None => Err(input(anyhow!("{} holds {} records; pick one with --pr", path.display(), prs.len()))),
        };
    }
    let key: PrKey = args
        .target
        .parse()
        .map_err(|e: String| input(anyhow!("`{}` is neither a corpus file nor a pull request: {e}", args.target)))?;
    let client = forge_client(cfg, args.forge.offline)?;
    Ok(client.fetch_pr_detail(&key.repo, key.number)?)
}

#[derive(Serialize)]
struct Dump<'a, T> {
    version: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn analyze(cfg: &AppConfig, args: &AnalyzeArgs) -> CliResult<()> {
    let pr = resolve_target(cfg, args)?;
    let engine = Engine::new(cfg, args.backend.record.is_some())?;
    let rec = engine.run(cfg, &pr);
    if args.json {
        let text = serde_json::to_string_pretty(&Dump {
            version: REPORT_VERSION,
            body: &rec,
        })
        .map_err(input)?;
        println!("{text}");
    } else {
        print!("{}", rec.render_report(&segment_readme(&pr.readme_before)));
    }
    engine.write_recording(args.backend.record.as_deref())?;
    match rec.failure {
        Some(f) => Err(backend(anyhow!("backend error while analysing {}: {f}", rec.pr_key))),
        None => Ok(()),
    }
}

/// One labelled dataset entry with its derived ground truth.
struct Entry {
    pr: PullRequest,
    truth_positive: bool,
    truth_indices: BTreeSet<usize>,
}

fn load_entries(args: &EvaluateArgs) -> CliResult<Vec<Entry>> {
    let mut entries = Vec::new();
    for (path, label) in [(&args.positives, true), (&args.negatives, false)] {
        for pr in read_corpus(path)? {
            let truth_indices = match &pr.readme_patch {
                Some(patch) if label => {
                    ground_truth_indices(&pr.readme_before, patch).input_ctx(|| format!("cannot derive ground truth for {}", pr.key()))?
                }
                _ => BTreeSet::new(),
            };
            entries.push(Entry {
                pr,
                truth_positive: label,
                truth_indices,
            });
        }
    }
    Ok(entries)
}

#[derive(Serialize)]
struct EntryLine<'a> {
    #[serde(flatten)]
    result: &'a RunResult,
    rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a str>,
}

pub fn evaluate(cfg: &AppConfig, args: &EvaluateArgs) -> CliResult<()> {
    let entries = load_entries(args)?;
    let opts = MetricsOptions {
        averaging: args.averaging.into(),
        ..Default::default()
    };
    let report: MetricsReport = if args.random {
        if !(0.0..=1.0).contains(&args.prevalence) {
            return Err(input(anyhow!("prevalence must lie in [0, 1]")));
        }
        random_baseline(
            &corpus_stats(&entries),
            BaselineParams {
                prevalence: args.prevalence,
                picks: cfg.pipeline.top_k_indices,
                trials: args.trials,
                seed: cfg.seed,
            },
        )
    } else {
        let engine = Engine::new(cfg, args.backend.record.is_some())?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build().map_err(input)?;
        let runs: Vec<(RunResult, Recommendation)> = pool.install(|| {
            use rayon::prelude::*;
            entries.par_iter().map(|e| run_entry(cfg, &engine, e)).collect()
        });
        if let Some(path) = &args.results {
            write_results(path, &runs)?;
        }
        engine.write_recording(args.backend.record.as_deref())?;
        let failures: Vec<&Recommendation> = runs.iter().map(|(_, r)| r).filter(|r| r.failure.is_some()).collect();
        if let Some(first) = failures.first() {
            return Err(backend(anyhow!(
                "{} of {} runs hit backend errors; first {}: {}",
                failures.len(),
                runs.len(),
                first.pr_key,
                first.failure.as_deref().unwrap_or_default()
            )));
        }
        let label = match cfg.pipeline.mode {
            Mode::Static => "static",
            Mode::Agentic => "agentic",
        };
        let results: Vec<RunResult> = runs.into_iter().map(|(r, _)| r).collect();
        score(label, &results, opts).map_err(input)?
    };
    if args.json {
        let text = serde_json::to_string_pretty(&Dump {
            version: REPORT_VERSION,
            body: &report,
        })
        .map_err(input)?;
        println!("{text}");
    } else {
        print!("{}", MetricsReport::render_table(std::slice::from_ref(&report)));
        print!("{report}");
    }
    Ok(())
}

fn corpus_stats(entries: &[Entry]) -> CorpusStats {
    CorpusStats {
        positives: entries
            .iter()
            .filter(|e| e.truth_positive)
            .map(|e| (segment_readme(&e.pr.readme_before).len(), e.truth_indices.len()))
            .collect(),
        negatives: entries.iter().filter(|e| !e.truth_positive).count(),
    }
}

fn run_entry(cfg: &AppConfig, engine: &Engine, e: &Entry) -> (RunResult, Recommendation) {
    let rec = engine.run(cfg, &e.pr);
    let doc = segment_readme(&e.pr.readme_before);
    let result = RunResult {
        pr_key: rec.pr_key.clone(),
        predicted_positive: rec.decision == Decision::Update,
        predicted_indices: rec.ranked_indices.clone(),
        truth_positive: e.truth_positive,
        truth_indices: e.truth_indices.clone(),
        tree: Arc::new(build_hierarchy(&doc)),
    };
    (result, rec)
}

fn write_results(path: &Path, runs: &[(RunResult, Recommendation)]) -> CliResult<()> {
    let mut out = create(path)?;
    for (result, rec) in runs {
        let line = EntryLine {
            result,
            rounds: rec.rounds,
            failure: rec.failure.as_deref(),
        };
        let text = serde_json::to_string(&line).map_err(input)?;
        writeln!(out, "{text}").input_ctx(|| format!("cannot write {}", path.display()))?;
    }
    out.flush().input_ctx(|| format!("cannot write {}", path.display()))
}
