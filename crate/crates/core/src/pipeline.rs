//! Static and agentic orchestration of the five components.
//!
//! Static: relevance gate, sufficiency check, at most one retrieval of the
//! top-ranked patch, localisation, one review. Agentic: the same
//! components, but an insufficient context slides the retrieval window to
//! the next patch, and the review's critique resizes the window before
//! another pass through sufficiency and localisation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::corpus::{FilePatch, PullRequest};
use crate::llm::{ContextBundle, Critique, GatewayError, LlmGateway, ReviewMode, ReviewVerdict, TOP_K};
use crate::readme::{segment_readme, ReadmeDocument};
use crate::retrieval::{score_patches, EmbeddingBackend, PatchScore, RetrievalWindow};
use crate::scalar::Scalar;

pub const REPORT_VERSION: &str = "readme-drift report v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    #[default]
    Agentic,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Mode::Static),
            "agentic" => Ok(Mode::Agentic),
            other => Err(format!("unknown mode `{other}` (expected static or agentic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub window_size_k: usize,
    pub max_iterations_p: usize,
    pub top_k_indices: usize,
    pub static_retrieval_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Agentic,
            window_size_k: 3,
            max_iterations_p: 3,
            top_k_indices: TOP_K,
            static_retrieval_count: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size_k == 0 {
            return Err("window size k must be at least 1".into());
        }
        if self.max_iterations_p == 0 {
            return Err("iteration budget p must be at least 1".into());
        }
        if !(1..=TOP_K).contains(&self.top_k_indices) {
            return Err(format!("top_k_indices must be in 1..={TOP_K}"));
        }
        if self.static_retrieval_count == 0 {
            return Err("static_retrieval_count must be at least 1".into());
        }
        Ok(())
    }

    /// Upper bound on component rounds: relevance, sufficiency passes, localisation passes.
    pub fn round_bound(&self) -> usize {
        1 + 2 * self.max_iterations_p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub stage: Stage,
    /// Refinement pass the event belongs to; 0 before any refinement.
    pub iteration: usize,
    pub summary: String,
    /// Retrieval window in effect, when patches were available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<RetrievalWindow>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    NoUpdate,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub pr_key: String,
    pub decision: Decision,
    pub ranked_indices: Vec<usize>,
    pub justifications: BTreeMap<usize, String>,
    pub verdict_trail: Vec<ReviewVerdict>,
    pub trace: Vec<TraceEvent>,
    /// Relevance, sufficiency, and localisation passes performed.
    pub rounds: usize,
    /// Backend error that forced a fail-closed `no_update`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Recommendation {
    pub fn stages(&self) -> Vec<Stage> {
        self.trace.iter().map(|e| e.stage).collect()
    }

    /// Line-oriented report, stable across runs with a logical clock.
    pub fn render_report(&self, doc: &ReadmeDocument) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{REPORT_VERSION}");
        let _ = writeln!(out, "pr: {}", self.pr_key);
        match self.decision {
            Decision::NoUpdate => {
                let _ = writeln!(out, "decision: no_update");
                let _ = writeln!(out, "no update required");
            }
            Decision::Update => {
                let _ = writeln!(out, "decision: update");
                let _ = writeln!(out, "sections:");
                for (rank, i) in self.ranked_indices.iter().enumerate() {
                    let heading = doc.section(*i).map(|s| section_heading(doc, s.index)).unwrap_or_default();
                    let _ = writeln!(out, "  {}. [{}] {}", rank + 1, i, heading);
                    if let Some(j) = self.justifications.get(i) {
                        let _ = writeln!(out, "     justification: {}", j.replace('\n', " "));
                    }
                }
            }
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "failure: {f}");
        }
        let _ = writeln!(out, "rounds: {}", self.rounds);
        let _ = writeln!(out, "trace:");
        for e in &self.trace {
            let _ = writeln!(
                out,
                "  {} {} #{} {}",
                e.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
                e.stage,
                e.iteration,
                e.summary
            );
        }
        out
    }
}

/// Header title of the section, or of its nearest preceding header, plus a
/// snippet of the section itself.
fn section_heading(doc: &ReadmeDocument, index: usize) -> String {
    let header = doc.sections[..index]
        .iter()
        .rev()
        .find_map(|s| s.title())
        .unwrap_or_else(|| "(preamble)".into());
    let section = &doc.sections[index - 1];
    if section.header_level.is_some() {
        return header;
    }
    let snippet: String = section.text.lines().next().unwrap_or_default().chars().take(60).collect();
    format!("{header} > {}", snippet.trim_end())
}

/// What a pipeline run talks to.
pub struct Backends<'a, F: Scalar = f64> {
    pub gateway: &'a LlmGateway,
    pub embedder: &'a dyn EmbeddingBackend<F>,
    pub clock: &'a dyn Clock,
}

/// The PR as the pipeline sees it: the historical README edit is removed.
pub fn without_readme_change(pr: &PullRequest) -> PullRequest {
    let mut view = pr.clone();
    view.files = pr.non_readme_files().cloned().collect();
    view.readme_patch = None;
    view
}

struct Run<'a, 'b, F: Scalar> {
    cfg: &'a PipelineConfig,
    backends: &'a Backends<'b, F>,
    rec: Recommendation,
    iteration: usize,
}

enum Halt {
    Done,
    Failed(GatewayError),
}

impl<'a, 'b, F: Scalar> Run<'a, 'b, F> {
    fn new(pr: &PullRequest, cfg: &'a PipelineConfig, backends: &'a Backends<'b, F>) -> Self {
        Self {
            cfg,
            backends,
            rec: Recommendation {
                pr_key: pr.key().to_string(),
                decision: Decision::NoUpdate,
                ranked_indices: Vec::new(),
                justifications: BTreeMap::new(),
                verdict_trail: Vec::new(),
                trace: Vec::new(),
                rounds: 0,
                failure: None,
            },
            iteration: 0,
        }
    }

    fn event(&mut self, stage: Stage, summary: impl Into<String>, window: Option<RetrievalWindow>) {
        self.rec.trace.push(TraceEvent {
            stage,
            iteration: self.iteration,
            summary: summary.into(),
            window,
            timestamp: self.backends.clock.now(),
        });
    }

    fn fail(&mut self, stage: Stage, e: GatewayError, window: Option<RetrievalWindow>) -> Halt {
        self.event(stage, format!("error: {e}"), window);
        Halt::Failed(e)
    }

    fn finish(mut self, halt: Halt) -> Recommendation {
        if let Halt::Failed(e) = halt {
            self.rec.failure = Some(e.to_string());
            self.rec.decision = Decision::NoUpdate;
        }
        if self.rec.decision == Decision::NoUpdate {
            self.rec.ranked_indices.clear();
            self.rec.justifications.clear();
        }
        self.rec
    }

    fn relevance(&mut self, base: &ContextBundle) -> Result<bool, Halt> {
        self.rec.rounds += 1;
        match self.backends.gateway.classify_relevance(base) {
            Ok(d) => {
                let verdict = if d.update_required {
                    "update required"
                } else {
                    "no update required"
                };
                let note = if d.abstained { " (abstained after repair)" } else { "" };
                self.event(Stage::C1, format!("{verdict}, attempts={}{note}", d.attempts), None);
                Ok(d.update_required)
            }
            Err(e) => Err(self.fail(Stage::C1, e, None)),
        }
    }

    fn sufficiency(&mut self, bundle: &ContextBundle, window: Option<RetrievalWindow>) -> Result<bool, Halt> {
        self.rec.rounds += 1;
        match self.backends.gateway.assess_sufficiency(bundle) {
            Ok(d) => {
                let verdict = if d.sufficient { "sufficient" } else { "insufficient" };
                let note = if d.abstained { " (abstained after repair)" } else { "" };
                self.event(
                    Stage::C2,
                    format!("{verdict} with {} patch(es), attempts={}{note}", bundle.patches.len(), d.attempts),
                    window,
                );
                Ok(d.sufficient)
            }
            Err(e) => Err(self.fail(Stage::C2, e, window)),
        }
    }

    fn rank(&mut self, view: &PullRequest, doc: &ReadmeDocument) -> Option<Vec<PatchScore<F>>> {
        match score_patches(view, doc, self.backends.embedder) {
            Ok(s) => Some(s),
            Err(e) => {
                self.event(Stage::C3, format!("retrieval unavailable: {e}"), None);
                None
            }
        }
    }

    /// Localisation; `Ok(None)` when no valid index survived.
    fn localise(
        &mut self,
        bundle: &ContextBundle,
        doc: &ReadmeDocument,
        window: Option<RetrievalWindow>,
    ) -> Result<Option<crate::llm::LocalisationResult>, Halt> {
        self.rec.rounds += 1;
        match self.backends.gateway.localise_and_justify(bundle, doc.len()) {
            Ok(mut r) => {
                r.ranked_indices.truncate(self.cfg.top_k_indices);
                r.justifications.retain(|i, _| r.ranked_indices.contains(i));
                self.event(Stage::C4, format!("ranked {:?}", r.ranked_indices), window);
                Ok(Some(r))
            }
            Err(GatewayError::NoValidIndices { .. }) => {
                self.event(Stage::C4, "no-valid-indices", window);
                Ok(None)
            }
            Err(e) => Err(self.fail(Stage::C4, e, window)),
        }
    }
}

fn bundle_with(base: &ContextBundle, patches: &[&FilePatch]) -> ContextBundle {
    base.clone().with_patches(patches.iter().copied())
}

fn ranked_files<'p, F>(scores: &[PatchScore<F>], view: &'p PullRequest, window: RetrievalWindow) -> Vec<&'p FilePatch> {
    crate::retrieval::window_slice(scores, &view.files, window)
}

fn describe_window<F>(scores: &[PatchScore<F>], window: RetrievalWindow) -> String {
    let r = window.ranks(scores.len());
    let paths: Vec<&str> = scores[r.clone()].iter().map(|s| s.path.as_str()).collect();
    format!("ranks {}-{} of {}: {}", r.start + 1, r.end, scores.len(), paths.join(", "))
}

pub fn run<F: Scalar>(pr: &PullRequest, cfg: &PipelineConfig, backends: &Backends<'_, F>) -> Recommendation {
    match cfg.mode {
        Mode::Static => run_static(pr, cfg, backends),
        Mode::Agentic => run_agentic(pr, cfg, backends),
    }
}

/// Linear workflow: C1 gate, C2, top-ranked patch retrieval when C2 says
/// insufficient, C4, and a single C5 review.
pub fn run_static<F: Scalar>(pr: &PullRequest, cfg: &PipelineConfig, backends: &Backends<'_, F>) -> Recommendation {
    let mut run = Run::new(pr, cfg, backends);
    let halt = static_steps(&mut run, pr);
    run.finish(halt)
}

fn static_steps<F: Scalar>(run: &mut Run<'_, '_, F>, pr: &PullRequest) -> Halt {
    let view = without_readme_change(pr);
    let doc = segment_readme(&pr.readme_before);
    let base = ContextBundle::from_pr(&view, &doc);

    match run.relevance(&base) {
        Ok(true) => {}
        Ok(false) => return Halt::Done,
        Err(h) => return h,
    }
    let sufficient = match run.sufficiency(&base, None) {
        Ok(s) => s,
        Err(h) => return h,
    };
    let mut bundle = base.clone();
    let mut window = None;
    if !sufficient && !view.files.is_empty() {
        if let Some(scores) = run.rank(&view, &doc) {
            let w = RetrievalWindow::new(run.cfg.static_retrieval_count).clamped(scores.len());
            bundle = bundle_with(&base, &ranked_files(&scores, &view, w));
            run.event(Stage::C3, format!("retrieved {}", describe_window(&scores, w)), Some(w));
            window = Some(w);
        }
    }
    let result = match run.localise(&bundle, &doc, window) {
        Ok(Some(r)) => r,
        Ok(None) => return Halt::Done,
        Err(h) => return h,
    };
    match backends_review(run, &result, &doc, &bundle, ReviewMode::Static, window) {
        Ok(v) if v.approve => accept(run, result),
        Ok(_) => {}
        Err(h) => return h,
    }
    Halt::Done
}

fn accept<F: Scalar>(run: &mut Run<'_, '_, F>, result: crate::llm::LocalisationResult) {
    run.rec.decision = Decision::Update;
    run.rec.ranked_indices = result.ranked_indices;
    run.rec.justifications = result.justifications;
}

fn backends_review<F: Scalar>(
    run: &mut Run<'_, '_, F>,
    result: &crate::llm::LocalisationResult,
    doc: &ReadmeDocument,
    bundle: &ContextBundle,
    mode: ReviewMode,
    window: Option<RetrievalWindow>,
) -> Result<ReviewVerdict, Halt> {
    match run.backends.gateway.review_recommendation(result, doc, bundle, mode) {
        Ok(v) => {
            let abstained = if v.abstained { " (abstained after repair)" } else { "" };
            match (mode, v.critique) {
                (ReviewMode::Agentic, Some(c)) => {
                    run.event(
                        Stage::C5,
                        format!("critique {}{}", c.as_str(), if c == Critique::Correct { "" } else { abstained }),
                        window,
                    );
                    if c == Critique::Correct {
                        let verdict = if v.approve { "approved" } else { "rejected" };
                        run.event(Stage::C5, format!("stability check {verdict}{abstained}"), window);
                    }
                }
                _ => {
                    let verdict = if v.approve { "approved" } else { "rejected" };
                    run.event(Stage::C5, format!("{verdict}{abstained}"), window);
                }
            }
            run.rec.verdict_trail.push(v.clone());
            Ok(v)
        }
        Err(e) => Err(run.fail(Stage::C5, e, window)),
    }
}

/// Agentic workflow with the sliding retrieval loop and critique-driven
/// refinement.
///
/// Sufficiency is asked at most `p` times in total and localisation plus
/// review run at most `p` times, so a run makes at most `1 + 2p` component
/// rounds.
pub fn run_agentic<F: Scalar>(pr: &PullRequest, cfg: &PipelineConfig, backends: &Backends<'_, F>) -> Recommendation {
    let mut run = Run::new(pr, cfg, backends);
    let halt = agentic_steps(&mut run, pr);
    run.finish(halt)
}

fn agentic_steps<F: Scalar>(run: &mut Run<'_, '_, F>, pr: &PullRequest) -> Halt {
    let p = run.cfg.max_iterations_p;
    let view = without_readme_change(pr);
    let doc = segment_readme(&pr.readme_before);
    let base = ContextBundle::from_pr(&view, &doc);

    match run.relevance(&base) {
        Ok(true) => {}
        Ok(false) => return Halt::Done,
        Err(h) => return h,
    }

    let scores = if view.files.is_empty() { None } else { run.rank(&view, &doc) };
    let n = scores.as_ref().map_or(0, Vec::len);
    let mut window = scores.as_ref().map(|_| RetrievalWindow::new(run.cfg.window_size_k).clamped(n));
    if let (Some(s), Some(w)) = (&scores, window) {
        run.event(Stage::C3, format!("retrieved {}", describe_window(s, w)), Some(w));
    }
    let bundle_for = |w: Option<RetrievalWindow>| match (&scores, w) {
        (Some(s), Some(w)) => bundle_with(&base, &ranked_files(s, &view, w)),
        _ => base.clone(),
    };

    let mut sufficiency_calls = 0;
    let mut passes = 0;
    loop {
        while sufficiency_calls < p {
            sufficiency_calls += 1;
            match run.sufficiency(&bundle_for(window), window) {
                Ok(true) => break,
                Ok(false) => {}
                Err(h) => return h,
            }
            if sufficiency_calls == p {
                break;
            }
            let Some(next) = window.and_then(|w| w.advanced(n)) else {
                break;
            };
            window = Some(next);
            run.event(
                Stage::C3,
                format!("slid to {}", describe_window(scores.as_deref().unwrap_or(&[]), next)),
                window,
            );
        }

        passes += 1;
        let bundle = bundle_for(window);
        let result = match run.localise(&bundle, &doc, window) {
            Ok(Some(r)) => r,
            Ok(None) => return Halt::Done,
            Err(h) => return h,
        };
        let verdict = match backends_review(run, &result, &doc, &bundle, ReviewMode::Agentic, window) {
            Ok(v) => v,
            Err(h) => return h,
        };
        match verdict.critique {
            Some(Critique::Correct) => {
                if verdict.approve {
                    accept(run, result);
                }
                return Halt::Done;
            }
            _ if passes >= p => {
                run.event(Stage::C5, "refinement budget exhausted", window);
                return Halt::Done;
            }
            Some(c) => {
                run.iteration += 1;
                if let (Some(s), Some(w)) = (&scores, window) {
                    let size = match c {
                        Critique::Generic => w.size + 1,
                        _ => w.size.saturating_sub(1).max(1),
                    };
                    let resized = RetrievalWindow { offset: w.offset, size }.clamped(n);
                    window = Some(resized);
                    let verb = if c == Critique::Generic { "expanded" } else { "contracted" };
                    run.event(Stage::C3, format!("{verb} to {}", describe_window(s, resized)), window);
                }
            }
            None => return Halt::Done,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::corpus::fixtures::{minimal_pr, ts};
    use crate::corpus::ChangeKind;
    use crate::llm::{reply, Component, ScriptedBackend};
    use crate::retrieval::HashedBagOfWords;
    use std::sync::Arc;

    fn pr_with(n_patches: usize) -> PullRequest {
        let mut pr = minimal_pr(1);
        pr.readme_before = "# Tool\n\nIntro.\n\n## Usage\n\nRun it.\n".into();
        pr.files = (0..n_patches)
            .map(|i| FilePatch {
                path: format!("src/f{i}.rs"),
                change_kind: ChangeKind::Modified,
                patch_text: format!("@@ -1 +1 @@\n-old{i}\n+new{i}\n"),
                old_path: None,
            })
            .collect();
        pr
    }

    fn go(pr: &PullRequest, cfg: &PipelineConfig, script: ScriptedBackend) -> (Recommendation, Arc<ScriptedBackend>) {
        let b = Arc::new(script);
        let gateway = LlmGateway::new(b.clone());
        let clock = LogicalClock::new(ts("2024-01-01T00:00:00Z"));
        let embed = HashedBagOfWords::default();
        let backends: Backends<'_, f64> = Backends {
            gateway: &gateway,
            embedder: &embed,
            clock: &clock,
        };
        (run(pr, cfg, &backends), b)
    }

    fn static_cfg() -> PipelineConfig {
        PipelineConfig {
            mode: Mode::Static,
            ..Default::default()
        }
    }

    #[test]
    fn static_gate_stops() {
        let (rec, _) = go(
            &pr_with(2),
            &static_cfg(),
            ScriptedBackend::new().script(Component::Relevance, [reply::relevance(false)]),
        );
        assert_eq!(rec.decision, Decision::NoUpdate);
        assert_eq!(rec.stages(), [Stage::C1]);
    }

    #[test]
    fn static_happy_path() {
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(Component::Sufficiency, [reply::sufficiency(true)])
            .script(Component::Localisation, [reply::localisation(&[(2, "usage changed")])])
            .script(Component::Review, [reply::approve(true)]);
        let (rec, _) = go(&pr_with(2), &static_cfg(), s);
        assert_eq!(rec.decision, Decision::Update);
        assert_eq!(rec.ranked_indices, [2]);
        assert_eq!(rec.stages(), [Stage::C1, Stage::C2, Stage::C4, Stage::C5]);
    }

    #[test]
    fn static_insufficient_retrieves_top_one() {
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(Component::Sufficiency, [reply::sufficiency(false)])
            .script(Component::Localisation, [reply::localisation(&[(2, "x")])])
            .script(Component::Review, [reply::approve(false)]);
        let (rec, b) = go(&pr_with(3), &static_cfg(), s);
        assert_eq!(rec.stages(), [Stage::C1, Stage::C2, Stage::C3, Stage::C4, Stage::C5]);
        assert_eq!(rec.trace[2].window, Some(RetrievalWindow { offset: 0, size: 1 }));
        assert_eq!(rec.decision, Decision::NoUpdate);
        assert!(rec.ranked_indices.is_empty());
        let c4 = b.calls().into_iter().find(|c| c.component == Component::Localisation).unwrap();
        assert_eq!(c4.user.matches("```diff").count(), 1);
    }

    #[test]
    fn agentic_two_slides_then_localise() {
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(
                Component::Sufficiency,
                [reply::sufficiency(false), reply::sufficiency(false), reply::sufficiency(true)],
            )
            .script(Component::Localisation, [reply::localisation(&[(2, "x")])])
            .script(Component::Critique, [reply::critique(Critique::Correct)])
            .script(Component::Stability, [reply::approve(true)]);
        let (rec, _) = go(&pr_with(6), &PipelineConfig::default(), s);
        let slides = rec.trace.iter().filter(|e| e.summary.starts_with("slid")).count();
        assert_eq!(slides, 2);
        assert_eq!(rec.decision, Decision::Update);
        let c4 = rec.trace.iter().find(|e| e.stage == Stage::C4).unwrap();
        assert_eq!(c4.window, Some(RetrievalWindow { offset: 2, size: 3 }));
    }

    #[test]
    fn agentic_generic_expands() {
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(Component::Sufficiency, [reply::sufficiency(true)])
            .script(Component::Localisation, [reply::localisation(&[(2, "x")])])
            .script(
                Component::Critique,
                [reply::critique(Critique::Generic), reply::critique(Critique::Correct)],
            )
            .script(Component::Stability, [reply::approve(true)]);
        let (rec, _) = go(&pr_with(5), &PipelineConfig::default(), s);
        let sizes: Vec<usize> = rec
            .trace
            .iter()
            .filter(|e| e.stage == Stage::C4)
            .map(|e| e.window.unwrap().size)
            .collect();
        assert_eq!(sizes, [3, 4]);
        assert_eq!(rec.decision, Decision::Update);
    }

    #[test]
    fn agentic_hallucinating_floor() {
        // hand simulation with k=1, p=3: C1, C2 sufficient, then three
        // C4/C5 passes each critiqued as hallucinating; the window cannot
        // shrink below 1 and the third pass exhausts the budget
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(Component::Sufficiency, [reply::sufficiency(true)])
            .script(Component::Localisation, [reply::localisation(&[(2, "x")])])
            .script(Component::Critique, [reply::critique(Critique::Hallucinating)]);
        let cfg = PipelineConfig {
            window_size_k: 1,
            ..Default::default()
        };
        let (rec, _) = go(&pr_with(4), &cfg, s);
        assert_eq!(rec.decision, Decision::NoUpdate);
        let c4: Vec<_> = rec.trace.iter().filter(|e| e.stage == Stage::C4).collect();
        assert_eq!(c4.len(), 3);
        assert!(c4.iter().all(|e| e.window.unwrap().size == 1));
        assert_eq!(rec.rounds, 1 + 3 + 3);
        assert!(rec.rounds <= cfg.round_bound());
    }

    #[test]
    fn backend_failure_is_fail_closed() {
        let s = ScriptedBackend::new().script(Component::Relevance, [reply::relevance(true)]);
        let (rec, _) = go(&pr_with(1), &PipelineConfig::default(), s);
        assert_eq!(rec.decision, Decision::NoUpdate);
        assert!(rec.failure.as_deref().unwrap().contains("no scripted reply"));
    }

    #[test]
    fn readme_patch_is_hidden() {
        let mut pr = pr_with(1);
        pr.files.push(FilePatch {
            path: "README.md".into(),
            change_kind: ChangeKind::Modified,
            patch_text: "@@ -3 +3 @@\n-Intro.\n+Secret answer.\n".into(),
            old_path: None,
        });
        let s = ScriptedBackend::new().script(Component::Relevance, [reply::relevance(false)]);
        let (_, b) = go(&pr, &PipelineConfig::default(), s);
        assert!(!b.calls()[0].user.contains("README.md"));
    }

    #[test]
    fn report_is_versioned() {
        let s = ScriptedBackend::new()
            .script(Component::Relevance, [reply::relevance(true)])
            .script(Component::Sufficiency, [reply::sufficiency(true)])
            .script(Component::Localisation, [reply::localisation(&[(4, "command renamed")])])
            .script(Component::Review, [reply::approve(true)]);
        let pr = pr_with(0);
        let (rec, _) = go(&pr, &static_cfg(), s);
        let text = rec.render_report(&segment_readme(&pr.readme_before));
        assert!(text.starts_with(REPORT_VERSION));
        assert!(text.contains("[4] Usage > Run it."));
        assert!(text.contains("justification: command renamed"));
    }
}
