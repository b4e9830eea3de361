//! Chat backends and the structured-output contracts of the five
//! pipeline components.
//!
//! Each component replies with a single fenced JSON object. A reply that
//! does not fit the schema gets exactly one repair retry; a second
//! violation ends in the component's conservative abstention (relevance
//! and review say no, sufficiency says insufficient, localisation yields
//! no valid indices).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{FilePatch, PullRequest};
use crate::readme::ReadmeDocument;

/// Prompt budget in estimated tokens; longer prompts lose their tail.
pub const TOKEN_BUDGET: usize = 32_768;
/// Most indices a localisation may return.
pub const TOP_K: usize = 5;
/// Every completion in this crate is requested at temperature zero.
pub const TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "C1")]
    Relevance,
    #[serde(rename = "C2")]
    Sufficiency,
    #[serde(rename = "C4")]
    Localisation,
    #[serde(rename = "C5")]
    Review,
    #[serde(rename = "C5-critique")]
    Critique,
    #[serde(rename = "C5-stability")]
    Stability,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Relevance,
        Component::Sufficiency,
        Component::Localisation,
        Component::Review,
        Component::Critique,
        Component::Stability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Relevance => "C1",
            Component::Sufficiency => "C2",
            Component::Localisation => "C4",
            Component::Review => "C5",
            Component::Critique => "C5-critique",
            Component::Stability => "C5-stability",
        }
    }

    fn template_name(self) -> &'static str {
        match self {
            Component::Relevance => "relevance",
            Component::Sufficiency => "sufficiency",
            Component::Localisation => "localisation",
            Component::Review => "review",
            Component::Critique => "critique",
            Component::Stability => "stability",
        }
    }

    fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            Component::Relevance => &["title", "description", "commit_messages", "file_names", "readme_sections"],
            Component::Sufficiency => &["title", "description", "commit_messages", "readme_sections", "patches"],
            Component::Localisation => &["title", "description", "commit_messages", "readme_sections", "patches"],
            Component::Review | Component::Critique | Component::Stability => &["recommendation", "target_sections"],
        }
    }

    fn schema_hint(self) -> &'static str {
        match self {
            Component::Relevance => "```json\n{\"update_required\": true | false}\n```",
            Component::Sufficiency => "```json\n{\"sufficient\": true | false}\n```",
            Component::Localisation => {
                "```json\n{\"ranked_indices\": [<section index>, ...], \"justifications\": {\"<section index>\": \"<why>\"}}\n```"
            }
            Component::Review | Component::Stability => "```json\n{\"approve\": true | false}\n```",
            Component::Critique => "```json\n{\"critique\": \"correct\" | \"hallucinating\" | \"generic\"}\n```",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub component: Component,
    /// `owner/name#number` of the PR under analysis, when known.
    pub pr_key: Option<String>,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// SHA-256 over system and user prompt, hex encoded.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.system, &self.user)
    }
}

pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("chat backend unreachable: {0}")]
    Transport(String),
    #[error("chat backend rejected credentials: {0}")]
    Auth(String),
    #[error("no scripted reply for {0}")]
    NoReply(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Exact token count, when the backend knows its tokenizer.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
    fn count_tokens(&self, text: &str) -> Option<usize> {
        (**self).count_tokens(text)
    }
}

/// Chat-completions endpoint (`model`, `messages`, `temperature`, `max_tokens`).
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut req = ureq::post(&self.url).timeout(self.timeout);
        if let Some(k) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code @ (401 | 403), r)) => {
                return Err(BackendError::Auth(format!("{code}: {}", r.into_string().unwrap_or_default())))
            }
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let v: Value = resp.into_json().map_err(|e| BackendError::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))
    }
}

/// One scripted reply sequence in a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// Restricts the script to one PR (`owner/name#number`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr: Option<String>,
    pub component: Component,
    pub replies: Vec<String>,
}

/// Replay file: exact replies keyed by prompt hash, then per-component scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayFile {
    #[serde(default = "replay_version")]
    pub version: u32,
    #[serde(default)]
    pub by_hash: BTreeMap<String, String>,
    #[serde(default)]
    pub scripts: Vec<ScriptEntry>,
}

fn replay_version() -> u32 {
    1
}

impl Default for ReplayFile {
    fn default() -> Self {
        Self {
            version: replay_version(),
            by_hash: BTreeMap::new(),
            scripts: Vec::new(),
        }
    }
}

/// Deterministic backend answering from a [`ReplayFile`].
///
/// A prompt-hash match wins. Otherwise replies come from the script for
/// `(pr, component)`, falling back to the PR-agnostic script for the
/// component; each script is consumed in order and its last reply repeats.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_hash: BTreeMap<String, String>,
    scripts: HashMap<(Option<String>, Component), Vec<String>>,
    cursors: Mutex<HashMap<(Option<String>, Component), usize>>,
    calls: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_replay(file: ReplayFile) -> Self {
        let mut b = Self::new();
        b.by_hash = file.by_hash;
        for s in file.scripts {
            b.scripts.entry((s.pr, s.component)).or_default().extend(s.replies);
        }
        b
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: ReplayFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if file.version != 1 {
            return Err(format!("{}: unsupported replay version {}", path.display(), file.version));
        }
        Ok(Self::from_replay(file))
    }

    pub fn script(mut self, component: Component, replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.scripts
            .entry((None, component))
            .or_default()
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn script_for(mut self, pr: &str, component: Component, replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.scripts
            .entry((Some(pr.to_string()), component))
            .or_default()
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn with_hash(mut self, hash: impl Into<String>, reply: impl Into<String>) -> Self {
        self.by_hash.insert(hash.into(), reply.into());
        self
    }

    /// Every request seen so far, in order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.lock().unwrap().push(request.clone());
        if let Some(r) = self.by_hash.get(&request.prompt_hash()) {
            return Ok(r.clone());
        }
        let keys = [(request.pr_key.clone(), request.component), (None, request.component)];
        for key in keys {
            if let Some(replies) = self.scripts.get(&key).filter(|r| !r.is_empty()) {
                let mut cursors = self.cursors.lock().unwrap();
                let c = cursors.entry(key).or_insert(0);
                let reply = replies[(*c).min(replies.len() - 1)].clone();
                *c += 1;
                return Ok(reply);
            }
        }
        Err(BackendError::NoReply(format!(
            "{} ({})",
            request.component,
            request.pr_key.as_deref().unwrap_or("any PR")
        )))
    }
}

/// Wraps a live backend and keeps every successful exchange, so a run can
/// be written out as a [`ReplayFile`] and reproduced offline.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<(ChatRequest, String)>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<(ChatRequest, String)> {
        self.log.lock().unwrap().clone()
    }

    /// Replies keyed by prompt hash where a prompt always got the same
    /// reply; prompts that were answered differently on repeat go into
    /// per-PR scripts in call order, which replay consumes the same way.
    pub fn to_replay(&self) -> ReplayFile {
        let log = self.log.lock().unwrap();
        let mut replies: HashMap<String, Vec<&str>> = HashMap::new();
        for (req, reply) in log.iter() {
            replies.entry(req.prompt_hash()).or_default().push(reply);
        }
        let mut file = ReplayFile::default();
        let mut scripts: BTreeMap<(Option<String>, Component), Vec<String>> = BTreeMap::new();
        for (req, reply) in log.iter() {
            let hash = req.prompt_hash();
            if replies[&hash].iter().all(|r| *r == reply) {
                file.by_hash.insert(hash, reply.clone());
            } else {
                scripts.entry((req.pr_key.clone(), req.component)).or_default().push(reply.clone());
            }
        }
        file.scripts = scripts
            .into_iter()
            .map(|((pr, component), replies)| ScriptEntry { pr, component, replies })
            .collect();
        file
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let reply = self.inner.complete(request)?;
        self.log.lock().unwrap().push((request.clone(), reply.clone()));
        Ok(reply)
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        self.inner.count_tokens(text)
    }
}

/// Helpers producing well-formed replies, for scripts and tests.
pub mod reply {
    use super::Critique;

    fn fenced(body: String) -> String {
        format!("```json\n{body}\n```")
    }

    pub fn relevance(update_required: bool) -> String {
        fenced(format!("{{\"update_required\": {update_required}}}"))
    }

    pub fn sufficiency(sufficient: bool) -> String {
        fenced(format!("{{\"sufficient\": {sufficient}}}"))
    }

    pub fn localisation(picks: &[(usize, &str)]) -> String {
        let idx: Vec<String> = picks.iter().map(|(i, _)| i.to_string()).collect();
        let just: serde_json::Map<String, serde_json::Value> = picks
            .iter()
            .map(|(i, j)| (i.to_string(), serde_json::Value::String(j.to_string())))
            .collect();
        fenced(format!(
            "{{\"ranked_indices\": [{}], \"justifications\": {}}}",
            idx.join(", "),
            serde_json::Value::Object(just)
        ))
    }

    pub fn approve(approve: bool) -> String {
        fenced(format!("{{\"approve\": {approve}}}"))
    }

    pub fn critique(c: Critique) -> String {
        fenced(format!("{{\"critique\": \"{}\"}}", c.as_str()))
    }
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Drops the tail of `text` until its estimated token count fits `budget_tokens`.
pub fn truncate_to_budget(text: &str, budget_tokens: usize) -> String {
    if estimate_tokens(text) <= budget_tokens {
        return text.to_string();
    }
    let keep = budget_tokens * 4;
    match text.char_indices().nth(keep) {
        Some((cut, _)) => text[..cut].to_string(),
        None => text.to_string(),
    }
}

/// Tail truncation against an arbitrary token counter.
pub fn truncate_with(text: &str, budget_tokens: usize, count: impl Fn(&str) -> usize) -> String {
    if count(text) <= budget_tokens {
        return text.to_string();
    }
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if count(&text[..bounds[mid]]) <= budget_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    text[..bounds[lo]].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{0}` must contain a [system] and a [user] part")]
    Layout(String),
    #[error("template `{name}` lacks required placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("cannot read template `{0}`: {1}")]
    Io(String, String),
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let s = text.find("[system]").ok_or_else(|| TemplateError::Layout(name.into()))?;
        let u = text.find("[user]").ok_or_else(|| TemplateError::Layout(name.into()))?;
        if u < s {
            return Err(TemplateError::Layout(name.into()));
        }
        Ok(Self {
            system: text[s + "[system]".len()..u].trim().to_string(),
            user: text[u + "[user]".len()..].trim().to_string(),
        })
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// The six component prompts plus the repair instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<Component, PromptTemplate>,
    repair: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let raw = [
            (Component::Relevance, include_str!("../templates/relevance.txt")),
            (Component::Sufficiency, include_str!("../templates/sufficiency.txt")),
            (Component::Localisation, include_str!("../templates/localisation.txt")),
            (Component::Review, include_str!("../templates/review.txt")),
            (Component::Critique, include_str!("../templates/critique.txt")),
            (Component::Stability, include_str!("../templates/stability.txt")),
        ];
        let templates = raw
            .into_iter()
            .map(|(c, t)| (c, PromptTemplate::parse(c.template_name(), t).expect("bundled template")))
            .collect();
        Self {
            templates,
            repair: include_str!("../templates/repair.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.txt` files from `dir`, keeping bundled defaults for absent files.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut t = Self::default();
        for c in Component::ALL {
            let path = dir.join(format!("{}.txt", c.template_name()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(path.display().to_string(), e.to_string()))?;
                t.templates.insert(c, PromptTemplate::parse(c.template_name(), &text)?);
            }
        }
        let repair = dir.join("repair.txt");
        if repair.exists() {
            t.repair = std::fs::read_to_string(&repair).map_err(|e| TemplateError::Io(repair.display().to_string(), e.to_string()))?;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for (c, t) in &self.templates {
            for p in c.required_placeholders() {
                let needle = format!("{{{{{p}}}}}");
                if !t.user.contains(&needle) && !t.system.contains(&needle) {
                    return Err(TemplateError::MissingPlaceholder {
                        name: c.template_name().into(),
                        placeholder: p.to_string(),
                    });
                }
            }
        }
        for p in ["violation", "schema"] {
            if !self.repair.contains(&format!("{{{{{p}}}}}")) {
                return Err(TemplateError::MissingPlaceholder {
                    name: "repair".into(),
                    placeholder: p.into(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, c: Component) -> &PromptTemplate {
        &self.templates[&c]
    }
}

/// What a component sees of the pull request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ContextBundle {
    pub pr_key: Option<String>,
    pub title: String,
    pub description: String,
    pub commit_messages: Vec<String>,
    pub file_names: Vec<String>,
    pub patches: Vec<(String, String)>,
    pub readme_sections: String,
}

impl ContextBundle {
    /// Metadata-only context: description, commit messages, file names.
    pub fn from_pr(pr: &PullRequest, doc: &ReadmeDocument) -> Self {
        Self {
            pr_key: Some(pr.key().to_string()),
            title: pr.title.clone(),
            description: pr.description.clone(),
            commit_messages: pr.commit_messages(),
            file_names: pr.file_names(),
            patches: Vec::new(),
            readme_sections: doc.indexed_listing(),
        }
    }

    pub fn with_patches<'a>(mut self, patches: impl IntoIterator<Item = &'a FilePatch>) -> Self {
        self.patches = patches.into_iter().map(|f| (f.path.clone(), f.patch_text.clone())).collect();
        self
    }

    fn commits_text(&self) -> String {
        if self.commit_messages.is_empty() {
            return "(none)".into();
        }
        self.commit_messages
            .iter()
            .map(|m| format!("- {}", m.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn files_text(&self) -> String {
        if self.file_names.is_empty() {
            return "(none)".into();
        }
        self.file_names.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n")
    }

    fn patches_text(&self) -> String {
        if self.patches.is_empty() {
            return "(none)".into();
        }
        self.patches
            .iter()
            .map(|(p, t)| format!("File: {p}\n```diff\n{}\n```", t.trim_end()))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn description_text(&self) -> String {
        if self.description.trim().is_empty() {
            "(empty)".into()
        } else {
            self.description.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Critique {
    Correct,
    Hallucinating,
    Generic,
}

impl Critique {
    pub fn as_str(self) -> &'static str {
        match self {
            Critique::Correct => "correct",
            Critique::Hallucinating => "hallucinating",
            Critique::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    Static,
    Agentic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct C1Decision {
    pub update_required: bool,
    pub raw: String,
    pub attempts: u32,
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SufficiencyDecision {
    pub sufficient: bool,
    pub raw: String,
    pub attempts: u32,
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocalisationResult {
    pub ranked_indices: Vec<usize>,
    pub justifications: BTreeMap<usize, String>,
}

impl LocalisationResult {
    /// Checks length, range, distinctness, and justification coverage.
    pub fn satisfies_invariants(&self, section_count: usize) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.ranked_indices.len() <= TOP_K
            && self.ranked_indices.iter().all(|&i| {
                (1..=section_count).contains(&i) && seen.insert(i) && self.justifications.get(&i).is_some_and(|j| !j.trim().is_empty())
            })
            && self.justifications.len() == self.ranked_indices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReviewVerdict {
    pub approve: bool,
    /// Present in agentic mode only.
    pub critique: Option<Critique>,
    pub raw: String,
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no-valid-indices")]
    NoValidIndices { raw: String },
}

/// Pulls the single structured object out of a reply.
///
/// Accepts one fenced block (optionally tagged `json`) or, failing that, a
/// reply that is itself a bare JSON object.
pub fn extract_structured(reply: &str) -> Result<Map<String, Value>, String> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let re = FENCE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n(.*?)```").unwrap());
    let blocks: Vec<&str> = re.captures_iter(reply).map(|c| c.get(1).unwrap().as_str()).collect();
    let body = match blocks.as_slice() {
        [one] => *one,
        [] => reply,
        _ => return Err(format!("expected one fenced block, found {}", blocks.len())),
    };
    match serde_json::from_str::<Value>(body.trim()) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("structured reply is not an object".into()),
        Err(e) => Err(format!("structured reply is not valid JSON: {e}")),
    }
}

fn flag(obj: &Map<String, Value>, field: &str, yes: &[&str], no: &[&str]) -> Result<bool, String> {
    match obj.get(field) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::String(s)) => {
            let s = s.trim().to_ascii_lowercase();
            if yes.contains(&s.as_str()) {
                Ok(true)
            } else if no.contains(&s.as_str()) {
                Ok(false)
            } else {
                Err(format!("field `{field}` has unexpected value `{s}`"))
            }
        }
        Some(other) => Err(format!("field `{field}` must be boolean, got {other}")),
        None => Err(format!("missing field `{field}`")),
    }
}

fn parse_critique(obj: &Map<String, Value>) -> Result<Critique, String> {
    let s = obj
        .get("critique")
        .and_then(Value::as_str)
        .ok_or("missing string field `critique`")?
        .trim()
        .to_ascii_lowercase()
        .replace(['_', '-'], " ");
    match s.as_str() {
        "correct" => Ok(Critique::Correct),
        "hallucinating" | "hallucinated" => Ok(Critique::Hallucinating),
        "generic" | "overly generic" => Ok(Critique::Generic),
        other => Err(format!("unknown critique `{other}`")),
    }
}

/// Raw localisation fields before sanitisation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawLocalisation {
    pub ranked_indices: Vec<i64>,
    pub justifications: BTreeMap<i64, String>,
}

fn parse_localisation(obj: &Map<String, Value>) -> Result<RawLocalisation, String> {
    let idx = obj
        .get("ranked_indices")
        .and_then(Value::as_array)
        .ok_or("missing array field `ranked_indices`")?;
    let mut ranked_indices = Vec::new();
    for v in idx {
        match v.as_i64() {
            Some(i) => ranked_indices.push(i),
            None => return Err(format!("index {v} is not an integer")),
        }
    }
    let just = obj
        .get("justifications")
        .and_then(Value::as_object)
        .ok_or("missing object field `justifications`")?;
    let mut justifications = BTreeMap::new();
    for (k, v) in just {
        let (Ok(i), Some(text)) = (k.trim().parse::<i64>(), v.as_str()) else {
            continue;
        };
        justifications.insert(i, text.to_string());
    }
    Ok(RawLocalisation {
        ranked_indices,
        justifications,
    })
}

/// Keeps in-range, first-occurrence, justified indices in rank order, capped at five.
pub fn sanitise_localisation(raw: &RawLocalisation, section_count: usize) -> LocalisationResult {
    let mut out = LocalisationResult::default();
    for &i in &raw.ranked_indices {
        if out.ranked_indices.len() == TOP_K {
            break;
        }
        if i < 1 || i as u64 > section_count as u64 {
            continue;
        }
        let i = i as usize;
        if out.ranked_indices.contains(&i) {
            continue;
        }
        match raw.justifications.get(&(i as i64)).map(|j| j.trim()) {
            Some(j) if !j.is_empty() => {
                out.ranked_indices.push(i);
                out.justifications.insert(i, j.to_string());
            }
            _ => {}
        }
    }
    out
}

enum Asked<T> {
    Parsed { value: T, raw: String, attempts: u32 },
    Violation { raw: String, attempts: u32 },
}

/// Caps concurrent requests to one backend.
#[derive(Debug)]
struct InFlight {
    max: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut busy = self.busy.lock().unwrap();
            while *busy >= self.max {
                busy = self.freed.wait(busy).unwrap();
            }
            *busy += 1;
        }
        let out = f();
        *self.busy.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub budget_tokens: usize,
    pub max_tokens: u32,
    /// Extra attempts after a transport failure.
    pub transport_retries: u32,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            budget_tokens: TOKEN_BUDGET,
            max_tokens: 1024,
            transport_retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Component-level entry point over a chat backend.
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    templates: PromptTemplates,
    config: GatewayConfig,
    in_flight: InFlight,
    abstentions: BTreeMap<Component, AtomicUsize>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self::with_config(backend, PromptTemplates::default(), GatewayConfig::default())
    }

    pub fn with_config(backend: Arc<dyn ChatBackend>, templates: PromptTemplates, config: GatewayConfig) -> Self {
        Self {
            backend,
            templates,
            in_flight: InFlight::new(config.max_in_flight),
            config,
            abstentions: Component::ALL.into_iter().map(|c| (c, AtomicUsize::new(0))).collect(),
        }
    }

    pub fn abstentions(&self) -> BTreeMap<Component, usize> {
        self.abstentions.iter().map(|(c, n)| (*c, n.load(Ordering::Relaxed))).collect()
    }

    fn count(&self, text: &str) -> usize {
        self.backend.count_tokens(text).unwrap_or_else(|| estimate_tokens(text))
    }

    /// Truncates the user prompt so system + user fit the budget.
    pub fn fit_user_prompt(&self, system: &str, user: &str) -> String {
        let left = self.config.budget_tokens.saturating_sub(self.count(system));
        if self.backend.count_tokens("").is_some() {
            truncate_with(user, left, |t| self.count(t))
        } else {
            truncate_to_budget(user, left)
        }
    }

    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut attempt = 0;
        loop {
            match self.in_flight.run(|| self.backend.complete(request)) {
                Ok(r) => return Ok(r),
                Err(BackendError::Transport(e)) if attempt < self.config.transport_retries => {
                    log::debug!("{} transport error, retrying: {e}", request.component);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Builds the request a component would send; exposed for replay recording.
    pub fn build_request(&self, component: Component, pr_key: Option<&str>, vars: &[(&str, &str)], repair: Option<&str>) -> ChatRequest {
        let t = self.templates.get(component);
        let system = render(&t.system, vars);
        let mut user = render(&t.user, vars);
        if let Some(violation) = repair {
            let fix = render(
                &self.templates.repair,
                &[("violation", violation), ("schema", component.schema_hint())],
            );
            user = format!("{}\n\n{}", fix.trim_end(), user);
        }
        ChatRequest {
            component,
            pr_key: pr_key.map(str::to_string),
            user: self.fit_user_prompt(&system, &user),
            system,
            temperature: TEMPERATURE,
            max_tokens: self.config.max_tokens,
        }
    }

    fn ask<T>(
        &self,
        component: Component,
        pr_key: Option<&str>,
        vars: &[(&str, &str)],
        parse: impl Fn(&Map<String, Value>) -> Result<T, String>,
    ) -> Result<Asked<T>, BackendError> {
        let mut violation: Option<String> = None;
        let mut raw = String::new();
        for attempt in 1..=2u32 {
            let req = self.build_request(component, pr_key, vars, violation.as_deref());
            raw = self.send(&req)?;
            match extract_structured(&raw).and_then(|o| parse(&o)) {
                Ok(value) => {
                    return Ok(Asked::Parsed {
                        value,
                        raw,
                        attempts: attempt,
                    })
                }
                Err(e) => {
                    log::debug!("{component} schema violation (attempt {attempt}): {e}");
                    violation = Some(e);
                }
            }
        }
        self.abstentions[&component].fetch_add(1, Ordering::Relaxed);
        Ok(Asked::Violation { raw, attempts: 2 })
    }

    fn bundle_vars(bundle: &ContextBundle, include_patches: bool) -> Vec<(&'static str, String)> {
        vec![
            ("title", bundle.title.clone()),
            ("description", bundle.description_text()),
            ("commit_messages", bundle.commits_text()),
            ("file_names", bundle.files_text()),
            ("patches", if include_patches { bundle.patches_text() } else { String::new() }),
            ("readme_sections", bundle.readme_sections.clone()),
        ]
    }

    /// Whether the PR needs a README update (C1). Patches are not shown.
    pub fn classify_relevance(&self, bundle: &ContextBundle) -> Result<C1Decision, GatewayError> {
        let vars = Self::bundle_vars(bundle, false);
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let parse = |o: &Map<String, Value>| flag(o, "update_required", &["yes", "true"], &["no", "false"]);
        Ok(match self.ask(Component::Relevance, bundle.pr_key.as_deref(), &vars, parse)? {
            Asked::Parsed { value, raw, attempts } => C1Decision {
                update_required: value,
                raw,
                attempts,
                abstained: false,
            },
            Asked::Violation { raw, attempts } => C1Decision {
                update_required: false,
                raw,
                attempts,
                abstained: true,
            },
        })
    }

    /// Whether the current context supports localisation (C2).
    pub fn assess_sufficiency(&self, bundle: &ContextBundle) -> Result<SufficiencyDecision, GatewayError> {
        let vars = Self::bundle_vars(bundle, true);
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let parse = |o: &Map<String, Value>| flag(o, "sufficient", &["sufficient", "yes", "true"], &["insufficient", "no", "false"]);
        Ok(match self.ask(Component::Sufficiency, bundle.pr_key.as_deref(), &vars, parse)? {
            Asked::Parsed { value, raw, attempts } => SufficiencyDecision {
                sufficient: value,
                raw,
                attempts,
                abstained: false,
            },
            Asked::Violation { raw, attempts } => SufficiencyDecision {
                sufficient: false,
                raw,
                attempts,
                abstained: true,
            },
        })
    }

    /// Ranked section indices with justifications (C4).
    pub fn localise_and_justify(&self, bundle: &ContextBundle, section_count: usize) -> Result<LocalisationResult, GatewayError> {
        let vars = Self::bundle_vars(bundle, true);
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        match self.ask(Component::Localisation, bundle.pr_key.as_deref(), &vars, parse_localisation)? {
            Asked::Parsed { value, raw, .. } => {
                let result = sanitise_localisation(&value, section_count);
                if result.ranked_indices.is_empty() {
                    self.abstentions[&Component::Localisation].fetch_add(1, Ordering::Relaxed);
                    Err(GatewayError::NoValidIndices { raw })
                } else {
                    Ok(result)
                }
            }
            Asked::Violation { raw, .. } => Err(GatewayError::NoValidIndices { raw }),
        }
    }

    /// Quality review of a localisation (C5).
    ///
    /// Static mode asks one approve/reject question. Agentic mode first
    /// classifies the justification and, only when it is correct, asks
    /// whether the update is necessary.
    pub fn review_recommendation(
        &self,
        result: &LocalisationResult,
        doc: &ReadmeDocument,
        bundle: &ContextBundle,
        mode: ReviewMode,
    ) -> Result<ReviewVerdict, GatewayError> {
        let recommendation = result
            .ranked_indices
            .iter()
            .map(|i| format!("[{i}] {}", result.justifications.get(i).map(String::as_str).unwrap_or("")))
            .collect::<Vec<_>>()
            .join("\n");
        let targets = result
            .ranked_indices
            .iter()
            .filter_map(|&i| doc.section(i))
            .map(|s| format!("[{}] {}", s.index, s.text))
            .collect::<Vec<_>>()
            .join("\n");
        let mut vars = Self::bundle_vars(bundle, true);
        vars.push(("recommendation", recommendation));
        vars.push(("target_sections", targets));
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let pr = bundle.pr_key.as_deref();
        let approve = |o: &Map<String, Value>| {
            flag(
                o,
                "approve",
                &["approve", "approved", "yes", "true"],
                &["reject", "rejected", "no", "false"],
            )
        };
        let rejected = |raw: String| ReviewVerdict {
            approve: false,
            critique: Some(Critique::Generic),
            raw,
            abstained: true,
        };

        match mode {
            ReviewMode::Static => Ok(match self.ask(Component::Review, pr, &vars, approve)? {
                Asked::Parsed { value, raw, .. } => ReviewVerdict {
                    approve: value,
                    critique: None,
                    raw,
                    abstained: false,
                },
                Asked::Violation { raw, .. } => ReviewVerdict {
                    critique: None,
                    ..rejected(raw)
                },
            }),
            ReviewMode::Agentic => {
                let (critique, raw) = match self.ask(Component::Critique, pr, &vars, parse_critique)? {
                    Asked::Parsed { value, raw, .. } => (value, raw),
                    Asked::Violation { raw, .. } => return Ok(rejected(raw)),
                };
                if critique != Critique::Correct {
                    return Ok(ReviewVerdict {
                        approve: false,
                        critique: Some(critique),
                        raw,
                        abstained: false,
                    });
                }
                Ok(match self.ask(Component::Stability, pr, &vars, approve)? {
                    Asked::Parsed { value, raw, .. } => ReviewVerdict {
                        approve: value,
                        critique: Some(Critique::Correct),
                        raw,
                        abstained: false,
                    },
                    // the critique itself parsed, so it stays on record
                    Asked::Violation { raw, .. } => ReviewVerdict {
                        critique: Some(Critique::Correct),
                        ..rejected(raw)
                    },
                })
            }
        }
    }
}
