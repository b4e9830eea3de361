//! Client for a GitHub-compatible REST API that assembles corpus records.
//!
//! Requests go through a [`Transport`], which makes the client testable
//! against canned responses and lets a disk cache replay earlier runs
//! offline. Rate-limit state is shared between clones so parallel workers
//! respect one budget.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::{Clock, SystemClock};
use crate::corpus::{pick_root_readme, ChangeKind, Commit, FilePatch, PullRequest, FLAG_README_MISSING};

pub const DEFAULT_BASE_URL: &str = "https://api.github.com";
pub const TOKEN_ENV: &str = "FORGE_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    /// Lowercased header names.
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

impl HttpResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            headers: BTreeMap::new(),
            body: body.into(),
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            headers: BTreeMap::new(),
            body: body.into(),
        }
    }

    pub fn header(mut self, name: &str, value: impl ToString) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    fn header_u64(&self, name: &str) -> Option<u64> {
        self.headers.get(name).and_then(|v| v.trim().parse().ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Clone)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        let mut req = self.agent.get(url);
        for (k, v) in headers {
            req = req.set(k, v);
        }
        let resp = match req.call() {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(TransportError(e.to_string())),
        };
        let status = resp.status();
        let headers = resp
            .headers_names()
            .into_iter()
            .filter_map(|n| resp.header(&n).map(|v| (n.to_ascii_lowercase(), v.to_string())))
            .collect();
        let body = resp.into_string().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, headers, body })
    }
}

/// Serves canned responses by URL; each URL's queue is consumed in order
/// and its last response repeats.
#[derive(Debug, Default)]
pub struct MockTransport {
    routes: Mutex<HashMap<String, VecDeque<Result<HttpResponse, TransportError>>>>,
    requests: Mutex<Vec<String>>,
}

impl MockTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(&self, url: impl Into<String>, response: HttpResponse) -> &Self {
        self.routes.lock().unwrap().entry(url.into()).or_default().push_back(Ok(response));
        self
    }

    pub fn route_error(&self, url: impl Into<String>, error: &str) -> &Self {
        self.routes
            .lock()
            .unwrap()
            .entry(url.into())
            .or_default()
            .push_back(Err(TransportError(error.into())));
        self
    }

    /// URLs requested so far, in order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for MockTransport {
    fn get(&self, url: &str, _headers: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        self.requests.lock().unwrap().push(url.to_string());
        let mut routes = self.routes.lock().unwrap();
        let Some(q) = routes.get_mut(url) else {
            return Ok(HttpResponse::status(404, r#"{"message":"Not Found"}"#));
        };
        if q.len() > 1 {
            q.pop_front().unwrap()
        } else {
            q.front().cloned().unwrap()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    url: String,
    response: HttpResponse,
}

/// On-disk response cache keyed by the SHA-256 of the URL.
///
/// Only successful responses are stored. Without an inner transport the
/// cache runs offline and treats a miss as a transport error.
pub struct CachedTransport {
    dir: PathBuf,
    inner: Option<Arc<dyn Transport>>,
}

impl CachedTransport {
    pub fn new(dir: impl Into<PathBuf>, inner: Arc<dyn Transport>) -> Self {
        Self {
            dir: dir.into(),
            inner: Some(inner),
        }
    }

    pub fn offline(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            inner: None,
        }
    }

    pub fn path_for(dir: &Path, url: &str) -> PathBuf {
        dir.join(format!("{}.json", hex::encode(Sha256::digest(url.as_bytes()))))
    }

    /// Writes one response into a cache directory.
    pub fn store(dir: &Path, url: &str, response: &HttpResponse) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let entry = CacheEntry {
            url: url.to_string(),
            response: response.clone(),
        };
        let path = Self::path_for(dir, url);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)?;
        std::fs::rename(tmp, path)
    }

    fn load(&self, url: &str) -> Option<HttpResponse> {
        let bytes = std::fs::read(Self::path_for(&self.dir, url)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.url == url).then_some(entry.response)
    }
}

impl Transport for CachedTransport {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        if let Some(r) = self.load(url) {
            return Ok(r);
        }
        let Some(inner) = &self.inner else {
            return Err(TransportError(format!("offline cache miss for {url}")));
        };
        let resp = inner.get(url, headers)?;
        if resp.status == 200 {
            if let Err(e) = Self::store(&self.dir, url, &resp) {
                log::warn!("cannot cache {url}: {e}");
            }
        }
        Ok(resp)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested sleeps without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper(Mutex<Vec<Duration>>);

impl RecordingSleeper {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.0.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.0.lock().unwrap().push(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimitState {
    pub remaining: u64,
    pub reset_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgeConfig {
    pub base_url: String,
    pub auth_token: Option<String>,
    pub per_page: u32,
    pub max_retries: u32,
    /// Fetch changed paths per commit (one extra request per commit).
    pub commit_files: bool,
    /// First delay of the exponential network backoff.
    pub backoff: Duration,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            auth_token: None,
            per_page: 100,
            max_retries: 5,
            commit_files: true,
            backoff: Duration::from_millis(500),
        }
    }
}

impl ForgeConfig {
    /// Defaults with the token taken from `FORGE_TOKEN`.
    pub fn from_env() -> Self {
        Self {
            auth_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if !(1..=100).contains(&self.per_page) {
            return Err(ForgeError::Config(format!("per_page {} outside 1..=100", self.per_page)));
        }
        if self.max_retries == 0 {
            return Err(ForgeError::Config("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ForgeError {
    #[error("repository `{0}` not found")]
    RepoNotFound(String),
    #[error("pull request {0} not found")]
    PrNotFound(String),
    #[error("authentication failed ({status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limit still exhausted after {0} attempts")]
    RateLimited(u32),
    #[error("network error after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("unexpected HTTP {status} from {url}")]
    Http { status: u16, url: String },
    #[error("malformed response from {url}: {reason}")]
    Malformed { url: String, reason: String },
    #[error("invalid forge configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFilter {
    /// Closed and merged.
    #[default]
    Merged,
    /// Closed, merged or not.
    Closed,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrSummary {
    pub number: u64,
    pub title: String,
    pub state: String,
    pub created_at: DateTime<Utc>,
    pub merged_at: Option<DateTime<Utc>>,
}

#[derive(Clone)]
pub struct ForgeClient {
    config: ForgeConfig,
    transport: Arc<dyn Transport>,
    sleeper: Arc<dyn Sleeper>,
    clock: Arc<dyn Clock>,
    rate: Arc<Mutex<Option<RateLimitState>>>,
}

impl ForgeClient {
    pub fn new(config: ForgeConfig, transport: Arc<dyn Transport>) -> Result<Self, ForgeError> {
        config.validate()?;
        Ok(Self {
            config,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            clock: Arc::new(SystemClock),
            rate: Arc::new(Mutex::new(None)),
        })
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn rate_limit(&self) -> Option<RateLimitState> {
        *self.rate.lock().unwrap()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn headers(&self) -> Vec<(String, String)> {
        let mut h = vec![
            ("Accept".to_string(), "application/vnd.github+json".to_string()),
            ("User-Agent".to_string(), "readme-drift".to_string()),
        ];
        if let Some(t) = &self.config.auth_token {
            h.push(("Authorization".into(), format!("Bearer {t}")));
        }
        h
    }

    fn update_rate(&self, resp: &HttpResponse) {
        if let (Some(remaining), Some(reset)) = (resp.header_u64("x-ratelimit-remaining"), resp.header_u64("x-ratelimit-reset")) {
            if let Some(reset_at) = Utc.timestamp_opt(reset as i64, 0).single() {
                *self.rate.lock().unwrap() = Some(RateLimitState { remaining, reset_at });
            }
        }
    }

    fn wait_for_reset(&self) {
        let state = *self.rate.lock().unwrap();
        if let Some(RateLimitState { remaining: 0, reset_at }) = state {
            let now = self.clock.now();
            if reset_at > now {
                let wait = (reset_at - now).to_std().unwrap_or_default() + Duration::from_secs(1);
                log::info!("rate limit exhausted, sleeping {}s", wait.as_secs());
                self.sleeper.sleep(wait);
            }
            let mut guard = self.rate.lock().unwrap();
            if let Some(s) = guard.as_mut().filter(|s| s.remaining == 0) {
                s.remaining = 1;
            }
        }
    }

    /// GET returning parsed JSON, `None` on 404.
    ///
    /// Rate-limit responses wait for the advertised reset, network errors
    /// and 5xx back off exponentially; either way at most `max_retries`
    /// failed attempts are made.
    fn get_json(&self, path: &str) -> Result<Option<(Value, HttpResponse)>, ForgeError> {
        let url = self.url(path);
        let max = self.config.max_retries;
        let mut failures = 0u32;
        loop {
            self.wait_for_reset();
            let resp = match self.transport.get(&url, &self.headers()) {
                Ok(r) => r,
                Err(e) => {
                    failures += 1;
                    if failures >= max {
                        return Err(ForgeError::Network {
                            attempts: failures,
                            message: e.0,
                        });
                    }
                    self.sleeper.sleep(self.config.backoff * 2u32.pow(failures - 1));
                    continue;
                }
            };
            self.update_rate(&resp);
            let rate_limited = matches!(resp.status, 403 | 429)
                && (resp.header_u64("x-ratelimit-remaining") == Some(0) || resp.headers.contains_key("retry-after"));
            match resp.status {
                200 => {
                    let v = serde_json::from_str(&resp.body).map_err(|e| ForgeError::Malformed {
                        url: url.clone(),
                        reason: e.to_string(),
                    })?;
                    return Ok(Some((v, resp)));
                }
                404 => return Ok(None),
                _ if rate_limited => {
                    failures += 1;
                    if failures >= max {
                        return Err(ForgeError::RateLimited(failures));
                    }
                    if let Some(secs) = resp.header_u64("retry-after") {
                        self.sleeper.sleep(Duration::from_secs(secs));
                    }
                }
                401 | 403 => {
                    let message = serde_json::from_str::<Value>(&resp.body)
                        .ok()
                        .and_then(|v| v["message"].as_str().map(str::to_string))
                        .unwrap_or_else(|| resp.body.clone());
                    return Err(ForgeError::Auth {
                        status: resp.status,
                        message,
                    });
                }
                s if s >= 500 => {
                    failures += 1;
                    if failures >= max {
                        return Err(ForgeError::Network {
                            attempts: failures,
                            message: format!("HTTP {s}"),
                        });
                    }
                    self.sleeper.sleep(self.config.backoff * 2u32.pow(failures - 1));
                }
                s => return Err(ForgeError::Http { status: s, url }),
            }
        }
    }

    /// Follows `page=` pagination until a short page or a missing `next` link.
    fn get_paged(&self, path: &str, not_found: impl Fn() -> ForgeError) -> Result<Vec<Value>, ForgeError> {
        let per_page = self.config.per_page;
        let sep = if path.contains('?') { '&' } else { '?' };
        let mut out = Vec::new();
        for page in 1.. {
            let (v, resp) = self
                .get_json(&format!("{path}{sep}per_page={per_page}&page={page}"))?
                .ok_or_else(&not_found)?;
            let items = match v {
                Value::Array(a) => a,
                _ => {
                    return Err(ForgeError::Malformed {
                        url: self.url(path),
                        reason: "expected a JSON array".into(),
                    })
                }
            };
            let n = items.len();
            out.extend(items);
            let has_next = resp.headers.get("link").map(|l| l.contains("rel=\"next\""));
            if n < per_page as usize || has_next == Some(false) {
                break;
            }
        }
        Ok(out)
    }

    /// Every pull request of `repo` passing `filter`, descending by number.
    pub fn list_pull_requests(&self, repo: &str, filter: StateFilter) -> Result<Vec<PrSummary>, ForgeError> {
        let state = if filter == StateFilter::All { "all" } else { "closed" };
        let items = self.get_paged(&format!("/repos/{repo}/pulls?state={state}&sort=created&direction=desc"), || {
            ForgeError::RepoNotFound(repo.to_string())
        })?;
        let mut by_number = BTreeMap::new();
        for it in items {
            let s = parse_summary(&it).map_err(|reason| ForgeError::Malformed {
                url: self.url(&format!("/repos/{repo}/pulls")),
                reason,
            })?;
            if filter == StateFilter::Merged && s.merged_at.is_none() {
                continue;
            }
            by_number.insert(s.number, s);
        }
        Ok(by_number.into_values().rev().collect())
    }

    /// Assembles a corpus record for one pull request.
    pub fn fetch_pr_detail(&self, repo: &str, number: u64) -> Result<PullRequest, ForgeError> {
        let key = format!("{repo}#{number}");
        let base_path = format!("/repos/{repo}/pulls/{number}");
        let (pr, _) = self.get_json(&base_path)?.ok_or_else(|| ForgeError::PrNotFound(key.clone()))?;
        let malformed = |reason: String| ForgeError::Malformed {
            url: self.url(&base_path),
            reason,
        };

        let title = pr["title"].as_str().ok_or_else(|| malformed("missing title".into()))?.to_string();
        let description = pr["body"].as_str().unwrap_or_default().to_string();
        let created_at = parse_time(&pr["created_at"]).ok_or_else(|| malformed("missing created_at".into()))?;
        let base_sha = pr["base"]["sha"]
            .as_str()
            .ok_or_else(|| malformed("missing base.sha".into()))?
            .to_string();

        let mut commits = Vec::new();
        for c in self.get_paged(&format!("{base_path}/commits"), || ForgeError::PrNotFound(key.clone()))? {
            let sha = c["sha"]
                .as_str()
                .ok_or_else(|| malformed("commit without sha".into()))?
                .to_ascii_lowercase();
            let message = c["commit"]["message"].as_str().unwrap_or_default().to_string();
            let authored_at = parse_time(&c["commit"]["author"]["date"])
                .or_else(|| parse_time(&c["commit"]["committer"]["date"]))
                .ok_or_else(|| malformed(format!("commit {sha} without date")))?;
            let files = if self.config.commit_files {
                let detail = self.get_json(&format!("/repos/{repo}/commits/{sha}"))?;
                detail.map(|(d, _)| {
                    d["files"]
                        .as_array()
                        .map(|fs| fs.iter().filter_map(|f| f["filename"].as_str().map(str::to_string)).collect())
                        .unwrap_or_default()
                })
            } else {
                None
            };
            commits.push(Commit {
                sha,
                message,
                authored_at,
                files,
            });
        }

        let mut files = Vec::new();
        for f in self.get_paged(&format!("{base_path}/files"), || ForgeError::PrNotFound(key.clone()))? {
            let path = f["filename"]
                .as_str()
                .ok_or_else(|| malformed("file without filename".into()))?
                .to_string();
            let change_kind = match f["status"].as_str().unwrap_or("modified") {
                "added" => ChangeKind::Added,
                "removed" | "deleted" => ChangeKind::Deleted,
                "renamed" => ChangeKind::Renamed,
                _ => ChangeKind::Modified,
            };
            files.push(FilePatch {
                path,
                change_kind,
                patch_text: f["patch"].as_str().unwrap_or_default().to_string(),
                old_path: f["previous_filename"].as_str().map(str::to_string),
            });
        }

        let mut record = PullRequest {
            repo: repo.to_string(),
            number,
            title,
            description,
            commits,
            files,
            readme_before: String::new(),
            readme_patch: None,
            created_at,
            flags: Vec::new(),
        };
        record.readme_patch = record.readme_file().map(|f| f.patch_text.clone());
        match self.readme_at(repo, &base_sha)? {
            Some(text) => record.readme_before = text,
            None => record.flags.push(FLAG_README_MISSING.into()),
        }
        Ok(record)
    }

    /// Text of the root README at `git_ref`, `None` when there is none.
    pub fn readme_at(&self, repo: &str, git_ref: &str) -> Result<Option<String>, ForgeError> {
        let Some((listing, _)) = self.get_json(&format!("/repos/{repo}/contents?ref={git_ref}"))? else {
            return Ok(None);
        };
        let names: Vec<&str> = listing
            .as_array()
            .map(|a| {
                a.iter()
                    .filter(|e| e["type"].as_str().unwrap_or("file") == "file")
                    .filter_map(|e| e["name"].as_str())
                    .collect()
            })
            .unwrap_or_default();
        let Some(name) = pick_root_readme(names) else {
            return Ok(None);
        };
        let path = format!("/repos/{repo}/contents/{name}?ref={git_ref}");
        let Some((file, _)) = self.get_json(&path)? else {
            return Ok(None);
        };
        let encoded: String = file["content"]
            .as_str()
            .unwrap_or_default()
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(encoded)
            .map_err(|e| ForgeError::Malformed {
                url: self.url(&path),
                reason: e.to_string(),
            })?;
        Ok(Some(String::from_utf8_lossy(&bytes).into_owned()))
    }

    /// Lists and fetches every pull request passing `filter`.
    pub fn ingest(&self, repo: &str, filter: StateFilter) -> Result<Vec<PullRequest>, ForgeError> {
        self.list_pull_requests(repo, filter)?
            .iter()
            .map(|s| self.fetch_pr_detail(repo, s.number))
            .collect()
    }
}

fn parse_time(v: &Value) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(v.as_str()?).ok().map(|t| t.with_timezone(&Utc))
}

fn parse_summary(v: &Value) -> Result<PrSummary, String> {
    Ok(PrSummary {
        number: v["number"].as_u64().ok_or("pull request without number")?,
        title: v["title"].as_str().unwrap_or_default().to_string(),
        state: v["state"].as_str().unwrap_or_default().to_string(),
        created_at: parse_time(&v["created_at"]).ok_or("pull request without created_at")?,
        merged_at: parse_time(&v["merged_at"]),
    })
}

/// A set of recorded responses plus the record count they should yield.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedFixture {
    pub base_url: String,
    pub repo: String,
    pub manifest: FixtureManifest,
    pub responses: BTreeMap<String, HttpResponse>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub pull_requests: usize,
    #[serde(default)]
    pub numbers: Vec<u64>,
}

impl RecordedFixture {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn transport(&self) -> MockTransport {
        let t = MockTransport::new();
        for (url, r) in &self.responses {
            t.route(url.clone(), r.clone());
        }
        t
    }

    /// Materialises the responses as an offline cache directory.
    pub fn write_cache(&self, dir: &Path) -> std::io::Result<()> {
        for (url, r) in &self.responses {
            CachedTransport::store(dir, url, r)?;
        }
        Ok(())
    }
}
