//! Pull-request data model, the newline-delimited corpus format, and
//! ground-truth extraction of edited README sections.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diff::{apply_hunks, parse_unified_diff, DiffError, DiffHunk, LineMarker};
use crate::readme::{segment_readme, ReadmeDocument};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrKey {
    pub repo: String,
    pub number: u64,
}

impl fmt::Display for PrKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.repo, self.number)
    }
}

impl std::str::FromStr for PrKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (repo, num) = s.rsplit_once('#').ok_or_else(|| format!("expected owner/name#number, got `{s}`"))?;
        if repo.split('/').count() != 2 || repo.split('/').any(str::is_empty) {
            return Err(format!("repository must be owner/name, got `{repo}`"));
        }
        let number = num.parse::<u64>().map_err(|_| format!("bad pull request number `{num}`"))?;
        if number == 0 {
            return Err("pull request numbers start at 1".into());
        }
        Ok(PrKey {
            repo: repo.to_string(),
            number,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub sha: String,
    pub message: String,
    pub authored_at: DateTime<Utc>,
    /// Paths touched by this commit, when the source provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Added,
    Modified,
    Deleted,
    Renamed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePatch {
    pub path: String,
    pub change_kind: ChangeKind,
    pub patch_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_path: Option<String>,
}

impl FilePatch {
    pub fn hunks(&self) -> Result<Vec<DiffHunk>, DiffError> {
        parse_unified_diff(&self.patch_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequest {
    pub repo: String,
    pub number: u64,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub commits: Vec<Commit>,
    pub files: Vec<FilePatch>,
    pub readme_before: String,
    pub readme_patch: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Record-level annotations such as `readme_missing_at_base`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub const FLAG_README_MISSING: &str = "readme_missing_at_base";

impl PullRequest {
    pub fn key(&self) -> PrKey {
        PrKey {
            repo: self.repo.clone(),
            number: self.number,
        }
    }

    /// Title and description joined by a newline.
    pub fn desc(&self) -> String {
        format!("{}\n{}", self.title, self.description)
    }

    pub fn commit_messages(&self) -> Vec<String> {
        self.commits.iter().map(|c| c.message.clone()).collect()
    }

    pub fn file_names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.path.clone()).collect()
    }

    /// The patch of the root README among the changed files, if any.
    pub fn readme_file(&self) -> Option<&FilePatch> {
        let paths: Vec<&str> = self
            .files
            .iter()
            .filter(|f| is_root_readme(&f.path) || f.old_path.as_deref().is_some_and(is_root_readme))
            .map(|f| f.path.as_str())
            .collect();
        let chosen = pick_root_readme(paths.iter().copied())?;
        self.files.iter().find(|f| f.path == chosen)
    }

    /// Changed files other than the root README.
    pub fn non_readme_files(&self) -> impl Iterator<Item = &FilePatch> {
        let readme = self.readme_file().map(|f| f.path.clone());
        self.files.iter().filter(move |f| Some(&f.path) != readme.as_ref())
    }
}

const README_EXTENSIONS: [&str; 4] = ["md", "markdown", "txt", "rst"];

/// Root-level README named `README` (any case) with an accepted extension.
pub fn is_root_readme(path: &str) -> bool {
    if path.contains('/') {
        return false;
    }
    let (stem, ext) = match path.rsplit_once('.') {
        Some((s, e)) => (s, Some(e)),
        None => (path, None),
    };
    stem.eq_ignore_ascii_case("readme") && ext.is_none_or(|e| README_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Picks the root README among `paths`, preferring `.md`.
pub fn pick_root_readme<'a>(paths: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut candidates: Vec<&str> = paths.into_iter().filter(|p| is_root_readme(p)).collect();
    candidates.sort_by_key(|p| {
        let ext = p.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
        let rank = match ext.as_deref() {
            Some("md") => 0,
            Some("markdown") => 1,
            None => 2,
            Some("txt") => 3,
            _ => 4,
        };
        (rank, p.to_string())
    });
    candidates.into_iter().next()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("record is not valid JSON: {0}")]
    Syntax(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl fmt::Display) -> RecordError {
    RecordError::InvalidField {
        field: field.into(),
        reason: reason.to_string(),
    }
}

fn take<'a>(obj: &'a Map<String, Value>, field: &str) -> Result<&'a Value, RecordError> {
    obj.get(field).ok_or_else(|| RecordError::MissingField(field.to_string()))
}

fn take_str(obj: &Map<String, Value>, field: &str, ctx: &str) -> Result<String, RecordError> {
    match obj.get(field) {
        None => Err(RecordError::MissingField(format!("{ctx}{field}"))),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(invalid(format!("{ctx}{field}"), format!("expected string, got {other}"))),
    }
}

fn take_time(obj: &Map<String, Value>, field: &str, ctx: &str) -> Result<DateTime<Utc>, RecordError> {
    let s = take_str(obj, field, ctx)?;
    DateTime::parse_from_rfc3339(&s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| invalid(format!("{ctx}{field}"), e))
}

fn is_sha(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn parse_commit(v: &Value, i: usize) -> Result<Commit, RecordError> {
    let ctx = format!("commits[{i}].");
    let obj = v.as_object().ok_or_else(|| invalid(format!("commits[{i}]"), "expected object"))?;
    let sha = take_str(obj, "sha", &ctx)?;
    if !is_sha(&sha) {
        return Err(invalid(format!("{ctx}sha"), "expected 40 lowercase hex characters"));
    }
    let files = match obj.get("files") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| invalid(format!("{ctx}files"), e))?),
    };
    Ok(Commit {
        sha,
        message: take_str(obj, "message", &ctx)?,
        authored_at: take_time(obj, "authored_at", &ctx)?,
        files,
    })
}

fn parse_file(v: &Value, i: usize) -> Result<FilePatch, RecordError> {
    let ctx = format!("files[{i}].");
    let obj = v.as_object().ok_or_else(|| invalid(format!("files[{i}]"), "expected object"))?;
    let kind = take(obj, "change_kind").map_err(|_| RecordError::MissingField(format!("{ctx}change_kind")))?;
    let change_kind = serde_json::from_value(kind.clone()).map_err(|e| invalid(format!("{ctx}change_kind"), e))?;
    let old_path = match obj.get("old_path") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(invalid(format!("{ctx}old_path"), format!("expected string, got {other}"))),
    };
    Ok(FilePatch {
        path: take_str(obj, "path", &ctx)?,
        change_kind,
        patch_text: take_str(obj, "patch_text", &ctx)?,
        old_path,
    })
}

/// Parses one corpus record (one JSON object).
pub fn parse_corpus_record(record: &str) -> Result<PullRequest, RecordError> {
    let value: Value = serde_json::from_str(record).map_err(|e| RecordError::Syntax(e.to_string()))?;
    parse_corpus_value(&value)
}

pub fn parse_corpus_value(value: &Value) -> Result<PullRequest, RecordError> {
    let obj = value
        .as_object()
        .ok_or_else(|| RecordError::Syntax("record is not an object".into()))?;

    let repo = take_str(obj, "repo", "")?;
    if repo.split('/').count() != 2 || repo.split('/').any(str::is_empty) {
        return Err(invalid("repo", "expected owner/name"));
    }
    let number = match take(obj, "number")? {
        Value::Number(n) => n
            .as_u64()
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid("number", "expected positive integer"))?,
        other => return Err(invalid("number", format!("expected positive integer, got {other}"))),
    };
    let description = match obj.get("description") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(invalid("description", format!("expected string, got {other}"))),
    };
    let commits = take(obj, "commits")?
        .as_array()
        .ok_or_else(|| invalid("commits", "expected array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_commit(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    let files = take(obj, "files")?
        .as_array()
        .ok_or_else(|| invalid("files", "expected array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| parse_file(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    let readme_patch = match take(obj, "readme_patch")? {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => return Err(invalid("readme_patch", format!("expected string or null, got {other}"))),
    };
    let flags = match obj.get("flags") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| invalid("flags", e))?,
    };

    Ok(PullRequest {
        repo,
        number,
        title: take_str(obj, "title", "")?,
        description,
        commits,
        files,
        readme_before: take_str(obj, "readme_before", "")?,
        readme_patch,
        created_at: take_time(obj, "created_at", "")?,
        flags,
    })
}

/// Serialises a record as a single JSON line (no trailing newline).
pub fn to_corpus_line(pr: &PullRequest) -> String {
    serde_json::to_string(pr).expect("pull request serialises")
}

pub fn write_corpus<W: Write>(mut out: W, prs: &[PullRequest]) -> std::io::Result<()> {
    for pr in prs {
        writeln!(out, "{}", to_corpus_line(pr))?;
    }
    out.flush()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    pub skipped: usize,
    /// (1-based line number, error) for every skipped record.
    pub errors: Vec<(usize, String)>,
}

/// Reads a newline-delimited corpus, skipping and counting bad records.
pub fn load_corpus<R: BufRead>(input: R) -> std::io::Result<(Vec<PullRequest>, LoadReport)> {
    let mut prs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_corpus_record(&line) {
            Ok(pr) => {
                prs.push(pr);
                report.loaded += 1;
            }
            Err(e) => {
                log::warn!("skipping corpus line {}: {e}", i + 1);
                report.skipped += 1;
                report.errors.push((i + 1, e.to_string()));
            }
        }
    }
    Ok((prs, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pr_key: PrKey,
    pub updated_indices: BTreeSet<usize>,
    pub is_positive: bool,
}

/// Section indices of `readme_before` touched by `readme_patch`.
///
/// Removed lines map to the section containing them. A run of added lines
/// with no removed line beside it maps to the section holding the last old
/// line before the insertion point, or section 1 when inserted before all
/// content. Blank old lines resolve to the nearest preceding section.
pub fn ground_truth_indices(readme_before: &str, readme_patch: &str) -> Result<BTreeSet<usize>, DiffError> {
    let doc = segment_readme(readme_before);
    let hunks = parse_unified_diff(readme_patch)?;
    apply_hunks(&doc.raw_text, &hunks)?;
    Ok(indices_for_hunks(&doc, &hunks))
}

pub(crate) fn indices_for_hunks(doc: &ReadmeDocument, hunks: &[DiffHunk]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if doc.is_empty() {
        return out;
    }
    let anchor = |line: usize| -> usize { doc.section_at_or_before(line).map_or(1, |s| s.index) };

    for h in hunks {
        let mut cursor = h.first_old_line();
        let mut i = 0;
        while i < h.lines.len() {
            if h.lines[i].0 == LineMarker::Context {
                cursor += 1;
                i += 1;
                continue;
            }
            // one change block: a maximal run of added/removed lines
            let block_start_line = cursor;
            let mut removed = Vec::new();
            while i < h.lines.len() && h.lines[i].0 != LineMarker::Context {
                if h.lines[i].0 == LineMarker::Removed {
                    removed.push(cursor);
                    cursor += 1;
                }
                i += 1;
            }
            if removed.is_empty() {
                let before = block_start_line - 1;
                out.insert(if before == 0 { 1 } else { anchor(before) });
            } else {
                out.extend(removed.into_iter().map(anchor));
            }
        }
    }
    out
}

/// Ground truth for a record; `None` readme patch yields a negative.
pub fn ground_truth(pr: &PullRequest) -> Result<GroundTruth, DiffError> {
    let updated_indices = match &pr.readme_patch {
        Some(p) => ground_truth_indices(&pr.readme_before, p)?,
        None => BTreeSet::new(),
    };
    Ok(GroundTruth {
        pr_key: pr.key(),
        is_positive: pr.readme_patch.is_some() || !updated_indices.is_empty(),
        updated_indices,
    })
}
