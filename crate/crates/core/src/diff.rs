//! Unified-diff hunk parsing and application.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineMarker {
    Context,
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffHunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<(LineMarker, String)>,
}

impl DiffHunk {
    /// Old-file line number of the first line the hunk consumes.
    ///
    /// A zero-length old side names the line *after which* text is inserted.
    pub fn first_old_line(&self) -> usize {
        if self.old_len == 0 {
            self.old_start + 1
        } else {
            self.old_start
        }
    }

    pub fn header(&self) -> String {
        format!("@@ -{},{} +{},{} @@", self.old_start, self.old_len, self.new_start, self.new_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("line {line}: malformed hunk header `{text}`")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: hunk body does not match header counts (old {old}/{old_expected}, new {new}/{new_expected})")]
    CountMismatch {
        line: usize,
        old: usize,
        old_expected: usize,
        new: usize,
        new_expected: usize,
    },
    #[error("line {line}: unexpected content outside a hunk")]
    StrayLine { line: usize },
    #[error("patch does not apply: {0}")]
    DoesNotApply(String),
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@").unwrap())
}

fn is_file_header(line: &str) -> bool {
    [
        "diff ",
        "index ",
        "--- ",
        "+++ ",
        "new file mode",
        "deleted file mode",
        "old mode",
        "new mode",
        "similarity index",
        "rename from",
        "rename to",
        "Binary files",
    ]
    .iter()
    .any(|p| line.starts_with(p))
}

/// Parses the hunks of a unified diff. File header lines are skipped.
pub fn parse_unified_diff(patch_text: &str) -> Result<Vec<DiffHunk>, DiffError> {
    let mut hunks: Vec<DiffHunk> = Vec::new();
    // (hunk, old seen, new seen, header line number)
    let mut open: Option<(DiffHunk, usize, usize, usize)> = None;

    let close = |open: &mut Option<(DiffHunk, usize, usize, usize)>, hunks: &mut Vec<DiffHunk>, at: usize| {
        if let Some((h, o, n, _)) = open.take() {
            if o != h.old_len || n != h.new_len {
                return Err(DiffError::CountMismatch {
                    line: at,
                    old: o,
                    old_expected: h.old_len,
                    new: n,
                    new_expected: h.new_len,
                });
            }
            hunks.push(h);
        }
        Ok(())
    };

    for (i, raw) in patch_text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.starts_with("@@") {
            close(&mut open, &mut hunks, lineno)?;
            let caps = header_re().captures(line).ok_or_else(|| DiffError::MalformedHeader {
                line: lineno,
                text: line.to_string(),
            })?;
            let num = |k: usize| caps.get(k).map(|m| m.as_str().parse::<usize>());
            let bad = || DiffError::MalformedHeader {
                line: lineno,
                text: line.to_string(),
            };
            let old_start = num(1).unwrap().map_err(|_| bad())?;
            let old_len = num(2).transpose().map_err(|_| bad())?.unwrap_or(1);
            let new_start = num(3).unwrap().map_err(|_| bad())?;
            let new_len = num(4).transpose().map_err(|_| bad())?.unwrap_or(1);
            open = Some((
                DiffHunk {
                    old_start,
                    old_len,
                    new_start,
                    new_len,
                    lines: Vec::new(),
                },
                0,
                0,
                lineno,
            ));
            continue;
        }
        match open.as_mut() {
            Some((h, o, n, _)) if *o < h.old_len || *n < h.new_len => {
                let (marker, body) = match line.chars().next() {
                    Some(' ') => (LineMarker::Context, &line[1..]),
                    Some('+') => (LineMarker::Added, &line[1..]),
                    Some('-') => (LineMarker::Removed, &line[1..]),
                    Some('\\') => continue,
                    // some tools drop the space of empty context lines
                    None => (LineMarker::Context, ""),
                    Some(_) => return Err(DiffError::StrayLine { line: lineno }),
                };
                match marker {
                    LineMarker::Context => {
                        *o += 1;
                        *n += 1;
                    }
                    LineMarker::Removed => *o += 1,
                    LineMarker::Added => *n += 1,
                }
                if *o > h.old_len || *n > h.new_len {
                    return Err(DiffError::CountMismatch {
                        line: lineno,
                        old: *o,
                        old_expected: h.old_len,
                        new: *n,
                        new_expected: h.new_len,
                    });
                }
                h.lines.push((marker, body.to_string()));
            }
            Some(_) => {
                if line.is_empty() || line.starts_with('\\') {
                    continue;
                }
                if is_file_header(line) {
                    close(&mut open, &mut hunks, lineno)?;
                    continue;
                }
                return Err(DiffError::StrayLine { line: lineno });
            }
            None => {
                if line.is_empty() || is_file_header(line) {
                    continue;
                }
                return Err(DiffError::StrayLine { line: lineno });
            }
        }
    }
    let end = patch_text.lines().count() + 1;
    close(&mut open, &mut hunks, end)?;
    Ok(hunks)
}

/// Applies hunks to `before`, verifying every context and removed line.
///
/// Lines are compared after trimming trailing whitespace. The result ends
/// with a newline iff `before` did (or `before` was empty and lines were added).
pub fn apply_hunks(before: &str, hunks: &[DiffHunk]) -> Result<String, DiffError> {
    let old: Vec<&str> = split_lines(before);
    let mut sorted: Vec<&DiffHunk> = hunks.iter().collect();
    sorted.sort_by_key(|h| h.first_old_line());

    let mut out: Vec<String> = Vec::with_capacity(old.len());
    let mut cursor = 1usize; // next old line to copy
    for h in sorted {
        let first = h.first_old_line();
        if first < cursor {
            return Err(DiffError::DoesNotApply(format!("overlapping hunk {}", h.header())));
        }
        if first > old.len() + 1 {
            return Err(DiffError::DoesNotApply(format!("hunk {} starts past end of file", h.header())));
        }
        while cursor < first {
            out.push(old[cursor - 1].to_string());
            cursor += 1;
        }
        for (marker, text) in &h.lines {
            match marker {
                LineMarker::Context | LineMarker::Removed => {
                    let actual = old
                        .get(cursor - 1)
                        .ok_or_else(|| DiffError::DoesNotApply(format!("hunk {} runs past end of file", h.header())))?;
                    if actual.trim_end() != text.trim_end() {
                        return Err(DiffError::DoesNotApply(format!(
                            "line {cursor}: expected `{}`, found `{}`",
                            text.trim_end(),
                            actual.trim_end()
                        )));
                    }
                    if *marker == LineMarker::Context {
                        out.push(actual.to_string());
                    }
                    cursor += 1;
                }
                LineMarker::Added => out.push(text.clone()),
            }
        }
    }
    while cursor <= old.len() {
        out.push(old[cursor - 1].to_string());
        cursor += 1;
    }
    let mut s = out.join("\n");
    if !out.is_empty() && (before.ends_with('\n') || before.is_empty()) {
        s.push('\n');
    }
    Ok(s)
}

/// Lines of `text` without terminators; a trailing newline adds no line.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect()
}
