//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;

use readme_drift::corpus::{ChangeKind, Commit, FilePatch, PullRequest};
use readme_drift::readme::{ReadmeDocument, SectionKind};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap()
}

/// The ten real-world-style README fixtures as (name, text).
pub fn readme_fixtures() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(fixture("readmes"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

const WORDS: &[&str] = &[
    "install", "build", "the", "config", "server", "widget", "run", "flag", "docs", "api", "cache", "token", "render", "fast",
];

fn words(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Random markdown mixing ATX and setext headers, paragraphs, fenced code
/// with internal blank lines, lists, tables, and stray blank lines.
pub fn random_markdown(rng: &mut impl Rng, blocks: usize) -> String {
    let mut out = String::new();
    for _ in 0..blocks {
        match rng.gen_range(0..10) {
            0..=2 => {
                let level = rng.gen_range(1..=6);
                out.push_str(&format!("{} {}\n", "#".repeat(level), words(rng, 2)));
            }
            3 => {
                let ch = if rng.gen_bool(0.5) { '=' } else { '-' };
                out.push_str(&format!("{}\n{}\n", words(rng, 2), ch.to_string().repeat(rng.gen_range(3..8))));
            }
            4 | 5 => {
                for _ in 0..rng.gen_range(1..4) {
                    let n = rng.gen_range(1..8);
                    out.push_str(&format!("{}\n", words(rng, n)));
                }
            }
            6 => {
                let fence = if rng.gen_bool(0.5) { "```" } else { "~~~" };
                out.push_str(&format!("{fence}sh\n"));
                for _ in 0..rng.gen_range(0..4) {
                    if rng.gen_bool(0.3) {
                        out.push('\n');
                    } else {
                        out.push_str(&format!("{}\n", words(rng, 3)));
                    }
                }
                out.push_str(&format!("{fence}\n"));
            }
            7 => {
                for _ in 0..rng.gen_range(1..4) {
                    out.push_str(&format!("- {}\n", words(rng, 3)));
                    if rng.gen_bool(0.2) {
                        out.push_str(&format!("  {}\n", words(rng, 2)));
                    }
                }
            }
            8 => {
                out.push_str("| a | b |\n|---|---|\n");
                for _ in 0..rng.gen_range(0..3) {
                    out.push_str(&format!("| {} | {} |\n", words(rng, 1), words(rng, 1)));
                }
            }
            _ => out.push_str(&format!("{}  \n", words(rng, 4))),
        }
        for _ in 0..rng.gen_range(1..3) {
            out.push('\n');
        }
    }
    out
}

/// A document with a strictly nested header chain, no skipped levels, and
/// one paragraph under every header.
pub fn random_strict_markdown(rng: &mut impl Rng, headers: usize) -> String {
    let mut out = String::new();
    let mut level = 0usize;
    for _ in 0..headers {
        level = rng.gen_range(1..=(level + 1).min(4));
        out.push_str(&format!("{} {}\n\n{}\n\n", "#".repeat(level), words(rng, 2), words(rng, 5)));
    }
    out
}

/// Non-blank lines of `text` after the same normalisation the parser applies.
pub fn non_blank_lines(text: &str) -> Vec<String> {
    text.replace("\r\n", "\n")
        .lines()
        .map(|l| l.trim_end().to_string())
        .filter(|l| !l.trim().is_empty())
        .collect()
}

/// Checks the structural document invariants; returns a description of the first failure.
pub fn check_document(raw: &str, doc: &ReadmeDocument) -> Result<(), String> {
    let mut covered = Vec::new();
    for (i, s) in doc.sections.iter().enumerate() {
        if s.index != i + 1 {
            return Err(format!("section {} has index {}", i + 1, s.index));
        }
        if s.text.trim().is_empty() {
            return Err(format!("section {} is blank", s.index));
        }
        if (s.kind == SectionKind::Header) != s.header_level.is_some() {
            return Err(format!("section {} kind/level mismatch", s.index));
        }
        if i > 0 && doc.sections[i - 1].line_range.1 >= s.line_range.0 {
            return Err(format!("section {} overlaps its predecessor", s.index));
        }
        covered.extend(s.text.lines().map(str::to_string).filter(|l| !l.trim().is_empty()));
    }
    let expected = non_blank_lines(raw);
    if covered != expected {
        return Err(format!(
            "coverage mismatch: {} section lines vs {} raw lines",
            covered.len(),
            expected.len()
        ));
    }
    Ok(())
}

/// Level-`level` ancestor of every section, found by scanning headers
/// backwards through the flat section list. `None` means no ancestor.
/// Headers deeper than four never open a node.
pub fn oracle_ancestor(doc: &ReadmeDocument, section: usize, level: u8) -> Option<usize> {
    let mut idx = section;
    // a header owns itself; anything else looks back
    loop {
        let s = &doc.sections[idx - 1];
        if let Some(l) = s.header_level.filter(|&l| l <= 4) {
            if l == level {
                return Some(s.index);
            }
            if l < level {
                return None;
            }
        }
        if idx == 1 {
            return None;
        }
        idx -= 1;
    }
}

pub fn oracle_is_preamble(doc: &ReadmeDocument, section: usize) -> bool {
    doc.sections[..section].iter().all(|s| s.header_level.is_none_or(|l| l > 4))
}

pub fn oracle_hierarchical(doc: &ReadmeDocument, truth: &BTreeSet<usize>, predicted: &[usize]) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for level in 1..=4u8 {
        let key = |s: usize| -> Option<(bool, usize)> {
            if oracle_is_preamble(doc, s) {
                Some((false, s))
            } else {
                oracle_ancestor(doc, s, level).map(|h| (true, h))
            }
        };
        let g: HashSet<(bool, usize)> = truth.iter().filter_map(|&s| key(s)).collect();
        let p: HashSet<(bool, usize)> = predicted.iter().filter_map(|&s| key(s)).collect();
        if !g.is_empty() {
            let hit = g.iter().filter(|k| p.contains(k)).count();
            out[usize::from(level) - 1] = Some(hit as f64 / g.len() as f64);
        }
    }
    out
}

pub fn oracle_index_recall(truth: &BTreeSet<usize>, predicted: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mut hits = 0;
    for g in truth {
        if predicted.iter().any(|p| p == g) {
            hits += 1;
        }
    }
    Some(hits as f64 / truth.len() as f64)
}

pub fn oracle_reciprocal_rank(truth: &BTreeSet<usize>, predicted: &[usize]) -> f64 {
    for (rank, p) in predicted.iter().enumerate() {
        if truth.contains(p) {
            return 1.0 / (rank + 1) as f64;
        }
    }
    0.0
}

/// Type-7 quantile by walking the interpolation segments between order statistics.
pub fn oracle_quantile(values: &[u64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort();
    let n = v.len();
    if n == 1 {
        return v[0] as f64;
    }
    for i in 0..n - 1 {
        let a = i as f64 / (n - 1) as f64;
        let b = (i + 1) as f64 / (n - 1) as f64;
        if q >= a && q <= b {
            let t = (q - a) / (b - a);
            return v[i] as f64 + t * (v[i + 1] as f64 - v[i] as f64);
        }
    }
    v[n - 1] as f64
}

pub fn oracle_fence(values: &[u64]) -> f64 {
    let q1 = oracle_quantile(values, 0.25);
    let q3 = oracle_quantile(values, 0.75);
    q3 + 1.5 * (q3 - q1)
}

/// Random truth set and prediction list over `1..=n`.
pub fn random_sets(rng: &mut impl Rng, n: usize) -> (BTreeSet<usize>, Vec<usize>) {
    let t = rng.gen_range(1..=n.min(6));
    let truth: BTreeSet<usize> = rand::seq::index::sample(rng, n, t).into_iter().map(|i| i + 1).collect();
    let k = rng.gen_range(0..=n.min(5));
    let predicted: Vec<usize> = rand::seq::index::sample(rng, n, k).into_iter().map(|i| i + 1).collect();
    (truth, predicted)
}

pub fn at(minutes: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 6, 1, 12, 0, 0).unwrap() + Duration::minutes(minutes)
}

pub fn sha(n: u64) -> String {
    format!("{:040x}", n.wrapping_mul(0x9e37_79b9_7f4a_7c15) as u128 * 7 + n as u128)
}

pub fn commit(n: u64, minute: i64, files: &[&str]) -> Commit {
    Commit {
        sha: sha(n),
        message: format!("commit {n}"),
        authored_at: at(minute),
        files: Some(files.iter().map(|s| s.to_string()).collect()),
    }
}

pub fn code_patch(path: &str, tag: &str) -> FilePatch {
    FilePatch {
        path: path.into(),
        change_kind: ChangeKind::Modified,
        patch_text: format!("@@ -1 +1 @@\n-old {tag}\n+new {tag}\n"),
        old_path: None,
    }
}

pub const SMALL_README: &str = "# Tool\n\nIntro text.\n\n## Usage\n\nRun it.\n";

/// A README-updating PR editing section 2 of [`SMALL_README`], with one
/// code commit followed by a README commit `gap` minutes later.
pub fn positive_pr(repo: &str, number: u64, gap: i64) -> PullRequest {
    let patch = "@@ -3 +3 @@\n-Intro text.\n+Intro text, updated.\n".to_string();
    PullRequest {
        repo: repo.into(),
        number,
        title: format!("Change {number}"),
        description: String::new(),
        commits: vec![
            commit(number * 10, 0, &["src/lib.rs"]),
            commit(number * 10 + 1, gap, &["README.md"]),
        ],
        files: vec![
            code_patch("src/lib.rs", "x"),
            FilePatch {
                path: "README.md".into(),
                change_kind: ChangeKind::Modified,
                patch_text: patch.clone(),
                old_path: None,
            },
        ],
        readme_before: SMALL_README.into(),
        readme_patch: Some(patch),
        created_at: at(0),
        flags: Vec::new(),
    }
}

pub fn negative_pr(repo: &str, number: u64) -> PullRequest {
    PullRequest {
        repo: repo.into(),
        number,
        title: format!("Code change {number}"),
        description: String::new(),
        commits: vec![commit(number * 10, 0, &["src/lib.rs"])],
        files: vec![code_patch("src/lib.rs", "y")],
        readme_before: SMALL_README.into(),
        readme_patch: None,
        created_at: at(0),
        flags: Vec::new(),
    }
}
