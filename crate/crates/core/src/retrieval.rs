//! Patch ranking by combined PR-intent and README similarity, and the
//! sliding window the agentic loop reads ranked patches through.
//!
//! A patch `p` scores `sim(desc, p) + max_i sim(section_i, p)`, with `sim`
//! the cosine of backend embeddings and `desc` the PR title and description.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{FilePatch, PullRequest};
use crate::readme::ReadmeDocument;
use crate::scalar::Scalar;

/// Characters of `path + patch_text` passed to the embedder.
pub const PATCH_EMBED_CHARS: usize = 4096;
pub const MOCK_DIMENSION: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding backend transport error: {0}")]
    Transport(String),
    #[error("embedding backend returned malformed data: {0}")]
    Malformed(String),
}

/// Text embedder returning unit-norm vectors of a fixed dimension.
///
/// Implementations must be deterministic and tolerate concurrent calls.
pub trait EmbeddingBackend<F: Scalar>: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError>;
}

impl<F: Scalar, B: EmbeddingBackend<F> + ?Sized> EmbeddingBackend<F> for &B {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError> {
        (**self).embed(texts)
    }
}

impl<F: Scalar, B: EmbeddingBackend<F> + ?Sized> EmbeddingBackend<F> for Box<B> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError> {
        (**self).embed(texts)
    }
}

pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn normalise<F: Scalar>(v: &mut [F]) {
    let norm = v.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
    if norm > F::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Offline embedder: token counts hashed into `dimension` buckets, normalised.
///
/// Text without tokens maps to the first basis vector so every output has
/// unit norm.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    pub dimension: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dimension: MOCK_DIMENSION }
    }
}

impl HashedBagOfWords {
    pub fn embed_one<F: Scalar>(&self, text: &str) -> Vec<F> {
        let mut v = vec![F::zero(); self.dimension];
        let mut any = false;
        for t in tokens(text) {
            let b = (fnv1a(&t) % self.dimension as u64) as usize;
            v[b] = v[b] + F::one();
            any = true;
        }
        if !any {
            v[0] = F::one();
        }
        normalise(&mut v);
        v
    }
}

impl<F: Scalar> EmbeddingBackend<F> for HashedBagOfWords {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embeddings endpoint speaking the common `{model, input}` → `data[].embedding` shape.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingBackend {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl<F: Scalar> EmbeddingBackend<F> for HttpEmbeddingBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = ureq::post(&self.url).timeout(self.timeout);
        if let Some(k) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp: serde_json::Value = req
            .send_json(body)
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| EmbeddingError::Malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "expected {} vectors, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len());
        let mut dim = None;
        for item in data {
            let raw = item["embedding"]
                .as_array()
                .ok_or_else(|| EmbeddingError::Malformed("missing `embedding`".into()))?;
            let mut v: Vec<F> = raw
                .iter()
                .map(|x| x.as_f64().and_then(F::from_f64))
                .collect::<Option<_>>()
                .ok_or_else(|| EmbeddingError::Malformed("non-numeric embedding component".into()))?;
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(EmbeddingError::Malformed("inconsistent embedding dimension".into()));
            }
            normalise(&mut v);
            out.push(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore<F> {
    pub file_index: usize,
    pub path: String,
    pub score: F,
    pub desc_sim: F,
    pub best_section_sim: F,
    /// `None` for binary or empty patches, which are scored on the path only.
    pub best_section_index: Option<usize>,
}

/// Text embedded for a patch: path, newline, patch, capped in characters.
pub fn patch_embedding_text(file: &FilePatch) -> String {
    let full = format!("{}\n{}", file.path, file.patch_text);
    match full.char_indices().nth(PATCH_EMBED_CHARS) {
        Some((cut, _)) => full[..cut].to_string(),
        None => full,
    }
}

/// Scores and ranks every file patch of `pr` against its intent and the README.
///
/// Ordering is descending by score, ties broken by ascending path.
pub fn score_patches<F: Scalar, B: EmbeddingBackend<F> + ?Sized>(
    pr: &PullRequest,
    doc: &ReadmeDocument,
    backend: &B,
) -> Result<Vec<PatchScore<F>>, EmbeddingError> {
    if pr.files.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts = vec![pr.desc()];
    texts.extend(doc.sections.iter().map(|s| s.text.clone()));
    for f in &pr.files {
        texts.push(if f.patch_text.trim().is_empty() {
            f.path.clone()
        } else {
            patch_embedding_text(f)
        });
    }
    let vecs = backend.embed(&texts)?;
    if vecs.len() != texts.len() {
        return Err(EmbeddingError::Malformed(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vecs.len()
        )));
    }
    let desc = &vecs[0];
    let sections = &vecs[1..1 + doc.sections.len()];
    let patches = &vecs[1 + doc.sections.len()..];

    let mut scores: Vec<PatchScore<F>> = pr
        .files
        .iter()
        .zip(patches)
        .enumerate()
        .map(|(i, (f, pv))| {
            let desc_sim = cosine(desc, pv);
            let (best_section_sim, best_section_index) = if f.patch_text.trim().is_empty() {
                (F::zero(), None)
            } else {
                let mut best: Option<(F, usize)> = None;
                for (s, sv) in doc.sections.iter().zip(sections) {
                    let sim = cosine(sv, pv);
                    if best.is_none_or(|(b, _)| sim > b) {
                        best = Some((sim, s.index));
                    }
                }
                best.map_or((F::zero(), None), |(s, i)| (s, Some(i)))
            };
            PatchScore {
                file_index: i,
                path: f.path.clone(),
                score: desc_sim + best_section_sim,
                desc_sim,
                best_section_sim,
                best_section_index,
            }
        })
        .collect();
    rank(&mut scores);
    Ok(scores)
}

pub(crate) fn rank<F: Scalar>(scores: &mut [PatchScore<F>]) {
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.path.cmp(&b.path))
            .then_with(|| a.file_index.cmp(&b.file_index))
    });
}

/// Band of ranked patches currently in context: ranks `[offset, offset + size)`, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalWindow {
    pub offset: usize,
    pub size: usize,
}

impl RetrievalWindow {
    pub fn new(size: usize) -> Self {
        Self {
            offset: 0,
            size: size.max(1),
        }
    }

    /// Clamps to a list of `n` ranked patches: size in `1..=n`, band inside the list.
    pub fn clamped(self, n: usize) -> Self {
        if n == 0 {
            return Self {
                offset: 0,
                size: self.size.max(1),
            };
        }
        let size = self.size.clamp(1, n);
        let offset = self.offset.min(n - size);
        Self { offset, size }
    }

    /// Shifts by one rank; `None` when no unseen patch remains.
    pub fn advanced(self, n: usize) -> Option<Self> {
        (self.offset + self.size < n).then_some(Self {
            offset: self.offset + 1,
            size: self.size,
        })
    }

    pub fn ranks(&self, n: usize) -> std::ops::Range<usize> {
        let start = self.offset.min(n);
        start..(self.offset + self.size).min(n)
    }
}

/// Patches at ranks `[offset, offset + size)` of `scores`, in rank order.
pub fn window_slice<'a, F>(scores: &[PatchScore<F>], files: &'a [FilePatch], window: RetrievalWindow) -> Vec<&'a FilePatch> {
    scores[window.ranks(scores.len())].iter().map(|s| &files[s.file_index]).collect()
}

/// Wraps a backend with a per-text cache, so repeated sections are embedded once.
pub struct CachedEmbedder<F, B> {
    inner: B,
    cache: std::sync::Mutex<HashMap<String, Vec<F>>>,
}

impl<F: Scalar, B: EmbeddingBackend<F>> CachedEmbedder<F, B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            cache: std::sync::Mutex::new(HashMap::new()),
        }
    }
}

impl<F: Scalar, B: EmbeddingBackend<F>> EmbeddingBackend<F> for CachedEmbedder<F, B> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbeddingError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().unwrap();
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t, v);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}
