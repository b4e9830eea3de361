//! Positive/negative dataset construction: keyword and chronology filters,
//! Tukey-fence outlier thresholds, and seeded negative sampling.

use chrono::Duration;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ground_truth_indices, is_root_readme, PullRequest};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterThresholds {
    pub max_readme_paragraphs: usize,
    pub max_changed_files: usize,
    pub max_commits: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            max_readme_paragraphs: 11,
            max_changed_files: 145,
            max_commits: 23,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_readme_paragraphs == 0 || self.max_changed_files == 0 || self.max_commits == 0 {
            return Err("filter thresholds must be positive".into());
        }
        Ok(())
    }
}

/// `false` when the title mentions the README (any case).
pub fn filter_readme_keyword(pr: &PullRequest) -> bool {
    !pr.title.to_lowercase().contains("readme")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChronologyMode {
    /// README edit must follow at least one code commit.
    #[default]
    AfterSome,
    /// README edit must follow every code commit.
    AfterAll,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChronologyDecision {
    pub keep: bool,
    /// Set when the decision was forced by missing data.
    pub flag: Option<&'static str>,
}

impl ChronologyDecision {
    fn flagged(flag: &'static str) -> Self {
        Self {
            keep: false,
            flag: Some(flag),
        }
    }
}

/// Keeps a PR whose first README-touching commit lands at least
/// `threshold` after a commit that modified another file.
pub fn filter_chronology(pr: &PullRequest, threshold: Duration, mode: ChronologyMode) -> ChronologyDecision {
    if pr.commits.iter().any(|c| c.files.is_none()) || pr.commits.is_empty() {
        return ChronologyDecision::flagged("missing_commit_files");
    }
    let readme_times = pr
        .commits
        .iter()
        .filter(|c| c.files.as_ref().unwrap().iter().any(|f| is_root_readme(f)))
        .map(|c| c.authored_at);
    let code_times: Vec<_> = pr
        .commits
        .iter()
        .filter(|c| c.files.as_ref().unwrap().iter().any(|f| !is_root_readme(f)))
        .map(|c| c.authored_at)
        .collect();
    let Some(first_readme) = readme_times.min() else {
        return ChronologyDecision::flagged("no_readme_commit");
    };
    let reference = match mode {
        ChronologyMode::AfterSome => code_times.iter().min(),
        ChronologyMode::AfterAll => code_times.iter().max(),
    };
    let Some(&reference) = reference else {
        return ChronologyDecision::flagged("no_code_commit");
    };
    ChronologyDecision {
        keep: first_readme - reference >= threshold,
        flag: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("cannot compute quartiles of an empty sample")]
    Empty,
}

/// Type-7 quantile of an already sorted sample.
pub fn quantile_sorted<F: Scalar>(sorted: &[u64], q: F) -> Result<F, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::Empty);
    }
    let h = F::from_count(sorted.len() - 1) * q;
    let lo = h.floor();
    let lo_i = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let hi_i = (lo_i + 1).min(sorted.len() - 1);
    let x_lo = F::from_u64(sorted[lo_i]).unwrap();
    let x_hi = F::from_u64(sorted[hi_i]).unwrap();
    Ok(x_lo + (h - lo) * (x_hi - x_lo))
}

/// Q3 + 1.5 × (Q3 − Q1), quartiles by linear interpolation.
pub fn tukey_upper_fence<F: Scalar>(values: &[u64]) -> Result<F, StatsError> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let q1 = quantile_sorted(&sorted, F::lit(0.25))?;
    let q3 = quantile_sorted(&sorted, F::lit(0.75))?;
    Ok(q3 + F::lit(1.5) * (q3 - q1))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierCounts {
    pub paragraphs: usize,
    pub files: usize,
    pub commits: usize,
}

impl OutlierCounts {
    pub fn total(&self) -> usize {
        self.paragraphs + self.files + self.commits
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub positives_in: usize,
    pub negatives_in: usize,
    pub removed_by_keyword: usize,
    pub removed_by_chronology: usize,
    pub chronology_flagged: usize,
    pub removed_by_patch_error: usize,
    pub removed_by_outlier: OutlierCounts,
    pub retained: usize,
    pub negatives_sampled: usize,
    pub negatives_removed_by_outlier: OutlierCounts,
    pub negatives_retained: usize,
}

impl FilterReport {
    /// Checks that every stage count adds back up to its input.
    pub fn is_consistent(&self) -> bool {
        self.input == self.positives_in + self.negatives_in
            && self.positives_in
                == self.removed_by_keyword
                    + self.removed_by_chronology
                    + self.removed_by_patch_error
                    + self.removed_by_outlier.total()
                    + self.retained
            && self.negatives_sampled == self.negatives_removed_by_outlier.total() + self.negatives_retained
            && self.negatives_sampled <= self.negatives_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Negatives sampled per surviving positive, before outlier filtering.
    pub negative_ratio: f64,
    pub seed: u64,
    pub chronology_minutes: i64,
    pub chronology_mode: ChronologyMode,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            negative_ratio: 1.0,
            seed: 0,
            chronology_minutes: 5,
            chronology_mode: ChronologyMode::AfterSome,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dimension {
    Paragraphs,
    Files,
    Commits,
}

/// First bound the record exceeds, checked in paragraphs/files/commits order.
fn exceeded(paragraphs: usize, pr: &PullRequest, t: &FilterThresholds) -> Option<Dimension> {
    if paragraphs > t.max_readme_paragraphs {
        Some(Dimension::Paragraphs)
    } else if pr.files.len() > t.max_changed_files {
        Some(Dimension::Files)
    } else if pr.commits.len() > t.max_commits {
        Some(Dimension::Commits)
    } else {
        None
    }
}

fn bump(counts: &mut OutlierCounts, d: Dimension) {
    match d {
        Dimension::Paragraphs => counts.paragraphs += 1,
        Dimension::Files => counts.files += 1,
        Dimension::Commits => counts.commits += 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub positives: Vec<PullRequest>,
    pub negatives: Vec<PullRequest>,
    pub report: FilterReport,
}

/// Splits a corpus into filtered positives and a seeded negative sample.
///
/// Both outputs are sorted by `(repo, number)`, so the result does not
/// depend on input order.
pub fn build_datasets(prs: impl IntoIterator<Item = PullRequest>, thresholds: &FilterThresholds, opts: &BuildOptions) -> Datasets {
    let mut report = FilterReport::default();
    let mut survivors = Vec::new();
    let mut pool = Vec::new();
    let threshold = Duration::minutes(opts.chronology_minutes);

    for pr in prs {
        report.input += 1;
        let Some(patch) = pr.readme_patch.clone() else {
            report.negatives_in += 1;
            pool.push(pr);
            continue;
        };
        report.positives_in += 1;
        if !filter_readme_keyword(&pr) {
            report.removed_by_keyword += 1;
            continue;
        }
        let chron = filter_chronology(&pr, threshold, opts.chronology_mode);
        if chron.flag.is_some() {
            report.chronology_flagged += 1;
        }
        if !chron.keep {
            report.removed_by_chronology += 1;
            continue;
        }
        match ground_truth_indices(&pr.readme_before, &patch) {
            Ok(idx) => survivors.push((idx.len(), pr)),
            Err(e) => {
                log::warn!("{}: README patch excluded: {e}", pr.key());
                report.removed_by_patch_error += 1;
            }
        }
    }

    let wanted = ((survivors.len() as f64) * opts.negative_ratio).round() as usize;

    let mut positives = Vec::new();
    for (paragraphs, pr) in survivors {
        match exceeded(paragraphs, &pr, thresholds) {
            Some(d) => bump(&mut report.removed_by_outlier, d),
            None => positives.push(pr),
        }
    }
    report.retained = positives.len();

    pool.sort_by_key(|p| p.key());
    let take = wanted.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take).into_vec();
    picked.sort_unstable();
    report.negatives_sampled = take;
    let mut negatives = Vec::with_capacity(take);
    let mut pool: Vec<Option<PullRequest>> = pool.into_iter().map(Some).collect();
    for i in picked {
        let pr = pool[i].take().unwrap();
        match exceeded(0, &pr, thresholds) {
            Some(d) => bump(&mut report.negatives_removed_by_outlier, d),
            None => negatives.push(pr),
        }
    }
    report.negatives_retained = negatives.len();

    positives.sort_by_key(|p| p.key());
    Datasets {
        positives,
        negatives,
        report,
    }
}

/// Fences over a positive set, for documenting where the defaults come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedFences<F> {
    pub readme_paragraphs: F,
    pub changed_files: F,
    pub commits: F,
}

pub fn derive_fences<F: Scalar>(positives: &[PullRequest]) -> Result<DerivedFences<F>, StatsError> {
    let mut paragraphs = Vec::new();
    for pr in positives {
        if let Some(p) = &pr.readme_patch {
            if let Ok(idx) = ground_truth_indices(&pr.readme_before, p) {
                paragraphs.push(idx.len() as u64);
            }
        }
    }
    let files: Vec<u64> = positives.iter().map(|p| p.files.len() as u64).collect();
    let commits: Vec<u64> = positives.iter().map(|p| p.commits.len() as u64).collect();
    Ok(DerivedFences {
        readme_paragraphs: tukey_upper_fence(&paragraphs)?,
        changed_files: tukey_upper_fence(&files)?,
        commits: tukey_upper_fence(&commits)?,
    })
}
