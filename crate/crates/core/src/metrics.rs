//! Evaluation metrics: entry recall and specificity, prevalence-adjusted
//! user-facing accuracy, index recall, mean reciprocal rank, hierarchical
//! recall, and a weighted random guesser for comparison.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::readme::{HierarchyTree, NodeId, TreeError, MAX_TREE_DEPTH};
use crate::scalar::{mean_of, ratio, Scalar};

/// Positive to negative ratio assumed in deployment.
pub const PREVALENCE_RATIO: (u32, u32) = (1, 99);

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub pr_key: String,
    pub predicted_positive: bool,
    pub predicted_indices: Vec<usize>,
    pub truth_positive: bool,
    pub truth_indices: BTreeSet<usize>,
    #[serde(skip)]
    pub tree: Arc<HierarchyTree>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

/// Recall `TP/(TP+FN)` and specificity `TN/(TN+FP)`; `None` where a
/// denominator is zero.
pub fn entry_metrics<F: Scalar>(results: &[RunResult]) -> (Option<F>, Option<F>, Confusion) {
    let mut c = Confusion::default();
    for r in results {
        c.record(r.truth_positive, r.predicted_positive);
    }
    (ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp), c)
}

/// Precision of surfaced recommendations when positives and negatives
/// occur in the ratio `prevalence.0 : prevalence.1`.
pub fn user_facing_accuracy<F: Scalar>(recall: F, specificity: F, prevalence: (u32, u32)) -> Option<F> {
    let hits = recall * F::lit(prevalence.0.into());
    let false_alarms = (F::one() - specificity) * F::lit(prevalence.1.into());
    let den = hits + false_alarms;
    (den > F::zero()).then(|| hits / den)
}

/// `|G ∩ P| / |G|`; `None` for an empty truth set.
pub fn index_recall<F: Scalar>(truth: &BTreeSet<usize>, predicted: &[usize]) -> Option<F> {
    let hits = predicted
        .iter()
        .collect::<HashSet<_>>()
        .iter()
        .filter(|i| truth.contains(i))
        .count();
    ratio(hits, truth.len())
}

/// Reciprocal rank of the first predicted index in `truth`; 0 when none is.
pub fn reciprocal_rank<F: Scalar>(truth: &BTreeSet<usize>, predicted: &[usize]) -> F {
    predicted
        .iter()
        .position(|i| truth.contains(i))
        .map_or(F::zero(), |p| F::one() / F::from_count(p + 1))
}

/// Mean reciprocal rank over queries; `None` for an empty query list.
pub fn mean_reciprocal_rank<F: Scalar>(queries: &[(&BTreeSet<usize>, &[usize])]) -> Option<F> {
    mean_of(queries.iter().map(|(g, p)| reciprocal_rank::<F>(g, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LevelKey {
    Node(NodeId),
    Exact(usize),
}

/// Level-`level` keys of `indices`. Preamble sections match exactly;
/// other sections without a node at that level drop out.
fn level_keys(tree: &HierarchyTree, indices: impl IntoIterator<Item = usize>, level: u8) -> Result<HashSet<LevelKey>, TreeError> {
    let mut out = HashSet::new();
    for i in indices {
        if tree.is_preamble(i)? {
            out.insert(LevelKey::Exact(i));
        } else if let Some(n) = tree.node_at_level(i, level)? {
            out.insert(LevelKey::Node(n));
        }
    }
    Ok(out)
}

/// Per level `(|N_i(G) ∩ N_i(P)|, |N_i(G)|)`.
pub fn hierarchical_counts(tree: &HierarchyTree, truth: &BTreeSet<usize>, predicted: &[usize]) -> Result<[(usize, usize); 4], TreeError> {
    let mut out = [(0, 0); 4];
    for level in 1..=MAX_TREE_DEPTH {
        let g = level_keys(tree, truth.iter().copied(), level)?;
        let p = level_keys(tree, predicted.iter().copied(), level)?;
        out[usize::from(level) - 1] = (g.intersection(&p).count(), g.len());
    }
    Ok(out)
}

/// Recall after mapping indices to their enclosing level-1..4 nodes.
/// A level with no truth node is `None`.
pub fn hierarchical_recall<F: Scalar>(
    tree: &HierarchyTree,
    truth: &BTreeSet<usize>,
    predicted: &[usize],
) -> Result<[Option<F>; 4], TreeError> {
    let counts = hierarchical_counts(tree, truth, predicted)?;
    Ok(counts.map(|(hit, den)| ratio(hit, den)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-entry recalls.
    #[default]
    Macro,
    /// Pooled node counts across entries.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub prevalence: (u32, u32),
    pub averaging: Averaging,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            prevalence: PREVALENCE_RATIO,
            averaging: Averaging::Macro,
        }
    }
}

/// Index-level metrics over one selection of entries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IndexMetrics<F> {
    pub index_recall: Option<F>,
    pub mrr: Option<F>,
    pub hierarchical_recall: [Option<F>; 4],
    pub n_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<F> {
    pub label: String,
    pub entry_recall: Option<F>,
    pub entry_specificity: Option<F>,
    pub user_facing_accuracy: Option<F>,
    /// Over entries that are positive in both truth and prediction.
    pub index_recall: Option<F>,
    pub mrr: Option<F>,
    pub hierarchical_recall: [Option<F>; 4],
    pub counts: Confusion,
    pub n_positive_scored: usize,
    /// Same metrics over every truth-positive entry, predicted or not.
    pub unconditional: IndexMetrics<F>,
    pub averaging: Averaging,
}

fn index_metrics<F: Scalar>(results: &[&RunResult], averaging: Averaging) -> Result<IndexMetrics<F>, TreeError> {
    let scored: Vec<&&RunResult> = results.iter().filter(|r| !r.truth_indices.is_empty()).collect();
    let recall = mean_of(
        scored
            .iter()
            .filter_map(|r| index_recall::<F>(&r.truth_indices, &r.predicted_indices)),
    );
    let mrr = mean_of(scored.iter().map(|r| reciprocal_rank::<F>(&r.truth_indices, &r.predicted_indices)));
    let mut hier = [None; 4];
    let per_entry: Vec<[(usize, usize); 4]> = scored
        .iter()
        .map(|r| hierarchical_counts(&r.tree, &r.truth_indices, &r.predicted_indices))
        .collect::<Result<_, _>>()?;
    for (level, slot) in hier.iter_mut().enumerate() {
        *slot = match averaging {
            Averaging::Macro => mean_of(per_entry.iter().filter_map(|c| ratio::<F>(c[level].0, c[level].1))),
            Averaging::Micro => {
                let (hit, den) = per_entry.iter().fold((0, 0), |(h, d), c| (h + c[level].0, d + c[level].1));
                ratio(hit, den)
            }
        };
    }
    Ok(IndexMetrics {
        index_recall: recall,
        mrr,
        hierarchical_recall: hier,
        n_scored: scored.len(),
    })
}

/// Full report over a set of run results.
pub fn evaluate<F: Scalar>(label: &str, results: &[RunResult], opts: MetricsOptions) -> Result<MetricsReport<F>, TreeError> {
    let (recall, spec, counts) = entry_metrics::<F>(results);
    let ufa = match (recall, spec) {
        (Some(r), Some(s)) => user_facing_accuracy(r, s, opts.prevalence),
        _ => None,
    };
    let conditional: Vec<&RunResult> = results.iter().filter(|r| r.truth_positive && r.predicted_positive).collect();
    let all_positive: Vec<&RunResult> = results.iter().filter(|r| r.truth_positive).collect();
    let cond = index_metrics::<F>(&conditional, opts.averaging)?;
    let uncond = index_metrics::<F>(&all_positive, opts.averaging)?;
    Ok(MetricsReport {
        label: label.to_string(),
        entry_recall: recall,
        entry_specificity: spec,
        user_facing_accuracy: ufa,
        index_recall: cond.index_recall,
        mrr: cond.mrr,
        hierarchical_recall: cond.hierarchical_recall,
        counts,
        n_positive_scored: cond.n_scored,
        unconditional: uncond,
        averaging: opts.averaging,
    })
}

fn cell<F: Scalar>(v: Option<F>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", x.to_f64().unwrap_or(f64::NAN)))
}

fn tuple<F: Scalar>(v: &[Option<F>; 4]) -> String {
    format!("({})", v.iter().map(|x| cell(*x)).collect::<Vec<_>>().join(", "))
}

impl<F: Scalar> MetricsReport<F> {
    pub const HEADER: &'static str =
        "approach | entry recall | entry specificity | user-facing acc. | index recall | MRR | hierarchical recall (L1, L2, L3, L4)";

    /// One table row in the header's column order.
    pub fn table_row(&self) -> String {
        format!(
            "{} | {} | {} | {} | {} | {} | {}",
            self.label,
            cell(self.entry_recall),
            cell(self.entry_specificity),
            cell(self.user_facing_accuracy),
            cell(self.index_recall),
            cell(self.mrr),
            tuple(&self.hierarchical_recall)
        )
    }

    pub fn render_table(reports: &[Self]) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.table_row());
            out.push('\n');
        }
        out
    }
}

impl<F: Scalar> fmt::Display for MetricsReport<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(s, "label: {}", self.label);
        let _ = writeln!(s, "counts: tp={} fn={} tn={} fp={}", c.tp, c.fn_, c.tn, c.fp);
        let _ = writeln!(s, "entry_recall: {}", cell(self.entry_recall));
        let _ = writeln!(s, "entry_specificity: {}", cell(self.entry_specificity));
        let _ = writeln!(s, "user_facing_accuracy: {}", cell(self.user_facing_accuracy));
        let _ = writeln!(s, "index_recall: {}", cell(self.index_recall));
        let _ = writeln!(s, "mrr: {}", cell(self.mrr));
        let _ = writeln!(s, "hierarchical_recall: {}", tuple(&self.hierarchical_recall));
        let _ = writeln!(s, "n_positive_scored: {}", self.n_positive_scored);
        let u = &self.unconditional;
        let _ = writeln!(
            s,
            "unconditional: index_recall={} mrr={} hierarchical_recall={} n={}",
            cell(u.index_recall),
            cell(u.mrr),
            tuple(&u.hierarchical_recall),
            u.n_scored
        );
        let _ = write!(s, "averaging: {:?}", self.averaging);
        f.write_str(&s)
    }
}

/// Per-document facts the random guesser needs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// `(section count, ground-truth set size)` per positive.
    pub positives: Vec<(usize, usize)>,
    pub negatives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Probability of predicting a positive label.
    pub prevalence: f64,
    pub picks: usize,
    /// Simulated evaluations; each draws one corpus entry uniformly.
    pub trials: usize,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            prevalence: 0.01,
            picks: 5,
            trials: 10_000,
            seed: 0,
        }
    }
}

/// Monte-Carlo weighted random guesser.
///
/// Each trial draws a corpus entry, labels it positive with probability
/// `prevalence`, and for positives draws a uniform truth set of the
/// recorded size and `picks` distinct uniform guesses. Index recall and
/// MRR average over every positive trial, whatever label the guesser gave,
/// since the guesser's picks do not depend on its label.
pub fn random_baseline<F: Scalar>(stats: &CorpusStats, params: BaselineParams) -> MetricsReport<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let total = stats.positives.len() + stats.negatives;
    let mut counts = Confusion::default();
    let mut recalls = Vec::new();
    let mut rr = Vec::new();
    if total > 0 {
        for _ in 0..params.trials {
            let e = rng.gen_range(0..total);
            let predicted = rng.gen_bool(params.prevalence.clamp(0.0, 1.0));
            let Some(&(n, t)) = stats.positives.get(e) else {
                counts.record(false, predicted);
                continue;
            };
            counts.record(true, predicted);
            if n == 0 || t == 0 {
                continue;
            }
            let truth: BTreeSet<usize> = sample(&mut rng, n, t.min(n)).into_iter().map(|i| i + 1).collect();
            let guess: Vec<usize> = sample(&mut rng, n, params.picks.min(n)).into_iter().map(|i| i + 1).collect();
            recalls.extend(index_recall::<F>(&truth, &guess));
            rr.push(reciprocal_rank::<F>(&truth, &guess));
        }
    }
    let recall = ratio::<F>(counts.tp, counts.tp + counts.fn_);
    let spec = ratio::<F>(counts.tn, counts.tn + counts.fp);
    let ufa = match (recall, spec) {
        (Some(r), Some(s)) => user_facing_accuracy(r, s, PREVALENCE_RATIO),
        _ => None,
    };
    let index = IndexMetrics {
        index_recall: mean_of(recalls.iter().copied()),
        mrr: mean_of(rr.iter().copied()),
        hierarchical_recall: [None; 4],
        n_scored: recalls.len(),
    };
    MetricsReport {
        label: "random guesser".into(),
        entry_recall: recall,
        entry_specificity: spec,
        user_facing_accuracy: ufa,
        index_recall: index.index_recall,
        mrr: index.mrr,
        hierarchical_recall: [None; 4],
        counts,
        n_positive_scored: index.n_scored,
        unconditional: index,
        averaging: Averaging::Macro,
    }
}
