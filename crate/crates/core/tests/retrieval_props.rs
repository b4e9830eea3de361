mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use readme_drift::corpus::{ChangeKind, FilePatch};
use readme_drift::readme::segment_readme;
use readme_drift::retrieval::{
    cosine, patch_embedding_text, score_patches, window_slice, EmbeddingBackend, EmbeddingError, HashedBagOfWords, RetrievalWindow,
};

/// Looks every text up in a fixed table.
struct TableEmbedder(HashMap<String, Vec<f64>>);

impl EmbeddingBackend<f64> for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts
            .iter()
            .map(|t| {
                self.0
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbeddingError::Malformed(format!("no vector for {t:?}")))
            })
            .collect()
    }
}

fn patch(path: &str, body: &str) -> FilePatch {
    FilePatch {
        path: path.into(),
        change_kind: ChangeKind::Modified,
        patch_text: body.into(),
        old_path: None,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn forced_ordering_by_section_similarity() {
    let doc = segment_readme("# Title\n\nAbout widgets.\n");
    let mut pr = negative_pr("a/b", 1);
    pr.title = "t".into();
    pr.files = vec![patch("b.rs", "B"), patch("a.rs", "A")];
    let table = HashMap::from([
        (pr.desc(), vec![1.0, 0.0, 0.0, 0.0]),
        ("# Title".to_string(), vec![0.0, 0.0, 1.0, 0.0]),
        ("About widgets.".to_string(), vec![0.0, 1.0, 0.0, 0.0]),
        (patch_embedding_text(&pr.files[0]), vec![0.0, 0.1, 0.0, (1.0f64 - 0.01).sqrt()]),
        (patch_embedding_text(&pr.files[1]), vec![0.0, 0.9, 0.0, (1.0f64 - 0.81).sqrt()]),
    ]);
    let scores = score_patches(&pr, &doc, &TableEmbedder(table)).unwrap();
    assert_eq!(scores[0].path, "a.rs");
    assert_eq!(scores[0].desc_sim, 0.0);
    assert!(scores[0].best_section_sim > scores[1].best_section_sim);
}

#[test]
fn identical_text_has_unit_desc_similarity() {
    let doc = segment_readme(SMALL_README);
    let mut pr = negative_pr("a/b", 1);
    pr.files = vec![patch("x.rs", "")];
    pr.title = "x.rs".into();
    pr.description = String::new();
    // an empty patch is embedded as its path, and desc is "x.rs\n"
    let scores = score_patches::<f64, _>(&pr, &doc, &HashedBagOfWords::default()).unwrap();
    assert!((scores[0].desc_sim - 1.0).abs() < 1e-9);
    assert_eq!(scores[0].best_section_index, None);
}

#[test]
fn five_patch_ranking_matches_pairwise_oracle() {
    let doc = segment_readme(&read_fixture("readmes/cli_tool.md"));
    let mut pr = negative_pr("a/b", 1);
    pr.title = "Add a --json flag to the export command".into();
    pr.description = "Exports can now be written as JSON.".into();
    pr.files = vec![
        patch("src/export.rs", "@@ -1 +1 @@\n-fn export(csv: bool)\n+fn export(format: Format)\n"),
        patch("src/cli.rs", "@@ -5 +5,2 @@\n+    #[arg(long)]\n+    json: bool,\n"),
        patch("tests/export.rs", "@@ -0,0 +1 @@\n+fn json_export_round_trips() {}\n"),
        patch("Cargo.toml", "@@ -3 +3 @@\n-serde = \"1\"\n+serde_json = \"1\"\n"),
        patch("assets/logo.png", ""),
    ];
    let embedder = HashedBagOfWords::default();
    let scores = score_patches::<f64, _>(&pr, &doc, &embedder).unwrap();

    let desc: Vec<f64> = embedder.embed_one(&pr.desc());
    let sections: Vec<Vec<f64>> = doc.sections.iter().map(|s| embedder.embed_one(&s.text)).collect();
    let mut oracle: Vec<(f64, String)> = pr
        .files
        .iter()
        .map(|f| {
            let empty = f.patch_text.trim().is_empty();
            let text = if empty {
                f.path.clone()
            } else {
                format!("{}\n{}", f.path, f.patch_text)
            };
            let v = embedder.embed_one(&text);
            let best = if empty {
                0.0
            } else {
                sections.iter().map(|s| dot(s, &v)).fold(f64::MIN, f64::max)
            };
            (dot(&desc, &v) + best, f.path.clone())
        })
        .collect();
    // selection sort: repeatedly take the highest score, lowest path on ties
    let mut ranked = Vec::new();
    while !oracle.is_empty() {
        let mut best = 0;
        for i in 1..oracle.len() {
            let (s, p) = &oracle[i];
            let (bs, bp) = &oracle[best];
            if *s > *bs + 1e-12 || ((*s - *bs).abs() <= 1e-12 && p < bp) {
                best = i;
            }
        }
        ranked.push(oracle.remove(best));
    }
    let got: Vec<&str> = scores.iter().map(|s| s.path.as_str()).collect();
    let want: Vec<&str> = ranked.iter().map(|(_, p)| p.as_str()).collect();
    assert_eq!(got, want);
    for (s, (o, _)) in scores.iter().zip(&ranked) {
        assert!((s.score - o).abs() < 1e-9);
        assert!((s.score - (s.desc_sim + s.best_section_sim)).abs() < 1e-12);
    }
}

#[test]
fn window_hand_enumeration() {
    let w = RetrievalWindow::new(3);
    assert_eq!(w.ranks(5), 0..3);
    let late = RetrievalWindow { offset: 3, size: 3 };
    assert_eq!(late.ranks(5), 3..5);
    assert_eq!(late.clamped(5), RetrievalWindow { offset: 2, size: 3 });
    // three passes with p = 3: ranks 1-3, 2-4, 3-5, then nothing new
    let mut seen = Vec::new();
    let mut cur = Some(w);
    for _ in 0..3 {
        let Some(c) = cur else { break };
        seen.push(c.ranks(5));
        cur = c.advanced(5);
    }
    assert_eq!(seen, vec![0..3, 1..4, 2..5]);
    assert_eq!(cur, None);
    assert_eq!(RetrievalWindow::new(0).size, 1);
    let files: Vec<FilePatch> = Vec::new();
    assert!(window_slice::<f64>(&[], &files, w).is_empty());
}

fn random_files(rng: &mut impl Rng) -> Vec<FilePatch> {
    let names = ["src/a.rs", "src/b.rs", "lib/c.py", "docs/d.md", "e.go", "f.js", "g.toml"];
    let n = rng.gen_range(1..=names.len());
    names
        .choose_multiple(rng, n)
        .map(|p| {
            let body = if rng.gen_bool(0.2) {
                String::new()
            } else {
                let words = ["config", "render", "cache", "token", "server", "install"];
                format!("@@ -1 +1 @@\n+{} {}\n", words.choose(rng).unwrap(), words.choose(rng).unwrap())
            };
            patch(p, &body)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cosine_is_symmetric_with_unit_self_similarity(a in "[a-z ]{0,60}", b in "[a-z ]{0,60}") {
        let e = HashedBagOfWords::default();
        let va: Vec<f64> = e.embed_one(&a);
        let vb: Vec<f64> = e.embed_one(&b);
        prop_assert!((cosine(&va, &va) - 1.0).abs() < 1e-6);
        prop_assert!((cosine(&va, &vb) - cosine(&vb, &va)).abs() < 1e-12);
        let norm: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        let v32: Vec<f32> = e.embed_one(&a);
        prop_assert!((cosine(&v32, &v32) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ranking_is_a_sorted_permutation_independent_of_input_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = segment_readme(&random_markdown(&mut rng, 8));
        let mut pr = negative_pr("a/b", 1);
        pr.title = "config cache".into();
        pr.files = random_files(&mut rng);
        let e = HashedBagOfWords::default();
        let a = score_patches::<f64, _>(&pr, &doc, &e).unwrap();
        let mut idx: Vec<usize> = a.iter().map(|s| s.file_index).collect();
        idx.sort();
        prop_assert_eq!(idx, (0..pr.files.len()).collect::<Vec<_>>());
        prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        pr.files.shuffle(&mut rng);
        let b = score_patches::<f64, _>(&pr, &doc, &e).unwrap();
        let paths = |s: &[readme_drift::PatchScore]| s.iter().map(|x| x.path.clone()).collect::<Vec<_>>();
        prop_assert_eq!(paths(&a), paths(&b));
    }

    #[test]
    fn clamped_window_stays_inside(offset in 0usize..20, size in 0usize..20, n in 1usize..15) {
        let w = RetrievalWindow { offset, size }.clamped(n);
        prop_assert!(w.size >= 1 && w.size <= n);
        prop_assert!(w.offset + w.size <= n);
    }
}
