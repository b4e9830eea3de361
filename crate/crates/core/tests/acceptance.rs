//! One PASS/FAIL line per acceptance criterion; exits non-zero on any failure.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use readme_drift::clock::LogicalClock;
use readme_drift::corpus::{write_corpus, PullRequest};
use readme_drift::dataset::{build_datasets, tukey_upper_fence, BuildOptions, FilterThresholds};
use readme_drift::forge::{ForgeClient, ForgeConfig, RecordedFixture};
use readme_drift::llm::{reply, Component, ContextBundle, Critique, GatewayError, LlmGateway, ReviewMode, ScriptedBackend};
use readme_drift::metrics::{
    hierarchical_recall, index_recall, random_baseline, reciprocal_rank, user_facing_accuracy, BaselineParams, CorpusStats,
    PREVALENCE_RATIO,
};
use readme_drift::pipeline::{run, Backends, Decision, Mode, PipelineConfig, Recommendation, Stage};
use readme_drift::readme::{build_hierarchy, segment_readme, MAX_TREE_DEPTH};
use readme_drift::retrieval::HashedBagOfWords;

fn formula_reproduction() {
    let v = user_facing_accuracy(0.52f64, 0.987, PREVALENCE_RATIO).unwrap();
    assert!((v - 0.287).abs() <= 0.001, "{v}");
    let v = user_facing_accuracy(0.01f64, 0.99, PREVALENCE_RATIO).unwrap();
    assert!((v - 0.010).abs() <= 0.001, "{v}");
}

fn baseline_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let stats = CorpusStats {
        positives: (0..400).map(|_| (rng.gen_range(30..=59), rng.gen_range(1..=4))).collect(),
        negatives: 400,
    };
    let r = random_baseline::<f64>(
        &stats,
        BaselineParams {
            trials: 100_000,
            seed: 3,
            ..Default::default()
        },
    );
    let recall = r.index_recall.unwrap();
    let ufa = r.user_facing_accuracy.unwrap();
    assert!((recall - 0.11).abs() <= 0.02, "index recall {recall}");
    assert!((ufa - 0.01).abs() <= 0.005, "user-facing accuracy {ufa}");
}

fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let (truth, predicted) = random_sets(&mut rng, n);
        assert_eq!(index_recall::<f64>(&truth, &predicted), oracle_index_recall(&truth, &predicted));
        assert_eq!(
            reciprocal_rank::<f64>(&truth, &predicted),
            oracle_reciprocal_rank(&truth, &predicted)
        );
    }
    let mut cases = 0;
    while cases < 1000 {
        let blocks = rng.gen_range(1..30);
        let doc = segment_readme(&random_markdown(&mut rng, blocks));
        if doc.is_empty() {
            continue;
        }
        let tree = build_hierarchy(&doc);
        assert!(tree.depth() <= MAX_TREE_DEPTH);
        let (truth, predicted) = random_sets(&mut rng, doc.len());
        assert_eq!(
            hierarchical_recall::<f64>(&tree, &truth, &predicted).unwrap(),
            oracle_hierarchical(&doc, &truth, &predicted)
        );
        cases += 1;
    }
}

fn parser_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut docs: Vec<String> = (0..500)
        .map(|_| {
            let blocks = rng.gen_range(0..40);
            random_markdown(&mut rng, blocks)
        })
        .collect();
    let fixtures = readme_fixtures();
    assert_eq!(fixtures.len(), 10);
    docs.extend(fixtures.into_iter().map(|(_, t)| t));
    for text in &docs {
        let doc = segment_readme(text);
        check_document(text, &doc).unwrap();
        let tree = build_hierarchy(&doc);
        assert!(tree.depth() <= MAX_TREE_DEPTH);
        for s in 1..=doc.len() {
            for level in 1..=4 {
                let got = tree.node_at_level(s, level).unwrap().map(|n| tree.node(n).section_indices[0]);
                assert_eq!(got, oracle_ancestor(&doc, s, level));
            }
        }
    }
}

fn serialised(prs: &[PullRequest]) -> Vec<u8> {
    let mut out = Vec::new();
    write_corpus(&mut out, prs).unwrap();
    out
}

fn dataset_builder() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let len = rng.gen_range(1..60);
        let values: Vec<u64> = (0..len).map(|_| rng.gen_range(0..500)).collect();
        let got: f64 = tukey_upper_fence(&values).unwrap();
        assert!((got - oracle_fence(&values)).abs() < 1e-9);
    }
    let t = FilterThresholds::default();
    assert_eq!((t.max_readme_paragraphs, t.max_changed_files, t.max_commits), (11, 145, 23));
    let mut corpus: Vec<PullRequest> = (1..=7).map(|n| negative_pr("a/b", n)).collect();
    corpus.extend((8..=10).map(|n| positive_pr("a/b", n, 10)));
    let opts = BuildOptions {
        seed: 42,
        ..Default::default()
    };
    let a = build_datasets(corpus.clone(), &t, &opts);
    let b = build_datasets(corpus, &t, &opts);
    assert_eq!(serialised(&a.positives), serialised(&b.positives));
    assert_eq!(serialised(&a.negatives), serialised(&b.negatives));
}

fn go(pr: &PullRequest, cfg: &PipelineConfig, backend: ScriptedBackend) -> Recommendation {
    let gateway = LlmGateway::new(Arc::new(backend));
    let clock = LogicalClock::new(at(0));
    let embed = HashedBagOfWords::default();
    let backends: Backends<'_, f64> = Backends {
        gateway: &gateway,
        embedder: &embed,
        clock: &clock,
    };
    run(pr, cfg, &backends)
}

fn fuzzed_script(rng: &mut impl Rng, sections: usize) -> ScriptedBackend {
    let flags = |rng: &mut ChaCha8Rng, f: fn(bool) -> String| -> Vec<String> {
        (0..rng.gen_range(1..6))
            .map(|_| {
                if rng.gen_bool(0.15) {
                    "garbage".into()
                } else {
                    f(rng.gen_bool(0.5))
                }
            })
            .collect()
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    let loc: Vec<String> = (0..r.gen_range(1..6))
        .map(|_| {
            let k = r.gen_range(0..6);
            let picks: Vec<(usize, &str)> = (0..k).map(|_| (r.gen_range(0..sections + 3), "why")).collect();
            reply::localisation(&picks)
        })
        .collect();
    let crit: Vec<String> = (0..r.gen_range(1..6))
        .map(|_| {
            reply::critique(
                *[Critique::Correct, Critique::Hallucinating, Critique::Generic]
                    .choose(&mut r)
                    .unwrap(),
            )
        })
        .collect();
    ScriptedBackend::new()
        .script(Component::Relevance, flags(&mut r, reply::relevance))
        .script(Component::Sufficiency, flags(&mut r, reply::sufficiency))
        .script(Component::Localisation, loc)
        .script(Component::Review, flags(&mut r, reply::approve))
        .script(Component::Critique, crit)
        .script(Component::Stability, flags(&mut r, reply::approve))
}

fn pipeline_state_machine() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let readme = read_fixture("readmes/cli_tool.md");
    let sections = segment_readme(&readme).len();
    for i in 0..1000 {
        let mut pr = positive_pr("fuzz/repo", 1, 10);
        pr.readme_before = readme.clone();
        let patches = rng.gen_range(0..7);
        let readme_file = pr.files.pop().unwrap();
        pr.files = (0..patches).map(|j| code_patch(&format!("src/m{j}.rs"), "t")).collect();
        pr.files.push(readme_file);
        let cfg = PipelineConfig {
            mode: if i % 4 == 0 { Mode::Static } else { Mode::Agentic },
            window_size_k: rng.gen_range(1..5),
            max_iterations_p: rng.gen_range(1..5),
            ..Default::default()
        };
        let rec = go(&pr, &cfg, fuzzed_script(&mut rng, sections));
        assert!(rec.rounds <= cfg.round_bound(), "run {i}: {} rounds", rec.rounds);
        if rec.decision == Decision::Update {
            let last = rec.verdict_trail.last().unwrap();
            assert!(last.approve && !rec.ranked_indices.is_empty(), "run {i}: unapproved update");
        }
        for e in rec.trace.iter().filter_map(|e| e.window) {
            assert!(e.size >= 1 && e.offset + e.size <= patches, "run {i}: window {e:?}");
        }
    }
    let mut pr = positive_pr("a/b", 1, 10);
    pr.files.insert(0, code_patch("src/x.rs", "x"));
    let s = ScriptedBackend::new()
        .script(Component::Relevance, [reply::relevance(true)])
        .script(Component::Sufficiency, [reply::sufficiency(false)])
        .script(Component::Localisation, [reply::localisation(&[(2, "x")])])
        .script(Component::Review, [reply::approve(true)]);
    let rec = go(
        &pr,
        &PipelineConfig {
            mode: Mode::Static,
            ..Default::default()
        },
        s,
    );
    assert_eq!(rec.stages(), [Stage::C1, Stage::C2, Stage::C3, Stage::C4, Stage::C5]);
}

fn end_to_end_replay() {
    let f = RecordedFixture::load(&fixture("jabref/repo_slice.json")).unwrap();
    let cfg = ForgeConfig {
        base_url: f.base_url.clone(),
        ..Default::default()
    };
    let pr = ForgeClient::new(cfg, Arc::new(f.transport()))
        .unwrap()
        .fetch_pr_detail(&f.repo, 5575)
        .unwrap();
    let doc = segment_readme(&pr.readme_before);
    let stale = doc.sections.iter().find(|s| s.text.contains("JabFox")).unwrap().index;
    let once = || {
        let backend = ScriptedBackend::load(&fixture("jabref/replay.json")).unwrap();
        let rec = go(&pr, &PipelineConfig::default(), backend);
        let text = rec.render_report(&doc);
        (rec, text)
    };
    let (rec, text) = once();
    assert_eq!(rec.decision, Decision::Update);
    assert_eq!(rec.ranked_indices[0], stale);
    assert!(!rec.justifications[&stale].trim().is_empty());
    assert_eq!(once().1, text);
}

fn gateway_robustness() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let doc = segment_readme(&read_fixture("readmes/cli_tool.md"));
    let n = doc.len();
    let bundle = ContextBundle::from_pr(&positive_pr("a/b", 1, 10), &doc);
    let junk = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.gen_range(0..80);
        (0..len).map(|_| rng.gen_range(' '..='~')).collect()
    };
    for _ in 0..500 {
        let (a, b) = (junk(&mut rng), junk(&mut rng));
        let idx: Vec<i64> = (0..rng.gen_range(0..9)).map(|_| rng.gen_range(-3..n as i64 + 5)).collect();
        let just: BTreeSet<i64> = idx.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        let body = serde_json::json!({
            "ranked_indices": idx,
            "justifications": just.iter().map(|i| (i.to_string(), "reason")).collect::<std::collections::BTreeMap<_, _>>(),
        });
        let loc = if rng.gen_bool(0.5) {
            format!("```json\n{body}\n```")
        } else {
            a.clone()
        };
        let g = LlmGateway::new(Arc::new(
            ScriptedBackend::new()
                .script(Component::Relevance, [a.clone(), b.clone()])
                .script(Component::Sufficiency, [a.clone(), b.clone()])
                .script(Component::Localisation, [loc, b.clone()])
                .script(Component::Review, [a.clone(), b.clone()])
                .script(Component::Critique, [a.clone(), b.clone()]),
        ));
        let c1 = g.classify_relevance(&bundle).unwrap();
        assert!(!c1.abstained || !c1.update_required);
        let c2 = g.assess_sufficiency(&bundle).unwrap();
        assert!(!c2.abstained || !c2.sufficient);
        match g.localise_and_justify(&bundle, n) {
            Ok(r) => {
                assert!(r.satisfies_invariants(n));
                for v in [ReviewMode::Static, ReviewMode::Agentic] {
                    let verdict = g.review_recommendation(&r, &doc, &bundle, v).unwrap();
                    if verdict.abstained {
                        assert!(!verdict.approve);
                        if v == ReviewMode::Agentic {
                            assert_eq!(verdict.critique, Some(Critique::Generic));
                        }
                    }
                }
            }
            Err(GatewayError::NoValidIndices { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
}

fn main() {
    let criteria: [(&str, fn()); 8] = [
        ("formula reproduction", formula_reproduction),
        ("baseline simulation", baseline_simulation),
        ("metric oracles", metric_oracles),
        ("parser properties", parser_properties),
        ("dataset builder", dataset_builder),
        ("pipeline state machine", pipeline_state_machine),
        ("end-to-end replay", end_to_end_replay),
        ("gateway robustness", gateway_robustness),
    ];
    std::panic::set_hook(Box::new(|info| eprintln!("  {info}")));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        failed += usize::from(!ok);
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {}: {name} ({:.2}s)", i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
