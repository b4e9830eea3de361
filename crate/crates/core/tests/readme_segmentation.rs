mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use readme_drift::readme::{build_hierarchy, segment_readme, segment_readme_bytes, HierarchyTree, SectionKind, MAX_TREE_DEPTH};

fn check_tree(doc: &readme_drift::ReadmeDocument, tree: &HierarchyTree) -> Result<(), String> {
    if tree.depth() > MAX_TREE_DEPTH {
        return Err(format!("depth {}", tree.depth()));
    }
    let mut seen = vec![0usize; doc.len()];
    for n in tree.nodes() {
        for &i in &n.section_indices {
            seen[i - 1] += 1;
        }
        if let Some(p) = n.parent {
            if tree.node(p).level >= n.level {
                return Err(format!("node {:?} not deeper than its parent", n.node_id));
            }
        }
    }
    if seen.iter().any(|&c| c != 1) {
        return Err("a section is not owned by exactly one node".into());
    }
    for s in 1..=doc.len() {
        for j in 2..=4u8 {
            if let Some(deep) = tree.node_at_level(s, j).unwrap() {
                let Some(shallow) = (1..j).rev().find_map(|i| tree.node_at_level(s, i).unwrap()) else {
                    continue;
                };
                let mut cur = tree.node(deep).parent;
                let mut found = false;
                while let Some(c) = cur {
                    if c == shallow {
                        found = true;
                        break;
                    }
                    cur = tree.node(c).parent;
                }
                if !found {
                    return Err(format!("section {s}: level {j} node is not below its shallower ancestor"));
                }
            }
        }
    }
    Ok(())
}

#[test]
fn fenced_fixture_matches_hand_count() {
    // hand segmentation: header, paragraph, header, fenced code (with two
    // internal blank lines), paragraph, list, table
    let doc = segment_readme(&read_fixture("fenced_code.md"));
    let kinds: Vec<SectionKind> = doc.sections.iter().map(|s| s.kind).collect();
    assert_eq!(
        kinds,
        [
            SectionKind::Header,
            SectionKind::Paragraph,
            SectionKind::Header,
            SectionKind::CodeBlock,
            SectionKind::Paragraph,
            SectionKind::ListBlock,
            SectionKind::Table,
        ]
    );
    assert_eq!(doc.sections[3].line_range, (7, 13));
}

#[test]
fn deep_headers_collapse_into_level_four() {
    let doc = segment_readme(&read_fixture("levels.md"));
    assert_eq!(doc.len(), 15);
    let tree = build_hierarchy(&doc);
    // independent walk: a node opens at every header of level <= 4
    let opened = doc.sections.iter().filter(|s| s.header_level.is_some_and(|l| l <= 4)).count();
    assert_eq!(tree.nodes().len(), opened + 1);
    assert_eq!(tree.nodes().len(), 6);
    let l4 = tree.nodes().iter().find(|n| n.level == 4).unwrap();
    assert_eq!(l4.section_indices, (8..=13).collect::<Vec<_>>());
    assert_eq!(tree.depth(), 4);
    assert!(tree.is_preamble(1).unwrap());
    assert_eq!(tree.node_at_level(1, 1).unwrap(), None);
    for s in 1..=doc.len() {
        for level in 1..=4 {
            let got = tree.node_at_level(s, level).unwrap().map(|n| tree.node(n).section_indices[0]);
            assert_eq!(got, oracle_ancestor(&doc, s, level), "section {s} level {level}");
        }
    }
}

#[test]
fn real_world_fixtures_hold_invariants() {
    let fixtures = readme_fixtures();
    assert_eq!(fixtures.len(), 10);
    for (name, text) in fixtures {
        let doc = segment_readme(&text);
        assert!(!doc.is_empty(), "{name}");
        check_document(&text, &doc).unwrap_or_else(|e| panic!("{name}: {e}"));
        check_tree(&doc, &build_hierarchy(&doc)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn crlf_fixture_normalises() {
    let text = read_fixture("readmes/windows_crlf.md");
    assert!(text.contains("\r\n"));
    let doc = segment_readme(&text);
    assert!(!doc.raw_text.contains('\r'));
    assert_eq!(doc.sections[0].text, "# WinTray");
    assert_eq!(doc.sections.last().unwrap().kind, SectionKind::ListBlock);
}

#[test]
fn headerless_text_is_all_preamble() {
    let doc = segment_readme(&read_fixture("readmes/no_headers.txt"));
    assert_eq!(doc.len(), 3);
    let tree = build_hierarchy(&doc);
    assert_eq!(tree.nodes().len(), 1);
    assert_eq!(tree.root().section_indices, vec![1, 2, 3]);
}

#[test]
fn invalid_utf8_is_replaced() {
    let doc = segment_readme_bytes(b"# Caf\xe9\n\nok\n");
    assert_eq!(doc.len(), 2);
    assert!(doc.sections[0].text.contains('\u{FFFD}'));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn generated_documents_hold_invariants(seed in any::<u64>(), blocks in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_markdown(&mut rng, blocks);
        let doc = segment_readme(&text);
        prop_assert!(check_document(&text, &doc).is_ok(), "{:?}", check_document(&text, &doc));
        let tree = build_hierarchy(&doc);
        prop_assert!(check_tree(&doc, &tree).is_ok(), "{:?}", check_tree(&doc, &tree));
        for s in 1..=doc.len() {
            for level in 1..=4 {
                let got = tree.node_at_level(s, level).unwrap().map(|n| tree.node(n).section_indices[0]);
                prop_assert_eq!(got, oracle_ancestor(&doc, s, level));
            }
        }
    }

    #[test]
    fn strict_nesting_has_every_shallower_level(seed in any::<u64>(), headers in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = segment_readme(&random_strict_markdown(&mut rng, headers));
        let tree = build_hierarchy(&doc);
        for s in 1..=doc.len() {
            for j in 2..=4u8 {
                if tree.node_at_level(s, j).unwrap().is_some() {
                    for i in 1..j {
                        prop_assert!(tree.node_at_level(s, i).unwrap().is_some(), "section {} level {}", s, i);
                    }
                }
            }
        }
    }

    #[test]
    fn resegmenting_sections_is_stable(seed in any::<u64>(), blocks in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = segment_readme(&random_markdown(&mut rng, blocks));
        let joined = doc.sections.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n\n");
        let again = segment_readme(&joined);
        let kinds = |d: &readme_drift::ReadmeDocument| d.sections.iter().map(|s| s.kind).collect::<Vec<_>>();
        prop_assert_eq!(kinds(&doc), kinds(&again));
    }
}
