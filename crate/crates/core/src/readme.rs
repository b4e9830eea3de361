//! README segmentation into paragraph-level sections and the header tree
//! built over them.
//!
//! Sections are numbered from 1 in document order. A section is a maximal
//! run of non-blank lines, except that ATX headers always stand alone,
//! fenced code blocks stay whole across blank lines, and list or table
//! blocks are kept together. Setext headers are normalised to levels 1/2.

use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Deepest header level that still opens a tree node.
pub const MAX_TREE_DEPTH: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Header,
    Paragraph,
    CodeBlock,
    Table,
    ListBlock,
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SectionKind::Header => "header",
            SectionKind::Paragraph => "paragraph",
            SectionKind::CodeBlock => "code_block",
            SectionKind::Table => "table",
            SectionKind::ListBlock => "list_block",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub index: usize,
    pub kind: SectionKind,
    pub header_level: Option<u8>,
    pub text: String,
    /// Inclusive, 1-based line range in the normalised text.
    pub line_range: (usize, usize),
}

impl Section {
    pub fn contains_line(&self, line: usize) -> bool {
        self.line_range.0 <= line && line <= self.line_range.1
    }

    /// Header text without the markdown markers, for display.
    pub fn title(&self) -> Option<String> {
        self.header_level?;
        let first = self.text.lines().next().unwrap_or_default();
        let trimmed = first.trim_start().trim_start_matches('#').trim();
        Some(trimmed.trim_end_matches('#').trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadmeDocument {
    pub raw_text: String,
    pub sections: Vec<Section>,
    pub line_count: usize,
}

impl ReadmeDocument {
    pub fn section(&self, index: usize) -> Option<&Section> {
        index.checked_sub(1).and_then(|i| self.sections.get(i))
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    /// Section whose range covers `line`, if any.
    pub fn section_at_line(&self, line: usize) -> Option<&Section> {
        let pos = self.sections.partition_point(|s| s.line_range.1 < line);
        self.sections.get(pos).filter(|s| s.contains_line(line))
    }

    /// Section covering `line`, or the closest section that ends before it.
    pub fn section_at_or_before(&self, line: usize) -> Option<&Section> {
        let pos = self.sections.partition_point(|s| s.line_range.0 <= line);
        pos.checked_sub(1).map(|i| &self.sections[i])
    }

    /// `[i] text` rendering, one section per block.
    pub fn indexed_listing(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!("[{}] {}\n", s.index, s.text));
        }
        out
    }
}

/// Normalises line endings and trailing whitespace.
pub fn normalise(raw: &str) -> String {
    let unified = raw.replace("\r\n", "\n");
    let mut out = String::with_capacity(unified.len());
    for (i, line) in unified.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(line.trim_end());
    }
    out
}

/// Lossy UTF-8 decode followed by [`segment_readme`].
pub fn segment_readme_bytes(raw: &[u8]) -> ReadmeDocument {
    segment_readme(&String::from_utf8_lossy(raw))
}

fn atx_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^ {0,3}(#{1,6})(?:[ \t]|$)").unwrap())
}

fn list_item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*+]|\d{1,9}[.)])(?:[ \t]|$)").unwrap())
}

fn table_delim_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\|?\s*:?-+:?\s*(?:\|\s*:?-+:?\s*)+\|?\s*$|^\s*\|\s*:?-+:?\s*\|\s*$").unwrap())
}

fn atx_level(line: &str) -> Option<u8> {
    atx_re().captures(line).map(|c| c[1].len() as u8)
}

fn fence_open(line: &str) -> Option<(char, usize)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let ch = rest.chars().next()?;
    if ch != '`' && ch != '~' {
        return None;
    }
    let run = rest.chars().take_while(|&c| c == ch).count();
    if run < 3 {
        return None;
    }
    // backtick fences cannot carry backticks in the info string
    if ch == '`' && rest[run..].contains('`') {
        return None;
    }
    Some((ch, run))
}

fn fence_closes(line: &str, ch: char, len: usize) -> bool {
    let t = line.trim();
    let run = t.chars().take_while(|&c| c == ch).count();
    run >= len && run == t.chars().count() && line.len() - line.trim_start().len() <= 3
}

fn is_list_item(line: &str) -> bool {
    list_item_re().is_match(line)
}

fn is_setext_underline(line: &str) -> Option<u8> {
    let t = line.trim();
    if t.len() > line.len() || line.len() - line.trim_start().len() > 3 || t.is_empty() {
        return None;
    }
    if t.chars().all(|c| c == '=') {
        Some(1)
    } else if t.chars().all(|c| c == '-') {
        Some(2)
    } else {
        None
    }
}

fn starts_table(lines: &[&str], i: usize) -> bool {
    let line = lines[i];
    if line.trim_start().starts_with('|') {
        return true;
    }
    line.contains('|') && lines.get(i + 1).is_some_and(|next| table_delim_re().is_match(next))
}

fn is_blank(line: &str) -> bool {
    line.trim().is_empty()
}

/// Splits `raw_text` into 1-indexed paragraph-level sections.
pub fn segment_readme(raw_text: &str) -> ReadmeDocument {
    let text = normalise(raw_text);
    let lines: Vec<&str> = if text.is_empty() { Vec::new() } else { text.split('\n').collect() };
    let line_count = if text.is_empty() {
        0
    } else if text.ends_with('\n') {
        lines.len() - 1
    } else {
        lines.len()
    };

    let mut blocks: Vec<(SectionKind, Option<u8>, usize, usize)> = Vec::new();
    let mut i = 0usize;
    let n = lines.len();
    while i < n {
        let line = lines[i];
        if is_blank(line) {
            i += 1;
            continue;
        }
        if let Some(level) = atx_level(line) {
            blocks.push((SectionKind::Header, Some(level), i, i));
            i += 1;
            continue;
        }
        if let Some((ch, len)) = fence_open(line) {
            let start = i;
            let mut j = i + 1;
            while j < n && !fence_closes(lines[j], ch, len) {
                j += 1;
            }
            let mut end = j.min(n - 1);
            while end > start && is_blank(lines[end]) {
                end -= 1;
            }
            blocks.push((SectionKind::CodeBlock, None, start, end));
            i = j + 1;
            continue;
        }
        if is_list_item(line) {
            let start = i;
            let mut end = i;
            let mut j = i + 1;
            loop {
                if j >= n {
                    break;
                }
                let l = lines[j];
                if is_blank(l) {
                    // a later item or an indented continuation keeps the list open
                    let mut k = j;
                    while k < n && is_blank(lines[k]) {
                        k += 1;
                    }
                    if k < n && continues_list(lines[k]) {
                        j = k;
                        continue;
                    }
                    break;
                }
                if atx_level(l).is_some() || fence_open(l).is_some() {
                    break;
                }
                end = j;
                j += 1;
            }
            blocks.push((SectionKind::ListBlock, None, start, end));
            i = end + 1;
            continue;
        }
        if starts_table(&lines, i) {
            let start = i;
            let mut j = i + 1;
            while j < n && !is_blank(lines[j]) && atx_level(lines[j]).is_none() && fence_open(lines[j]).is_none() {
                j += 1;
            }
            blocks.push((SectionKind::Table, None, start, j - 1));
            i = j;
            continue;
        }
        // paragraph, possibly turned into a setext header
        let start = i;
        let mut j = i + 1;
        let mut kind = SectionKind::Paragraph;
        let mut level = None;
        while j < n {
            let l = lines[j];
            if is_blank(l) || atx_level(l).is_some() || fence_open(l).is_some() || is_list_item(l) {
                break;
            }
            if let Some(lv) = is_setext_underline(l) {
                kind = SectionKind::Header;
                level = Some(lv);
                j += 1;
                break;
            }
            if l.trim_start().starts_with('|') {
                break;
            }
            j += 1;
        }
        blocks.push((kind, level, start, j - 1));
        i = j;
    }

    let sections = blocks
        .into_iter()
        .enumerate()
        .map(|(k, (kind, header_level, s, e))| Section {
            index: k + 1,
            kind,
            header_level,
            text: lines[s..=e].join("\n"),
            line_range: (s + 1, e + 1),
        })
        .collect();

    ReadmeDocument {
        raw_text: text,
        sections,
        line_count,
    }
}

fn continues_list(line: &str) -> bool {
    if atx_level(line).is_some() || fence_open(line).is_some() {
        return false;
    }
    is_list_item(line) || line.starts_with("  ") || line.starts_with('\t')
}

/// Opaque identifier of a node in a [`HierarchyTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub node_id: NodeId,
    pub level: u8,
    pub header_text: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub section_indices: Vec<usize>,
}

/// Header tree over a document's sections, capped at depth 4.
///
/// Content below a level-5 or level-6 header stays in the enclosing node.
/// Sections before the first header live in the level-0 root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyTree {
    nodes: Vec<HierarchyNode>,
    /// owner[i] is the node holding section i + 1.
    owner: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("section index {0} is not in the document")]
    UnknownSection(usize),
    #[error("level {0} is outside 1..=4")]
    InvalidLevel(u8),
}

impl HierarchyTree {
    pub const ROOT: NodeId = NodeId(0);

    pub fn root(&self) -> &HierarchyNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &HierarchyNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[HierarchyNode] {
        &self.nodes
    }

    pub fn section_count(&self) -> usize {
        self.owner.len()
    }

    pub fn owner_of(&self, section_index: usize) -> Result<NodeId, TreeError> {
        section_index
            .checked_sub(1)
            .and_then(|i| self.owner.get(i))
            .copied()
            .ok_or(TreeError::UnknownSection(section_index))
    }

    /// Whether the section sits before the first header.
    pub fn is_preamble(&self, section_index: usize) -> Result<bool, TreeError> {
        Ok(self.owner_of(section_index)? == Self::ROOT)
    }

    pub fn depth(&self) -> u8 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Ancestor-or-self of the section's owning node at exactly `level`.
    pub fn node_at_level(&self, section_index: usize, level: u8) -> Result<Option<NodeId>, TreeError> {
        if !(1..=MAX_TREE_DEPTH).contains(&level) {
            return Err(TreeError::InvalidLevel(level));
        }
        let mut cur = Some(self.owner_of(section_index)?);
        while let Some(id) = cur {
            let node = self.node(id);
            if node.level == level {
                return Ok(Some(id));
            }
            if node.level < level {
                return Ok(None);
            }
            cur = node.parent;
        }
        Ok(None)
    }
}

/// Builds the header tree for `doc`.
pub fn build_hierarchy(doc: &ReadmeDocument) -> HierarchyTree {
    let mut nodes = vec![HierarchyNode {
        node_id: HierarchyTree::ROOT,
        level: 0,
        header_text: String::new(),
        parent: None,
        children: Vec::new(),
        section_indices: Vec::new(),
    }];
    let mut owner = Vec::with_capacity(doc.sections.len());
    let mut stack = vec![HierarchyTree::ROOT];

    for s in &doc.sections {
        if let (SectionKind::Header, Some(level)) = (s.kind, s.header_level) {
            if level <= MAX_TREE_DEPTH {
                while nodes[stack.last().unwrap().0].level >= level {
                    stack.pop();
                }
                let parent = *stack.last().unwrap();
                let id = NodeId(nodes.len());
                nodes.push(HierarchyNode {
                    node_id: id,
                    level,
                    header_text: s.title().unwrap_or_default(),
                    parent: Some(parent),
                    children: Vec::new(),
                    section_indices: Vec::new(),
                });
                nodes[parent.0].children.push(id);
                stack.push(id);
            }
        }
        let top = *stack.last().unwrap();
        nodes[top.0].section_indices.push(s.index);
        owner.push(top);
    }

    HierarchyTree { nodes, owner }
}
