//! Three-section textual strings, duplicate grouping and dataset merging.
//!
//! Grammar:
//!
//! ```text
//! {adsorbate} </s> {bulk} ( h k l ) </s> primary {elements…} secondary {elements…}
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::structures::{interacting_atoms_with, neighbor_pairs, AtomicStructure, InteractionSummary, SurfaceScope};

pub const SEPARATOR: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    Adsorbate = 0,
    Catalyst = 1,
    Configuration = 2,
}

impl Section {
    pub const ALL: [Section; 3] = [Self::Adsorbate, Self::Catalyst, Self::Configuration];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualRecord {
    pub system_id: String,
    pub text: String,
    /// Character ranges `[start, end)` of the adsorbate, catalyst and
    /// configuration payloads. Separators fall between them.
    pub spans: [(usize, usize); 3],
    pub energy_label: Option<f64>,
    pub relaxer: Option<String>,
}

impl TextualRecord {
    pub fn span(&self, section: Section) -> (usize, usize) {
        self.spans[section as usize]
    }

    /// Adsorbate symbol as written in the first section.
    pub fn adsorbate(&self) -> &str {
        let (s, e) = self.span(Section::Adsorbate);
        char_slice(&self.text, s, e)
    }
}

fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let byte = |c: usize| text.char_indices().nth(c).map_or(text.len(), |(b, _)| b);
    &text[byte(start)..byte(end)]
}

fn check_token(field: &'static str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::MissingField(field));
    }
    if value.chars().any(char::is_whitespace) {
        return Err(Error::invalid(field, format!("`{value}` contains whitespace")));
    }
    Ok(())
}

/// Builds text while tracking character offsets.
struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    fn push(&mut self, s: &str) {
        if self.chars > 0 {
            self.text.push(' ');
            self.chars += 1;
        }
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn mark(&self) -> usize {
        if self.chars == 0 {
            0
        } else {
            self.chars + 1
        }
    }
}

/// Serialize one structure and its interaction summary.
pub fn to_text(s: &AtomicStructure, ia: &InteractionSummary) -> Result<TextualRecord> {
    let md = &s.metadata;
    check_token("adsorbate", &md.adsorbate)?;
    check_token("bulk", &md.bulk)?;

    let mut b = TextBuilder {
        text: String::new(),
        chars: 0,
    };
    let ads_start = b.mark();
    b.push(&md.adsorbate);
    let ads = (ads_start, b.chars);
    b.push(SEPARATOR);

    let cat_start = b.mark();
    b.push(&md.bulk);
    b.push("(");
    for m in md.miller {
        b.push(&m.to_string());
    }
    b.push(")");
    let cat = (cat_start, b.chars);
    b.push(SEPARATOR);

    let cfg_start = b.mark();
    b.push("primary");
    for e in ia.primary_elements() {
        b.push(e);
    }
    b.push("secondary");
    for e in ia.secondary_elements() {
        b.push(e);
    }
    let cfg = (cfg_start, b.chars);

    Ok(TextualRecord {
        system_id: s.system_id.clone(),
        text: b.text,
        spans: [ads, cat, cfg],
        energy_label: s.label(),
        relaxer: s.relaxer.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvertOptions {
    pub cutoff_scale: f64,
    pub scope: SurfaceScope,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            cutoff_scale: 1.2,
            scope: SurfaceScope::SlabAtoms,
        }
    }
}

/// Full structure → record conversion.
pub fn convert_structure(s: &AtomicStructure, opts: ConvertOptions) -> Result<TextualRecord> {
    let pairs = neighbor_pairs(s, opts.cutoff_scale)?;
    let ia = interacting_atoms_with(s, &pairs, opts.scope);
    to_text(s, &ia)
}

pub fn convert_all(structures: &[AtomicStructure], opts: ConvertOptions) -> Result<Vec<TextualRecord>> {
    structures
        .iter()
        .enumerate()
        .map(|(i, s)| convert_structure(s, opts).map_err(|e| e.at_line(i + 1)))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<TextualRecord>> {
    jsonl::read_lines(path, |r: TextualRecord| Ok(r))
}

pub fn write_records(path: &Path, records: &[TextualRecord]) -> Result<()> {
    jsonl::write(path, records)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateGroup {
    pub text: String,
    pub members: Vec<usize>,
}

impl DuplicateGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn is_duplicate(&self) -> bool {
        self.members.len() >= 2
    }
}

/// Exact-text partition of a record list, groups in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DuplicateGroups {
    pub groups: Vec<DuplicateGroup>,
    group_of: Vec<usize>,
}

impl DuplicateGroups {
    pub fn duplicates(&self) -> impl Iterator<Item = &DuplicateGroup> {
        self.groups.iter().filter(|g| g.is_duplicate())
    }

    /// Group index of record `i`.
    pub fn group_of(&self, record: usize) -> Option<usize> {
        self.group_of.get(record).copied()
    }

    pub fn record_count(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_in_duplicate(&self, record: usize) -> Option<bool> {
        self.group_of(record).map(|g| self.groups[g].is_duplicate())
    }
}

pub fn group_duplicates(records: &[TextualRecord]) -> DuplicateGroups {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<DuplicateGroup> = Vec::new();
    let mut group_of = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let g = *index.entry(r.text.as_str()).or_insert_with(|| {
            groups.push(DuplicateGroup {
                text: r.text.clone(),
                members: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].members.push(i);
        group_of.push(g);
    }
    DuplicateGroups { groups, group_of }
}

/// Concatenate and shuffle with a seeded stream.
pub fn merge_datasets(main: &[TextualRecord], augmentation: &[TextualRecord], seed: u64) -> Vec<TextualRecord> {
    let mut all: Vec<TextualRecord> = main.iter().chain(augmentation).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{Metadata, Tag};

    fn toy(adsorbate: &str, bulk: &str, miller: [i32; 3]) -> AtomicStructure {
        AtomicStructure {
            system_id: "toy".into(),
            cell: [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]],
            positions: vec![[0.0; 3]],
            species: vec!["C".into()],
            tags: vec![Tag::Adsorbate],
            metadata: Metadata {
                adsorbate: adsorbate.into(),
                bulk: bulk.into(),
                miller,
            },
            e_sys: None,
            references: None,
            energy_label: Some(-1.0),
            relaxer: None,
        }
    }

    fn summary(p: &[&str], s: &[&str]) -> InteractionSummary {
        InteractionSummary {
            primary: p.iter().enumerate().map(|(i, e)| (e.to_string(), i)).collect(),
            secondary: s.iter().enumerate().map(|(i, e)| (e.to_string(), 10 + i)).collect(),
        }
    }

    fn rec(text: &str) -> TextualRecord {
        TextualRecord {
            system_id: text.into(),
            text: text.into(),
            spans: [(0, 0); 3],
            energy_label: None,
            relaxer: None,
        }
    }

    #[test]
    fn grammar_example() {
        let r = to_text(&toy("*CO", "SrIr2", [1, 1, 1]), &summary(&["Ir", "Ir"], &["Sr"])).unwrap();
        assert_eq!(r.text, "*CO </s> SrIr2 ( 1 1 1 ) </s> primary Ir Ir secondary Sr");
        assert_eq!(r.adsorbate(), "*CO");
        let [a, c, g] = r.spans;
        assert_eq!(char_slice(&r.text, a.0, a.1), "*CO");
        assert_eq!(char_slice(&r.text, c.0, c.1), "SrIr2 ( 1 1 1 )");
        assert_eq!(char_slice(&r.text, g.0, g.1), "primary Ir Ir secondary Sr");
    }

    #[test]
    fn empty_interactions() {
        let r = to_text(&toy("*O", "Pt", [1, 0, 0]), &InteractionSummary::default()).unwrap();
        assert!(r.text.ends_with("</s> primary secondary"), "{}", r.text);
    }

    #[test]
    fn missing_metadata_named() {
        let err = to_text(&toy("", "Pt", [1, 1, 1]), &InteractionSummary::default()).unwrap_err();
        assert!(err.to_string().contains("adsorbate"));
        let err = to_text(&toy("*O", "", [1, 1, 1]), &InteractionSummary::default()).unwrap_err();
        assert!(err.to_string().contains("bulk"));
    }

    #[test]
    fn identical_inputs_identical_text() {
        let a = to_text(&toy("*CO", "Pt", [1, 1, 1]), &summary(&["Pt"], &["Pt", "Pt"])).unwrap();
        let b = to_text(&toy("*CO", "Pt", [1, 1, 1]), &summary(&["Pt"], &["Pt", "Pt"])).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
    }

    #[test]
    fn grouping() {
        let g = group_duplicates(&[rec("a"), rec("a"), rec("b")]);
        assert_eq!(g.groups.len(), 2);
        assert_eq!(g.groups[0].members, vec![0, 1]);
        assert_eq!(g.groups[1].members, vec![2]);
        assert_eq!(g.duplicates().count(), 1);

        let five: Vec<_> = (0..5).map(|_| rec("same")).collect();
        let g = group_duplicates(&five);
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.groups[0].size(), 5);

        let g = group_duplicates(&[rec("x"), rec("y"), rec("z")]);
        assert_eq!(g.duplicates().count(), 0);
    }

    #[test]
    fn merge_preserves_records_and_is_seeded() {
        let main: Vec<_> = (0..100).map(|i| rec(&format!("m{i}"))).collect();
        let aug: Vec<_> = (0..10).map(|i| rec(&format!("a{i}"))).collect();
        let m1 = merge_datasets(&main, &aug, 7);
        let m2 = merge_datasets(&main, &aug, 7);
        assert_eq!(m1.len(), 110);
        assert_eq!(m1, m2);
        let mut got: Vec<_> = m1.iter().map(|r| r.text.clone()).collect();
        let mut want: Vec<_> = main.iter().chain(&aug).map(|r| r.text.clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert_ne!(m1, main.iter().chain(&aug).cloned().collect::<Vec<_>>());
    }
}
