//! Caption graph types and pure graph operations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{BBox, MaskRle};
use crate::providers::{cosine, ProviderResult, TextEmbedder};

/// Characters with meaning in the string format. Free text may not carry
/// them (overall text may still use `<name>` mentions).
pub const RESERVED_CHARS: &[char] = &['%', '&', '<', '>', '(', ')', '[', ']', ';'];

/// Sentence boundaries, kept with the preceding sentence.
pub const SENTENCE_BOUNDARIES: &[char] = &['.', '!', '?', ';', '\n'];

#[derive(Debug, Clone, PartialEq)]
pub struct OverallSection {
    pub subtitle: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub name: String,
    pub category: String,
    pub description: String,
    pub color: String,
    pub bbox: Option<BBox>,
    pub mask: Option<MaskRle>,
}

impl ObjectEntry {
    pub fn new(
        name: impl Into<String>,
        category: impl Into<String>,
        description: impl Into<String>,
        color: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            category: category.into(),
            description: description.into(),
            color: color.into(),
            bbox: None,
            mask: None,
        }
    }

    pub fn with_box(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl RelationTriplet {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

impl fmt::Display for RelationTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<{}> [{}] <{}>",
            self.subject, self.predicate, self.object
        )
    }
}

/// Overall description, object list and relationships.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptionGraph {
    pub overall: Vec<OverallSection>,
    pub objects: Vec<ObjectEntry>,
    pub relationships: Vec<RelationTriplet>,
}

impl CaptionGraph {
    pub fn object(&self, name: &str) -> Option<&ObjectEntry> {
        let name = name.trim();
        self.objects.iter().find(|o| o.name.trim() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Overall,
    Objects,
    Relationships,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub severity: Severity,
    pub section: Section,
    /// Entry index within the section; `None` for section-level problems.
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations
            .iter()
            .any(|v| v.severity == Severity::Error)
    }

    pub fn messages(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.message.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkerError {
    #[error("unbalanced mention marker at byte {0}")]
    UnbalancedMarker(usize),
}

/// A name with its `<...>` markers removed.
fn split_mentions(text: &str) -> Result<Vec<(usize, &str)>, MarkerError> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (c, open) {
            ('<', None) => open = Some(i),
            ('<', Some(at)) => return Err(MarkerError::UnbalancedMarker(at)),
            ('>', Some(at)) => {
                out.push((at, &text[at + 1..i]));
                open = None;
            }
            ('>', None) => return Err(MarkerError::UnbalancedMarker(i)),
            _ => {}
        }
    }
    match open {
        Some(at) => Err(MarkerError::UnbalancedMarker(at)),
        None => Ok(out),
    }
}

/// Names mentioned as `<name>` in order of first appearance, deduplicated.
pub fn mentioned_objects(text: &str) -> Result<Vec<String>, MarkerError> {
    let mut seen = HashSet::new();
    Ok(split_mentions(text)?
        .into_iter()
        .map(|(_, n)| n.trim().to_string())
        .filter(|n| seen.insert(n.clone()))
        .collect())
}

fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits on the fixed boundary set. Boundaries inside `<...>` do not split.
/// Each sentence is whitespace-normalized; empty sentences are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut in_marker = false;
    for c in text.chars() {
        current.push(c);
        match c {
            '<' => in_marker = true,
            '>' => in_marker = false,
            c if !in_marker && SENTENCE_BOUNDARIES.contains(&c) => {
                let s = normalize_space(&current);
                if !s.is_empty() {
                    out.push(s);
                }
                current.clear();
            }
            _ => {}
        }
    }
    let s = normalize_space(&current);
    if !s.is_empty() {
        out.push(s);
    }
    out
}

/// Drops every sentence that mentions one of `names`.
pub fn strip_sentences_mentioning(text: &str, names: &HashSet<String>) -> String {
    split_sentences(text)
        .into_iter()
        .filter(|s| {
            // sentence-local markers only; an unbalanced sentence mentions nothing
            let mentions = split_mentions(s).unwrap_or_default();
            !mentions.iter().any(|(_, n)| names.contains(n.trim()))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Removes sentences about foreground objects from the background sections
/// and, when `both_ways`, background objects from the foreground sections.
pub fn separate_foreground_background(
    graph: &CaptionGraph,
    foreground: &str,
    background: &str,
    both_ways: bool,
) -> CaptionGraph {
    let mentions_of = |subtitle: &str| -> HashSet<String> {
        graph
            .overall
            .iter()
            .filter(|s| s.subtitle == subtitle)
            .flat_map(|s| mentioned_objects(&s.text).unwrap_or_default())
            .collect()
    };
    let fg = mentions_of(foreground);
    let bg = mentions_of(background);
    let mut out = graph.clone();
    for s in &mut out.overall {
        if s.subtitle == background {
            s.text = strip_sentences_mentioning(&s.text, &fg);
        } else if both_ways && s.subtitle == foreground {
            let only_bg: HashSet<String> = bg.difference(&fg).cloned().collect();
            s.text = strip_sentences_mentioning(&s.text, &only_bg);
        }
    }
    out
}

fn has_reserved(text: &str) -> bool {
    text.contains(RESERVED_CHARS)
}

/// Splits "person 2" into ("person", Some(2)).
pub fn split_instance_index(name: &str) -> (&str, Option<u32>) {
    let name = name.trim();
    if let Some((head, tail)) = name.rsplit_once(' ') {
        if let Ok(k) = tail.parse::<u32>() {
            if !head.trim().is_empty() {
                return (head.trim_end(), Some(k));
            }
        }
    }
    (name, None)
}

/// Category words of an object name with any trailing index removed.
pub fn name_head(name: &str) -> &str {
    split_instance_index(name).0
}

/// Checks every graph invariant. Violations are ordered by section, then
/// index.
pub fn validate(graph: &CaptionGraph) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |severity, section, index, message: String| {
        v.push(Violation {
            severity,
            section,
            index,
            message,
        })
    };
    use Section::*;
    use Severity::*;

    let names: HashSet<&str> = graph.objects.iter().map(|o| o.name.trim()).collect();

    if graph.overall.is_empty() {
        push(Error, Overall, None, "overall empty".into());
    }
    for (i, s) in graph.overall.iter().enumerate() {
        if s.subtitle.trim().is_empty() {
            push(Error, Overall, Some(i), "empty subtitle".into());
        } else if has_reserved(&s.subtitle) || s.subtitle.contains('\n') {
            push(
                Error,
                Overall,
                Some(i),
                format!("reserved character in subtitle {}", s.subtitle),
            );
        }
        match split_mentions(&s.text) {
            Err(_) => push(Error, Overall, Some(i), "unbalanced mention marker".into()),
            Ok(mentions) => {
                let mut outside = s.text.clone();
                for (_, n) in &mentions {
                    outside = outside.replacen(&format!("<{n}>"), "", 1);
                }
                if has_reserved(&outside) {
                    push(Error, Overall, Some(i), "reserved character in text".into());
                }
                let mut seen = HashSet::new();
                for (_, n) in mentions {
                    let n = n.trim();
                    if !names.contains(n) && seen.insert(n) {
                        push(Error, Overall, Some(i), format!("unknown mention {n}"));
                    }
                }
            }
        }
    }

    if graph.objects.is_empty() {
        push(Error, Objects, None, "object list empty".into());
    }
    let mut first_index: HashMap<&str, usize> = HashMap::new();
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, o) in graph.objects.iter().enumerate() {
        let name = o.name.trim();
        if name.is_empty() {
            push(Error, Objects, Some(i), "empty object name".into());
            continue;
        }
        if let Some(j) = first_index.get(name) {
            push(
                Error,
                Objects,
                Some(i),
                format!("duplicate name {name} (first at {j})"),
            );
        } else {
            first_index.insert(name, i);
        }
        for (field, value) in [
            ("name", &o.name),
            ("category", &o.category),
            ("description", &o.description),
            ("color", &o.color),
        ] {
            if has_reserved(value) || value.contains('\n') {
                push(
                    Error,
                    Objects,
                    Some(i),
                    format!("reserved character in {field} of {name}"),
                );
            }
        }
        by_category.entry(o.category.trim()).or_default().push(i);
    }
    let mut shared = Vec::new();
    for (cat, idx) in &by_category {
        if idx.len() > 1 {
            for &i in idx {
                if split_instance_index(&graph.objects[i].name).1.is_none() {
                    shared.push((
                        i,
                        format!(
                            "{} shares category {cat} without an index",
                            graph.objects[i].name.trim()
                        ),
                    ));
                }
            }
        }
    }
    for (i, m) in shared {
        push(Error, Objects, Some(i), m);
    }

    for (i, r) in graph.relationships.iter().enumerate() {
        let mut reported = HashSet::new();
        for end in [r.subject.trim(), r.object.trim()] {
            if !names.contains(end) && reported.insert(end) {
                push(
                    Error,
                    Relationships,
                    Some(i),
                    format!("unknown endpoint {end}"),
                );
            }
        }
        if r.predicate.trim().is_empty() {
            push(Error, Relationships, Some(i), "empty predicate".into());
        } else if has_reserved(&r.predicate) || r.predicate.contains('\n') {
            push(
                Error,
                Relationships,
                Some(i),
                "reserved character in predicate".into(),
            );
        }
        if r.subject.trim() == r.object.trim() {
            push(
                Warning,
                Relationships,
                Some(i),
                format!("self relation on {}", r.subject.trim()),
            );
        }
    }

    v.sort_by_key(|x| (x.section, x.index.map_or(0, |i| i + 1)));
    ValidationReport { violations: v }
}

/// Removes exact duplicates and, with an embedder, later triplets whose
/// unordered endpoints match an earlier kept triplet and whose predicates
/// are at least `tau_inv` similar.
pub fn dedupe_relationships(
    triplets: &[RelationTriplet],
    embedder: Option<&dyn TextEmbedder>,
    tau_inv: f64,
) -> ProviderResult<(Vec<RelationTriplet>, Vec<RelationTriplet>)> {
    let predicate_vecs = match embedder {
        Some(e) => {
            let preds: Vec<String> = triplets.iter().map(|t| t.predicate.clone()).collect();
            Some(e.embed(&preds)?)
        }
        None => None,
    };
    let endpoints = |t: &RelationTriplet| {
        let (a, b) = (t.subject.trim().to_string(), t.object.trim().to_string());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    };
    let mut kept_idx: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let duplicate = kept_idx.iter().any(|&k| {
            let other = &triplets[k];
            if other == t {
                return true;
            }
            match &predicate_vecs {
                Some(vecs) => {
                    endpoints(other) == endpoints(t) && cosine(&vecs[k], &vecs[i]) >= tau_inv
                }
                None => false,
            }
        });
        if duplicate {
            dropped.push(t.clone());
        } else {
            kept_idx.push(i);
        }
    }
    Ok((
        kept_idx.into_iter().map(|i| triplets[i].clone()).collect(),
        dropped,
    ))
}

/// Renames objects to "<category> <k>", k counting appearances per category.
pub fn canonical_numbering(objects: &[ObjectEntry]) -> Vec<ObjectEntry> {
    let mut counters: HashMap<String, u32> = HashMap::new();
    objects
        .iter()
        .map(|o| {
            let category = o.category.trim().to_string();
            let k = counters.entry(category.clone()).or_insert(0);
            *k += 1;
            ObjectEntry {
                name: format!("{category} {k}"),
                ..o.clone()
            }
        })
        .collect()
}

/// Graph-level renumbering that also rewrites relationship endpoints and
/// overall-text mentions.
pub fn renumber_graph(graph: &CaptionGraph) -> CaptionGraph {
    let objects = canonical_numbering(&graph.objects);
    let rename: HashMap<String, String> = graph
        .objects
        .iter()
        .zip(&objects)
        .map(|(old, new)| (old.name.trim().to_string(), new.name.clone()))
        .collect();
    let map = |n: &str| {
        rename
            .get(n.trim())
            .cloned()
            .unwrap_or_else(|| n.to_string())
    };
    let overall = graph
        .overall
        .iter()
        .map(|s| OverallSection {
            subtitle: s.subtitle.clone(),
            text: rewrite_mentions(&s.text, &map),
        })
        .collect();
    let relationships = graph
        .relationships
        .iter()
        .map(|r| RelationTriplet::new(map(&r.subject), r.predicate.clone(), map(&r.object)))
        .collect();
    CaptionGraph {
        overall,
        objects,
        relationships,
    }
}

fn rewrite_mentions(text: &str, map: &impl Fn(&str) -> String) -> String {
    let Ok(mentions) = split_mentions(text) else {
        return text.to_string();
    };
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (at, name) in mentions {
        out.push_str(&text[last..at]);
        out.push('<');
        out.push_str(&map(name));
        out.push('>');
        last = at + name.len() + 2;
    }
    out.push_str(&text[last..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::HashedBowEmbedder;
    use proptest::prelude::*;

    fn two_object_graph() -> CaptionGraph {
        CaptionGraph {
            overall: vec![OverallSection {
                subtitle: "Background".into(),
                text: "A <dog 1> under a <tree 1>.".into(),
            }],
            objects: vec![
                ObjectEntry::new("dog 1", "dog", "a small dog", "brown"),
                ObjectEntry::new("tree 1", "tree", "a tall tree", "green"),
            ],
            relationships: vec![RelationTriplet::new("dog 1", "under", "tree 1")],
        }
    }

    #[test]
    fn validate_unknown_endpoint() {
        let mut g = two_object_graph();
        g.objects.truncate(1);
        g.overall[0].text = "A <dog 1>.".into();
        let r = validate(&g);
        assert_eq!(r.messages(), vec!["unknown endpoint tree 1"]);
    }

    #[test]
    fn validate_empty_graph() {
        let r = validate(&CaptionGraph::default());
        assert_eq!(r.messages(), vec!["overall empty", "object list empty"]);
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate(&two_object_graph()).is_empty());
    }

    #[test]
    fn validate_self_relation_is_warning() {
        let mut g = two_object_graph();
        g.relationships
            .push(RelationTriplet::new("dog 1", "licks", "dog 1"));
        let r = validate(&g);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].severity, Severity::Warning);
        assert!(!r.has_errors());
    }

    #[test]
    fn validate_mentions_and_reserved() {
        let mut g = two_object_graph();
        g.overall[0].text = "A <cat 1> (maybe).".into();
        let m = validate(&g).messages().join("|");
        assert!(m.contains("unknown mention cat 1"));
        assert!(m.contains("reserved character in text"));
    }

    #[test]
    fn validate_shared_category_needs_index() {
        let mut g = two_object_graph();
        g.objects
            .push(ObjectEntry::new("dog", "dog", "another dog", "black"));
        assert!(validate(&g)
            .messages()
            .iter()
            .any(|m| m.contains("without an index")));
    }

    #[test]
    fn mentions_in_first_order() {
        assert_eq!(
            mentioned_objects("A <dog 1> chases a <ball 1> near the <dog 1>.").unwrap(),
            vec!["dog 1", "ball 1"]
        );
        assert!(mentioned_objects("No mentions here.").unwrap().is_empty());
        assert!(matches!(
            mentioned_objects("Broken <dog 1 text"),
            Err(MarkerError::UnbalancedMarker(7))
        ));
    }

    fn names(n: &[&str]) -> HashSet<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn strip_examples() {
        let dog = names(&["dog 1"]);
        assert_eq!(
            strip_sentences_mentioning("The sky is blue. <dog 1> sits by the fence.", &dog),
            "The sky is blue."
        );
        assert_eq!(
            strip_sentences_mentioning("Only background here.", &dog),
            "Only background here."
        );
        assert_eq!(
            strip_sentences_mentioning("<cat 1> sleeps. <cat 1> purrs.", &names(&["cat 1"])),
            ""
        );
    }

    #[test]
    fn sentence_split_keeps_boundaries() {
        assert_eq!(
            split_sentences("A red car.  A tall\ttree!\nWhy? yes; no"),
            vec!["A red car.", "A tall tree!", "Why?", "yes;", "no"]
        );
        assert_eq!(split_sentences("<Mr. 1> waves."), vec!["<Mr. 1> waves."]);
    }

    #[test]
    fn foreground_background_post_processing() {
        let mut g = two_object_graph();
        g.overall = vec![
            OverallSection {
                subtitle: "Foreground".into(),
                text: "A <dog 1> runs.".into(),
            },
            OverallSection {
                subtitle: "Background".into(),
                text: "Grass everywhere. The <dog 1> is near a <tree 1>. A <tree 1> stands.".into(),
            },
        ];
        let out = separate_foreground_background(&g, "Foreground", "Background", false);
        assert_eq!(out.overall[1].text, "Grass everywhere. A <tree 1> stands.");
        assert_eq!(out.overall[0].text, "A <dog 1> runs.");
    }

    #[test]
    fn dedupe_examples() {
        let on = RelationTriplet::new("a", "on", "b");
        let (kept, dropped) = dedupe_relationships(&[on.clone(), on.clone()], None, 0.95).unwrap();
        assert_eq!(kept, vec![on.clone()]);
        assert_eq!(dropped, vec![on.clone()]);

        let other = RelationTriplet::new("c", "on", "d");
        let (kept, dropped) =
            dedupe_relationships(&[on.clone(), other.clone()], None, 0.95).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(dropped.is_empty());

        // identical predicates embed identically, cosine 1 >= 0.99
        let fwd = RelationTriplet::new("a", "holds", "b");
        let inv = RelationTriplet::new("b", "holds", "a");
        let (kept, dropped) =
            dedupe_relationships(&[fwd.clone(), inv.clone()], Some(&HashedBowEmbedder), 0.99)
                .unwrap();
        assert_eq!(kept, vec![fwd]);
        assert_eq!(dropped, vec![inv]);
    }

    #[test]
    fn numbering_examples() {
        let objs = vec![
            ObjectEntry::new("x", "person", "d", "c"),
            ObjectEntry::new("y", "person", "d", "c"),
            ObjectEntry::new("z", "dog", "d", "c"),
        ];
        let n: Vec<String> = canonical_numbering(&objs)
            .into_iter()
            .map(|o| o.name)
            .collect();
        assert_eq!(n, vec!["person 1", "person 2", "dog 1"]);
        assert!(canonical_numbering(&[]).is_empty());
        let cat = vec![ObjectEntry::new("cat 1", "cat", "d", "c")];
        assert_eq!(canonical_numbering(&cat), cat);
    }

    #[test]
    fn renumber_rewrites_references() {
        let g = CaptionGraph {
            overall: vec![OverallSection {
                subtitle: "Foreground".into(),
                text: "A <man> and a <woman>.".into(),
            }],
            objects: vec![
                ObjectEntry::new("man", "person", "a man", "blue"),
                ObjectEntry::new("woman", "person", "a woman", "red"),
            ],
            relationships: vec![RelationTriplet::new("man", "next to", "woman")],
        };
        let r = renumber_graph(&g);
        assert_eq!(r.overall[0].text, "A <person 1> and a <person 2>.");
        assert_eq!(
            r.relationships[0],
            RelationTriplet::new("person 1", "next to", "person 2")
        );
        assert!(validate(&r).is_empty());
    }

    #[test]
    fn name_head_strips_index() {
        assert_eq!(name_head("person 2"), "person");
        assert_eq!(name_head("traffic light 12"), "traffic light");
        assert_eq!(name_head("sky"), "sky");
        assert_eq!(split_instance_index("7"), ("7", None));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just("word".to_string()),
                Just("<dog 1>".to_string()),
                Just("<cat 2>".to_string()),
                Just(".".to_string()),
                Just("!".to_string()),
                Just(" ".to_string()),
                Just("\n".to_string()),
                Just(";".to_string()),
            ],
            0..20,
        )
        .prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn strip_with_no_names_is_resplit(text in arb_text()) {
            let joined = split_sentences(&text).join(" ");
            prop_assert_eq!(strip_sentences_mentioning(&text, &HashSet::new()), joined);
        }

        #[test]
        fn numbering_idempotent(cats in proptest::collection::vec(prop_oneof![Just("cat"), Just("dog"), Just("car")], 0..8)) {
            let objs: Vec<ObjectEntry> = cats.iter().map(|c| ObjectEntry::new("x", *c, "d", "k")).collect();
            let once = canonical_numbering(&objs);
            prop_assert_eq!(canonical_numbering(&once), once);
        }

        #[test]
        fn dedupe_keeps_unique_endpoint_pairs(
            edges in proptest::collection::vec((0u8..4, 0u8..4, prop_oneof![Just("on"), Just("holds"), Just("near")]), 0..10)
        ) {
            let ts: Vec<RelationTriplet> = edges.iter()
                .map(|(s, o, p)| RelationTriplet::new(format!("o{s}"), *p, format!("o{o}")))
                .collect();
            let (kept, _) = dedupe_relationships(&ts, Some(&HashedBowEmbedder), 0.5).unwrap();
            for t in &ts {
                let key = |x: &RelationTriplet| {
                    let mut k = [x.subject.clone(), x.object.clone()];
                    k.sort();
                    k
                };
                let unique = ts.iter().filter(|u| key(u) == key(t)).count() == 1;
                if unique {
                    prop_assert!(kept.contains(t));
                }
            }
        }

        #[test]
        fn validate_is_pure(drop_obj in any::<bool>()) {
            let mut g = two_object_graph();
            if drop_obj { g.objects.pop(); }
            prop_assert_eq!(validate(&g), validate(&g));
        }
    }
}
