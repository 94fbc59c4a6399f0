//! The line-oriented caption string format, its canonical JSON form and
//! the instruction prompt built around it.
//!
//! String grammar (LF line endings, blank lines between sections ignored):
//!
//! ```text
//! %%Overall Description%%
//! &&Background&& A sunny <park 1>.
//! %%Object List%%
//! <dog 1>(category: dog; description: a small brown dog; color: brown)
//! %%Relationships%%
//! <dog 1> [runs in] <park 1>
//! ```

use std::collections::HashSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BBox, MaskRle};
use crate::model::{CaptionGraph, ObjectEntry, OverallSection, RelationTriplet, RESERVED_CHARS};

/// Version of the bundled instruction template.
pub const TEMPLATE_VERSION: &str = "1.0.0";

const TEMPLATE: &str = include_str!("../assets/instruction_template.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub main_titles: [String; 3],
    pub canonical_subtitles: Vec<String>,
    pub strict: bool,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            main_titles: [
                "Overall Description".to_string(),
                "Object List".to_string(),
                "Relationships".to_string(),
            ],
            canonical_subtitles: ["Theme", "Style", "Background", "Foreground"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            strict: true,
        }
    }
}

impl GrammarConfig {
    pub fn check(&self) -> Result<(), String> {
        let distinct: HashSet<&String> = self.main_titles.iter().collect();
        if distinct.len() != 3 {
            return Err("main titles must be distinct".into());
        }
        for t in &self.main_titles {
            if t.trim().is_empty() || t.contains(RESERVED_CHARS) || t != t.trim() {
                return Err(format!("invalid main title {t:?}"));
            }
        }
        if self.canonical_subtitles.is_empty() {
            return Err("subtitle list is empty".into());
        }
        for s in &self.canonical_subtitles {
            if s.trim().is_empty() || s.contains(RESERVED_CHARS) {
                return Err(format!("invalid subtitle {s:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParseErrorKind {
    MissingSection,
    BadObjectLine,
    BadRelationLine,
    ReservedCharInText,
    DuplicateName,
    UnknownSubtitle,
    UnbalancedMarker,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("line {line}: {kind}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// 1-based.
    pub line: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerializeError {
    #[error("reserved character in {location}")]
    ReservedCharInText { location: String },
    #[error("unbalanced mention marker in {location}")]
    UnbalancedMarker { location: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("schema error at {pointer}: {detail}")]
pub struct SchemaError {
    /// JSON pointer to the offending value.
    pub pointer: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template slot {0:?}")]
    UnknownSlot(String),
}

static HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^%%(.*)%%$").unwrap());
static SUBTITLE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^&&([^&]*)&&(.*)$").unwrap());
static OBJECT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^<([^<>]*)>\((.*)\)$").unwrap());
static RELATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^<([^<>]*)>\s*\[([^\[\]]*)\]\s*<([^<>]*)>$").unwrap());

fn has_reserved(s: &str) -> bool {
    s.contains(RESERVED_CHARS) || s.contains('\n')
}

/// Checks free text that may contain `<name>` mentions. Returns
/// `Err(true)` for unbalanced markers and `Err(false)` for a stray
/// reserved character.
fn check_mention_text(text: &str) -> Result<(), bool> {
    let mut open = false;
    for c in text.chars() {
        match c {
            '<' if open => return Err(true),
            '<' => open = true,
            '>' if !open => return Err(true),
            '>' => open = false,
            '\n' => return Err(false),
            c if RESERVED_CHARS.contains(&c) => return Err(false),
            _ => {}
        }
    }
    if open {
        Err(true)
    } else {
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Overall,
    Objects,
    Relations,
}

/// Parses the string format. The first error wins.
pub fn parse(input: &str, cfg: &GrammarConfig) -> Result<CaptionGraph, ParseError> {
    let err = |kind, line, detail: String| ParseError { kind, line, detail };
    let mut graph = CaptionGraph::default();
    let mut part: Option<Part> = None;
    let mut next_section = 0usize;
    let mut names = HashSet::new();
    let mut last_line = 1;

    for (i, raw) in input.split('\n').enumerate() {
        let n = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        last_line = n;

        if let Some(caps) = HEADER.captures(line) {
            let title = caps[1].trim();
            if next_section < 3 && title == cfg.main_titles[next_section] {
                part = Some([Part::Overall, Part::Objects, Part::Relations][next_section]);
                next_section += 1;
                continue;
            }
            let detail = if next_section < 3 {
                format!(
                    "expected %%{}%%, found %%{}%%",
                    cfg.main_titles[next_section], title
                )
            } else {
                format!("unexpected section header %%{title}%% after the last section")
            };
            return Err(err(ParseErrorKind::MissingSection, n, detail));
        }

        match part {
            None => {
                return Err(err(
                    ParseErrorKind::MissingSection,
                    n,
                    format!("expected %%{}%% before content", cfg.main_titles[0]),
                ))
            }
            Some(Part::Overall) => {
                let Some(caps) = SUBTITLE.captures(line) else {
                    return Err(err(
                        ParseErrorKind::UnknownSubtitle,
                        n,
                        "overall line lacks an &&subtitle&& prefix".into(),
                    ));
                };
                let subtitle = caps[1].trim();
                if subtitle.is_empty() || has_reserved(subtitle) {
                    return Err(err(
                        ParseErrorKind::UnknownSubtitle,
                        n,
                        format!("invalid subtitle {subtitle:?}"),
                    ));
                }
                if cfg.strict && !cfg.canonical_subtitles.iter().any(|s| s == subtitle) {
                    return Err(err(
                        ParseErrorKind::UnknownSubtitle,
                        n,
                        format!("subtitle {subtitle:?} is not in the canonical set"),
                    ));
                }
                let text = caps[2].trim();
                match check_mention_text(text) {
                    Ok(()) => {}
                    Err(true) => {
                        return Err(err(ParseErrorKind::UnbalancedMarker, n, text.to_string()))
                    }
                    Err(false) => {
                        return Err(err(ParseErrorKind::ReservedCharInText, n, text.to_string()))
                    }
                }
                graph.overall.push(OverallSection {
                    subtitle: subtitle.to_string(),
                    text: text.to_string(),
                });
            }
            Some(Part::Objects) => {
                let bad = |d: &str| err(ParseErrorKind::BadObjectLine, n, d.to_string());
                let caps = OBJECT.captures(line).ok_or_else(|| {
                    bad("expected <name>(category: ...; description: ...; color: ...)")
                })?;
                let name = caps[1].trim();
                if name.is_empty() {
                    return Err(bad("empty object name"));
                }
                let fields: Vec<&str> = caps[2].split(';').collect();
                if fields.len() != 3 {
                    return Err(bad(&format!("{} detail fields, expected 3", fields.len())));
                }
                let mut values = Vec::with_capacity(3);
                for (field, key) in fields.iter().zip(["category", "description", "color"]) {
                    let (k, v) = field
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| bad(&format!("detail {field:?} lacks a key")))?;
                    if k.trim() != key {
                        return Err(bad(&format!("expected key {key:?}, found {:?}", k.trim())));
                    }
                    values.push(v.trim());
                }
                for v in std::iter::once(name).chain(values.iter().copied()) {
                    if has_reserved(v) {
                        return Err(err(ParseErrorKind::ReservedCharInText, n, v.to_string()));
                    }
                }
                if !names.insert(name.to_string()) {
                    return Err(err(
                        ParseErrorKind::DuplicateName,
                        n,
                        format!("object {name:?} listed twice"),
                    ));
                }
                graph
                    .objects
                    .push(ObjectEntry::new(name, values[0], values[1], values[2]));
            }
            Some(Part::Relations) => {
                let bad = |d: &str| err(ParseErrorKind::BadRelationLine, n, d.to_string());
                let caps = RELATION
                    .captures(line)
                    .ok_or_else(|| bad("expected <subject> [predicate] <object>"))?;
                let (s, p, o) = (caps[1].trim(), caps[2].trim(), caps[3].trim());
                if s.is_empty() || p.is_empty() || o.is_empty() {
                    return Err(bad("empty subject, predicate or object"));
                }
                for v in [s, p, o] {
                    if has_reserved(v) {
                        return Err(err(ParseErrorKind::ReservedCharInText, n, v.to_string()));
                    }
                }
                graph.relationships.push(RelationTriplet::new(s, p, o));
            }
        }
    }

    if next_section < 3 {
        return Err(err(
            ParseErrorKind::MissingSection,
            last_line,
            format!("missing %%{}%%", cfg.main_titles[next_section]),
        ));
    }
    Ok(graph)
}

/// Writes the string format. Boxes and masks are not part of it.
pub fn serialize(graph: &CaptionGraph, cfg: &GrammarConfig) -> Result<String, SerializeError> {
    let reserved = |location: String| SerializeError::ReservedCharInText { location };
    let mut lines = Vec::new();
    lines.push(format!("%%{}%%", cfg.main_titles[0]));
    for (i, s) in graph.overall.iter().enumerate() {
        if has_reserved(&s.subtitle) {
            return Err(reserved(format!("/overall/{i}/subtitle")));
        }
        match check_mention_text(&s.text) {
            Ok(()) => {}
            Err(true) => {
                return Err(SerializeError::UnbalancedMarker {
                    location: format!("/overall/{i}/text"),
                })
            }
            Err(false) => return Err(reserved(format!("/overall/{i}/text"))),
        }
        if s.text.is_empty() {
            lines.push(format!("&&{}&&", s.subtitle));
        } else {
            lines.push(format!("&&{}&& {}", s.subtitle, s.text));
        }
    }
    lines.push(format!("%%{}%%", cfg.main_titles[1]));
    for (i, o) in graph.objects.iter().enumerate() {
        for (field, v) in [
            ("name", &o.name),
            ("category", &o.category),
            ("description", &o.description),
            ("color", &o.color),
        ] {
            if has_reserved(v) {
                return Err(reserved(format!("/objects/{i}/{field}")));
            }
        }
        lines.push(format!(
            "<{}>(category: {}; description: {}; color: {})",
            o.name, o.category, o.description, o.color
        ));
    }
    lines.push(format!("%%{}%%", cfg.main_titles[2]));
    for (i, r) in graph.relationships.iter().enumerate() {
        for (field, v) in [
            ("subject", &r.subject),
            ("predicate", &r.predicate),
            ("object", &r.object),
        ] {
            if has_reserved(v) {
                return Err(reserved(format!("/relationships/{i}/{field}")));
            }
        }
        lines.push(r.to_string());
    }
    Ok(lines.join("\n"))
}

/// The byte form `serialize(parse(s))` reproduces: trailing whitespace
/// trimmed per line, blank lines dropped, no final newline.
pub fn normal_form(input: &str) -> String {
    input
        .split('\n')
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Formats a number with exactly four fractional digits.
pub fn fmt_num(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.4}")
}

pub(crate) fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub(crate) fn json_box(b: &BBox) -> String {
    let c = b.to_array();
    format!(
        "[{},{},{},{}]",
        fmt_num(c[0]),
        fmt_num(c[1]),
        fmt_num(c[2]),
        fmt_num(c[3])
    )
}

/// Canonical compact JSON with fixed key order.
pub fn to_json(graph: &CaptionGraph) -> String {
    let mut out = String::from("{\"overall\":[");
    for (i, s) in graph.overall.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!(
            "{{\"subtitle\":{},\"text\":{}}}",
            json_str(&s.subtitle),
            json_str(&s.text)
        ));
    }
    out.push_str("],\"objects\":[");
    for (i, o) in graph.objects.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let bbox = o.bbox.as_ref().map_or("null".to_string(), json_box);
        let mask = o
            .mask
            .as_ref()
            .map_or("null".to_string(), |m| json_str(&m.to_string()));
        out.push_str(&format!(
            "{{\"name\":{},\"category\":{},\"description\":{},\"color\":{},\"box\":{},\"mask\":{}}}",
            json_str(&o.name),
            json_str(&o.category),
            json_str(&o.description),
            json_str(&o.color),
            bbox,
            mask
        ));
    }
    out.push_str("],\"relationships\":[");
    for (i, r) in graph.relationships.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!(
            "{{\"subject\":{},\"predicate\":{},\"object\":{}}}",
            json_str(&r.subject),
            json_str(&r.predicate),
            json_str(&r.object)
        ));
    }
    out.push_str("]}");
    out
}

pub fn from_json(text: &str) -> Result<CaptionGraph, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaError {
        pointer: String::new(),
        detail: format!("invalid JSON: {e}"),
    })?;
    graph_from_value(&value, "")
}

pub(crate) fn schema(pointer: impl Into<String>, detail: impl Into<String>) -> SchemaError {
    SchemaError {
        pointer: pointer.into(),
        detail: detail.into(),
    }
}

pub(crate) fn expect_object<'a>(
    v: &'a Value,
    at: &str,
    required: &[&str],
    optional: &[&str],
) -> Result<&'a serde_json::Map<String, Value>, SchemaError> {
    let map = v
        .as_object()
        .ok_or_else(|| schema(at, "expected an object"))?;
    for key in map.keys() {
        if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
            return Err(schema(format!("{at}/{key}"), "unexpected key"));
        }
    }
    for key in required {
        if !map.contains_key(*key) {
            return Err(schema(format!("{at}/{key}"), "missing key"));
        }
    }
    Ok(map)
}

fn get_str(
    map: &serde_json::Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<String, SchemaError> {
    map[key]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(format!("{at}/{key}"), "expected a string"))
}

fn get_array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>, SchemaError> {
    v.as_array().ok_or_else(|| schema(at, "expected an array"))
}

pub(crate) fn box_from_value(v: &Value, at: &str) -> Result<BBox, SchemaError> {
    let arr = get_array(v, at)?;
    if arr.len() != 4 {
        return Err(schema(
            at,
            format!("box needs 4 numbers, got {}", arr.len()),
        ));
    }
    let mut c = [0f64; 4];
    for (i, x) in arr.iter().enumerate() {
        c[i] = x
            .as_f64()
            .ok_or_else(|| schema(format!("{at}/{i}"), "expected a number"))?;
    }
    BBox::from_array(c).map_err(|e| schema(at, e.to_string()))
}

/// Parses a graph object found at JSON pointer `at`.
pub fn graph_from_value(value: &Value, at: &str) -> Result<CaptionGraph, SchemaError> {
    let top = expect_object(value, at, &["overall", "objects", "relationships"], &[])?;
    let mut graph = CaptionGraph::default();

    for (i, s) in get_array(&top["overall"], &format!("{at}/overall"))?
        .iter()
        .enumerate()
    {
        let p = format!("{at}/overall/{i}");
        let m = expect_object(s, &p, &["subtitle", "text"], &[])?;
        graph.overall.push(OverallSection {
            subtitle: get_str(m, "subtitle", &p)?,
            text: get_str(m, "text", &p)?,
        });
    }

    for (i, o) in get_array(&top["objects"], &format!("{at}/objects"))?
        .iter()
        .enumerate()
    {
        let p = format!("{at}/objects/{i}");
        let m = expect_object(
            o,
            &p,
            &["name", "category", "description", "color"],
            &["box", "mask"],
        )?;
        let mut entry = ObjectEntry::new(
            get_str(m, "name", &p)?,
            get_str(m, "category", &p)?,
            get_str(m, "description", &p)?,
            get_str(m, "color", &p)?,
        );
        match m.get("box") {
            None | Some(Value::Null) => {}
            Some(b) => entry.bbox = Some(box_from_value(b, &format!("{p}/box"))?),
        }
        match m.get("mask") {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) => {
                entry.mask = Some(
                    s.parse::<MaskRle>()
                        .map_err(|e| schema(format!("{p}/mask"), e.to_string()))?,
                )
            }
            Some(_) => {
                return Err(schema(
                    format!("{p}/mask"),
                    "expected an RLE string or null",
                ))
            }
        }
        graph.objects.push(entry);
    }

    for (i, r) in get_array(&top["relationships"], &format!("{at}/relationships"))?
        .iter()
        .enumerate()
    {
        let p = format!("{at}/relationships/{i}");
        let m = expect_object(r, &p, &["subject", "predicate", "object"], &[])?;
        graph.relationships.push(RelationTriplet::new(
            get_str(m, "subject", &p)?,
            get_str(m, "predicate", &p)?,
            get_str(m, "object", &p)?,
        ));
    }
    Ok(graph)
}

/// Example slots a caller may fill; each has a built-in default.
pub const EXAMPLE_SLOTS: &[(&str, &str)] = &[
    ("section_example", "&&Background&& A quiet street lined with trees."),
    (
        "numbering",
        "Two people become <person 1> and <person 2>; one dog stays <dog 1>.",
    ),
    (
        "object_example",
        "<name>(category: the category; description: what it looks like; color: its colors)",
    ),
    ("detail_example", "The object is ... It has ..."),
    ("relation_example", "<object A> [predicate] <object B>"),
    (
        "inverse_example",
        "Write <cup 1> [on] <table 1> but not also <table 1> [under] <cup 1>.",
    ),
    (
        "full_example",
        "%%Overall Description%%\n&&Style&& A color photograph.\n&&Theme&& A dog playing outdoors.\n&&Background&& Green grass under a clear sky.\n&&Foreground&& A <dog 1> chases a <ball 1>.\n%%Object List%%\n<dog 1>(category: dog; description: A small dog with floppy ears. It is running.; color: brown, white)\n<ball 1>(category: ball; description: A round toy ball.; color: red)\n%%Relationships%%\n<dog 1> [chases] <ball 1>",
    ),
];

/// Fills the bundled instruction template. Grammar slots come from `cfg`;
/// example slots take caller text when given, else their defaults.
pub fn build_instruction_prompt(
    cfg: &GrammarConfig,
    examples: &[(String, String)],
) -> Result<String, PromptError> {
    for (slot, _) in examples {
        if !EXAMPLE_SLOTS.iter().any(|(s, _)| s == slot) {
            return Err(PromptError::UnknownSlot(slot.clone()));
        }
    }
    let mut values: Vec<(String, String)> = vec![
        ("overall_title".into(), cfg.main_titles[0].clone()),
        ("objects_title".into(), cfg.main_titles[1].clone()),
        ("relations_title".into(), cfg.main_titles[2].clone()),
        (
            "subtitles".into(),
            cfg.canonical_subtitles
                .iter()
                .map(|s| format!("&&{s}&&"))
                .collect::<Vec<_>>()
                .join(", "),
        ),
    ];
    for (slot, default) in EXAMPLE_SLOTS {
        let given = examples
            .iter()
            .rev()
            .find(|(s, _)| s == slot)
            .map(|(_, t)| t.clone());
        let mut text = given.unwrap_or_else(|| default.to_string());
        if *slot == "full_example" && cfg != &GrammarConfig::default() && text == *default {
            text = text
                .replace(
                    "%%Overall Description%%",
                    &format!("%%{}%%", cfg.main_titles[0]),
                )
                .replace("%%Object List%%", &format!("%%{}%%", cfg.main_titles[1]))
                .replace("%%Relationships%%", &format!("%%{}%%", cfg.main_titles[2]));
        }
        values.push((slot.to_string(), text));
    }
    // Single pass so substituted text is never re-scanned for slots.
    let mut out = String::with_capacity(TEMPLATE.len() * 2);
    let mut rest = TEMPLATE;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let slot = &after[..end];
        let value = values
            .iter()
            .find(|(s, _)| s == slot)
            .ok_or_else(|| PromptError::UnknownSlot(slot.to_string()))?;
        out.push_str(&value.1);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
