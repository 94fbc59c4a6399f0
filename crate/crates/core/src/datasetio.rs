//! JSONL caption datasets: streaming load, deterministic write, statistics.
//!
//! One record per line: `{"image_id":..,"image_ref":..,"caption":{..}}`
//! with the caption in canonical graph JSON.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::format::{expect_object, graph_from_value, json_str, schema, to_json, SchemaError};
use crate::model::{name_head, CaptionGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image_ref: Option<String>,
    pub caption: CaptionGraph,
}

/// A malformed line, numbered from 1.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {error}")]
pub struct LineError {
    pub line: usize,
    pub error: SchemaError,
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Line(#[from] LineError),
}

pub fn record_from_value(v: &Value) -> Result<DatasetRecord, SchemaError> {
    let m = expect_object(v, "", &["image_id", "caption"], &["image_ref"])?;
    let image_id = m["image_id"]
        .as_str()
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| schema("/image_id", "expected a non-empty string"))?
        .to_string();
    let image_ref = match m.get("image_ref") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema("/image_ref", "expected a string or null")),
    };
    let caption = graph_from_value(&m["caption"], "/caption")?;
    Ok(DatasetRecord {
        image_id,
        image_ref,
        caption,
    })
}

/// Canonical single-line encoding, without the newline.
pub fn record_to_line(r: &DatasetRecord) -> String {
    format!(
        "{{\"image_id\":{},\"image_ref\":{},\"caption\":{}}}",
        json_str(&r.image_id),
        r.image_ref.as_deref().map_or("null".to_string(), json_str),
        to_json(&r.caption)
    )
}

/// SHA-256 of the canonical caption JSON, hex encoded. Equal captions hash
/// equal regardless of image id.
pub fn content_hash(r: &DatasetRecord) -> String {
    hex::encode(Sha256::digest(to_json(&r.caption).as_bytes()))
}

/// Streams records line by line. Blank lines are skipped; a repeated
/// `image_id` is reported as an error on the later line.
pub struct RecordReader<R> {
    inner: R,
    line: usize,
    seen: HashSet<String>,
    buf: String,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            seen: HashSet::new(),
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<DatasetRecord, ReadError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            let tag = |error| ReadError::Line(LineError { line, error });
            let value: Value = match serde_json::from_str(text) {
                Ok(v) => v,
                Err(e) => return Some(Err(tag(schema("", format!("invalid JSON: {e}"))))),
            };
            let rec = match record_from_value(&value) {
                Ok(r) => r,
                Err(e) => return Some(Err(tag(e))),
            };
            if !self.seen.insert(rec.image_id.clone()) {
                return Some(Err(tag(schema(
                    "/image_id",
                    format!("duplicate image_id {:?}", rec.image_id),
                ))));
            }
            return Some(Ok(rec));
        }
    }
}

pub fn open_jsonl(path: impl AsRef<Path>) -> io::Result<RecordReader<BufReader<File>>> {
    Ok(RecordReader::new(BufReader::new(File::open(path)?)))
}

#[derive(Debug, Default)]
pub struct LoadSummary {
    pub records: Vec<DatasetRecord>,
    pub errors: Vec<LineError>,
}

/// Reads everything, collecting per-line errors. I/O errors abort.
pub fn collect_records<R: BufRead>(reader: RecordReader<R>) -> io::Result<LoadSummary> {
    let mut out = LoadSummary::default();
    for item in reader {
        match item {
            Ok(r) => out.records.push(r),
            Err(ReadError::Line(e)) => out.errors.push(e),
            Err(ReadError::Io(e)) => return Err(e),
        }
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> io::Result<LoadSummary> {
    collect_records(open_jsonl(path)?)
}

pub fn write_records<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a DatasetRecord>,
) -> io::Result<()> {
    for r in records {
        w.write_all(record_to_line(r).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_jsonl<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a DatasetRecord>,
) -> io::Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}

const STOP_WORDS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "a", "an", "the", "has", "have",
    "had", "do", "does", "did",
];

/// First lowercase token of a predicate that is not a stop word.
pub fn predicate_head(predicate: &str) -> Option<String> {
    predicate
        .split_whitespace()
        .map(str::to_lowercase)
        .find(|t| !STOP_WORDS.contains(&t.as_str()))
}

fn term(s: &str) -> Option<String> {
    let t = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    (!t.is_empty()).then_some(t)
}

/// Additive statistics; `merge` is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsTally {
    pub images: u64,
    pub objects: u64,
    pub relationships: u64,
    categories: HashMap<String, u64>,
    nouns: HashMap<String, u64>,
    predicates: HashMap<String, u64>,
}

impl StatsTally {
    pub fn add(&mut self, r: &DatasetRecord) {
        self.images += 1;
        self.objects += r.caption.objects.len() as u64;
        self.relationships += r.caption.relationships.len() as u64;
        for o in &r.caption.objects {
            if let Some(c) = term(&o.category) {
                *self.categories.entry(c).or_default() += 1;
            }
            if let Some(n) = term(name_head(&o.name)) {
                *self.nouns.entry(n).or_default() += 1;
            }
        }
        for rel in &r.caption.relationships {
            if let Some(p) = predicate_head(&rel.predicate) {
                *self.predicates.entry(p).or_default() += 1;
            }
        }
    }

    pub fn merge(mut self, other: StatsTally) -> StatsTally {
        self.images += other.images;
        self.objects += other.objects;
        self.relationships += other.relationships;
        for (mine, theirs) in [
            (&mut self.categories, other.categories),
            (&mut self.nouns, other.nouns),
            (&mut self.predicates, other.predicates),
        ] {
            for (k, v) in theirs {
                *mine.entry(k).or_default() += v;
            }
        }
        self
    }

    pub fn finish(&self, top_n: NonZeroUsize) -> CorpusStats {
        let top = |m: &HashMap<String, u64>| {
            let mut v: Vec<(String, u64)> = m.iter().map(|(k, c)| (k.clone(), *c)).collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v.truncate(top_n.get());
            v
        };
        CorpusStats {
            images: self.images,
            objects: self.objects,
            relationships: self.relationships,
            categories: top(&self.categories),
            nouns: top(&self.nouns),
            predicates: top(&self.predicates),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub images: u64,
    pub objects: u64,
    pub relationships: u64,
    /// `(term, count)`, count descending then term ascending.
    pub categories: Vec<(String, u64)>,
    pub nouns: Vec<(String, u64)>,
    pub predicates: Vec<(String, u64)>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "images {}  objects {}  relationships {}",
            self.images, self.objects, self.relationships
        )?;
        for (title, list) in [
            ("categories", &self.categories),
            ("nouns", &self.nouns),
            ("predicates", &self.predicates),
        ] {
            writeln!(f, "{title}:")?;
            for (t, c) in list {
                writeln!(f, "  {c:>6}  {t}")?;
            }
        }
        Ok(())
    }
}

pub fn corpus_stats<'a>(
    records: impl IntoIterator<Item = &'a DatasetRecord>,
    top_n: NonZeroUsize,
) -> CorpusStats {
    let mut t = StatsTally::default();
    for r in records {
        t.add(r);
    }
    t.finish(top_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObjectEntry, RelationTriplet};

    fn rec(id: &str, objects: &[(&str, &str)], preds: &[&str]) -> DatasetRecord {
        DatasetRecord {
            image_id: id.into(),
            image_ref: Some(format!("images/{id}.jpg")),
            caption: CaptionGraph {
                overall: Vec::new(),
                objects: objects
                    .iter()
                    .map(|(n, c)| ObjectEntry::new(*n, *c, "desc", "red"))
                    .collect(),
                relationships: preds
                    .iter()
                    .map(|p| RelationTriplet::new(objects[0].0, *p, objects[0].0))
                    .collect(),
            },
        }
    }

    fn n(k: usize) -> NonZeroUsize {
        NonZeroUsize::new(k).unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let recs = vec![
            rec("a", &[("dog 1", "dog")], &["is holding"]),
            rec("b", &[("cat", "cat")], &[]),
            DatasetRecord {
                image_ref: None,
                ..rec("c", &[], &[])
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = collect_records(RecordReader::new(&buf[..])).unwrap();
        assert!(back.errors.is_empty());
        assert_eq!(back.records, recs);
        let mut again = Vec::new();
        write_records(&mut again, &back.records).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_line_is_tagged() {
        let good = record_to_line(&rec("a", &[], &[]));
        let good2 = record_to_line(&rec("b", &[], &[]));
        let text = format!("{good}\n{{\"image_id\":\"x\"}}\n{good2}\n");
        let s = collect_records(RecordReader::new(text.as_bytes())).unwrap();
        assert_eq!(s.records.len(), 2);
        assert_eq!(s.errors.len(), 1);
        assert_eq!(s.errors[0].line, 2);
        assert_eq!(s.errors[0].error.pointer, "/caption");
    }

    #[test]
    fn empty_and_duplicates() {
        assert!(RecordReader::new(&b""[..]).next().is_none());
        let line = record_to_line(&rec("a", &[], &[]));
        let text = format!("{line}\n\n{line}\n");
        let s = collect_records(RecordReader::new(text.as_bytes())).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.errors[0].line, 3);
        assert_eq!(s.errors[0].error.pointer, "/image_id");
    }

    #[test]
    fn stats_examples() {
        let recs = vec![
            rec("a", &[("dog 1", "dog")], &[]),
            rec("b", &[("dog 1", "dog")], &[]),
        ];
        let s = corpus_stats(&recs, n(5));
        assert_eq!(s.categories, vec![("dog".to_string(), 2)]);
        assert_eq!(s.nouns, vec![("dog".to_string(), 2)]);

        let recs = vec![rec("a", &[("x", "x")], &["is holding", "holds"])];
        let s = corpus_stats(&recs, n(5));
        assert_eq!(
            s.predicates,
            vec![("holding".to_string(), 1), ("holds".to_string(), 1)]
        );

        let recs = vec![
            rec("a", &[("dog", "dog"), ("cat", "cat")], &[]),
            rec("b", &[("dog", "dog")], &[]),
        ];
        assert_eq!(
            corpus_stats(&recs, n(1)).categories,
            vec![("dog".to_string(), 2)]
        );
    }

    #[test]
    fn tally_merge_matches_fold() {
        let recs = vec![
            rec("a", &[("dog 1", "dog"), ("cup", "cup")], &["on"]),
            rec("b", &[("cat", "cat")], &["is near", "the left of"]),
            rec("c", &[("dog 2", "dog")], &[]),
        ];
        let whole = corpus_stats(&recs, n(10));
        let mut left = StatsTally::default();
        left.add(&recs[0]);
        let mut right = StatsTally::default();
        right.add(&recs[1]);
        right.add(&recs[2]);
        assert_eq!(right.merge(left).finish(n(10)), whole);
        assert_eq!(
            (whole.images, whole.objects, whole.relationships),
            (3, 4, 3)
        );
    }

    #[test]
    fn hash_ignores_image_id() {
        let a = rec("a", &[("dog", "dog")], &[]);
        let b = DatasetRecord {
            image_id: "b".into(),
            ..a.clone()
        };
        assert_eq!(content_hash(&a), content_hash(&b));
        assert_eq!(content_hash(&a).len(), 64);
    }
}
