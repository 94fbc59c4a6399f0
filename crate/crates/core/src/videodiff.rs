//! Caption alignment across video frames.
//!
//! Track identities are merged by mask (or box) overlap between adjacent
//! frames. Two frames' captions are then diffed element by element into
//! New, Removed, Altered and Persistent.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::format::{expect_object, graph_from_value, schema, SchemaError};
use crate::geometry::{greedy_match, iou_box, iou_mask, GeometryError};
use crate::model::{split_sentences, CaptionGraph, ObjectEntry};
use crate::providers::{cosine, Embedding, ProviderError, TextEmbedder};
use crate::regionqa::object_region;

pub const DEFAULT_TAU_MASK: f64 = 0.8;
pub const DEFAULT_RHO_STABLE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VideoError {
    #[error("frame {frame}: {source}")]
    Geometry {
        frame: usize,
        #[source]
        source: GeometryError,
    },
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("frame {frame}: duplicate object name {name:?}")]
    DuplicateName { frame: usize, name: String },
    #[error("frame {frame}: track id for unknown object {name:?}")]
    UnknownTrackKey { frame: usize, name: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame {
    pub frame_index: u64,
    pub graph: CaptionGraph,
    pub track_ids: BTreeMap<String, u64>,
}

impl TrackedFrame {
    pub fn new(frame_index: u64, graph: CaptionGraph) -> Self {
        Self {
            frame_index,
            graph,
            track_ids: BTreeMap::new(),
        }
    }

    fn track_of(&self, name: &str) -> Option<u64> {
        self.track_ids.get(name.trim()).copied()
    }
}

/// Reads `{"frame_index": n, "caption": {...}, "track_ids": {...}}`;
/// `track_ids` is optional.
pub fn frame_from_value(v: &Value, at: &str) -> Result<TrackedFrame, SchemaError> {
    let m = expect_object(v, at, &["frame_index", "caption"], &["track_ids"])?;
    let frame_index = m["frame_index"].as_u64().ok_or_else(|| {
        schema(
            format!("{at}/frame_index"),
            "expected a non-negative integer",
        )
    })?;
    let graph = graph_from_value(&m["caption"], &format!("{at}/caption"))?;
    let mut track_ids = BTreeMap::new();
    if let Some(t) = m.get("track_ids") {
        let obj = t
            .as_object()
            .ok_or_else(|| schema(format!("{at}/track_ids"), "expected an object"))?;
        for (k, id) in obj {
            let id = id.as_u64().ok_or_else(|| {
                schema(
                    format!("{at}/track_ids/{k}"),
                    "expected a non-negative integer",
                )
            })?;
            track_ids.insert(k.clone(), id);
        }
    }
    Ok(TrackedFrame {
        frame_index,
        graph,
        track_ids,
    })
}

/// Union-find whose representative is always the smallest member.
#[derive(Debug, Clone)]
pub struct MinUnionFind {
    parent: Vec<usize>,
}

impl MinUnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
    }
}

/// Overlap used for track linking: mask IoU when both objects carry masks,
/// otherwise box IoU. `None` when either object has no region.
pub fn track_overlap(a: &ObjectEntry, b: &ObjectEntry) -> Result<Option<f64>, GeometryError> {
    if let (Some(ma), Some(mb)) = (&a.mask, &b.mask) {
        return iou_mask(ma, mb).map(Some);
    }
    Ok(match (object_region(a), object_region(b)) {
        (Some(x), Some(y)) => Some(iou_box(&x, &y)),
        _ => None,
    })
}

/// Replaces every frame's track ids. Objects in adjacent frames are linked
/// when their overlap is positive and at least `tau_mask`; each connected
/// component gets the smallest global node index as its id, where nodes
/// are numbered frame by frame in object-list order.
pub fn merge_track_ids(
    frames: &[TrackedFrame],
    tau_mask: f64,
) -> Result<Vec<TrackedFrame>, VideoError> {
    if !(0.0..=1.0).contains(&tau_mask) {
        return Err(VideoError::InvalidThreshold(tau_mask));
    }
    let mut offsets = Vec::with_capacity(frames.len());
    let mut total = 0;
    for (fi, f) in frames.iter().enumerate() {
        let mut seen = std::collections::HashSet::new();
        for o in &f.graph.objects {
            if !seen.insert(o.name.trim()) {
                return Err(VideoError::DuplicateName {
                    frame: fi,
                    name: o.name.clone(),
                });
            }
        }
        offsets.push(total);
        total += f.graph.objects.len();
    }
    let mut uf = MinUnionFind::new(total);
    for fi in 1..frames.len() {
        let (prev, curr) = (&frames[fi - 1].graph.objects, &frames[fi].graph.objects);
        for (i, a) in prev.iter().enumerate() {
            for (j, b) in curr.iter().enumerate() {
                let overlap = track_overlap(a, b)
                    .map_err(|source| VideoError::Geometry { frame: fi, source })?;
                if overlap.is_some_and(|x| x > 0.0 && x >= tau_mask) {
                    uf.union(offsets[fi - 1] + i, offsets[fi] + j);
                }
            }
        }
    }
    Ok(frames
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let track_ids = f
                .graph
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (o.name.trim().to_string(), uf.find(offsets[fi] + i) as u64))
                .collect();
            TrackedFrame {
                track_ids,
                ..f.clone()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    New,
    Removed,
    Altered,
    Persistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementClass {
    Object,
    Relationship,
    Overall,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffEntry {
    pub class: ElementClass,
    pub status: Status,
    /// Object name, relationship line, or overall subtitle.
    pub label: String,
    pub prev: Option<String>,
    pub curr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StatusCounts {
    pub new: usize,
    pub removed: usize,
    pub altered: usize,
    pub persistent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub prev_frame: u64,
    pub curr_frame: u64,
    pub entries: Vec<DiffEntry>,
}

impl DiffReport {
    pub fn counts(&self, class: ElementClass) -> StatusCounts {
        let mut c = StatusCounts::default();
        for e in self.entries.iter().filter(|e| e.class == class) {
            match e.status {
                Status::New => c.new += 1,
                Status::Removed => c.removed += 1,
                Status::Altered => c.altered += 1,
                Status::Persistent => c.persistent += 1,
            }
        }
        c
    }

    pub fn all_persistent(&self) -> bool {
        self.entries.iter().all(|e| e.status == Status::Persistent)
    }
}

/// Cosine of two texts' embeddings; identical texts always score 1.
fn text_sim(a: &str, b: &str, va: &Embedding, vb: &Embedding) -> f64 {
    if a == b {
        1.0
    } else {
        cosine(va, vb)
    }
}

fn embed(embedder: &dyn TextEmbedder, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
    if texts.is_empty() {
        Ok(Vec::new())
    } else {
        embedder.embed(texts)
    }
}

/// Pairs prev/curr objects: by shared track id first, then by exact name
/// when at least one side has no track id. Returns `curr -> prev`.
fn pair_objects(prev: &TrackedFrame, curr: &TrackedFrame) -> Vec<Option<usize>> {
    let po = &prev.graph.objects;
    let co = &curr.graph.objects;
    let mut taken = vec![false; po.len()];
    let mut out = vec![None; co.len()];
    for (j, c) in co.iter().enumerate() {
        if let Some(t) = curr.track_of(&c.name) {
            if let Some(i) =
                (0..po.len()).find(|&i| !taken[i] && prev.track_of(&po[i].name) == Some(t))
            {
                taken[i] = true;
                out[j] = Some(i);
            }
        }
    }
    for (j, c) in co.iter().enumerate() {
        if out[j].is_some() {
            continue;
        }
        let ct = curr.track_of(&c.name);
        let hit = (0..po.len()).find(|&i| {
            !taken[i]
                && po[i].name.trim() == c.name.trim()
                && (ct.is_none() || prev.track_of(&po[i].name).is_none())
        });
        if let Some(i) = hit {
            taken[i] = true;
            out[j] = Some(i);
        }
    }
    out
}

/// Classifies every object, relationship and overall sub-sentence of the
/// two frames. Each element of either frame appears in exactly one entry.
pub fn diff_captions(
    prev: &TrackedFrame,
    curr: &TrackedFrame,
    embedder: &dyn TextEmbedder,
    rho_stable: f64,
) -> Result<DiffReport, VideoError> {
    if !(0.0..=1.0).contains(&rho_stable) {
        return Err(VideoError::InvalidThreshold(rho_stable));
    }
    for (fi, f) in [prev, curr].into_iter().enumerate() {
        if let Some(name) = f.track_ids.keys().find(|k| f.graph.object(k).is_none()) {
            return Err(VideoError::UnknownTrackKey {
                frame: fi,
                name: name.clone(),
            });
        }
    }
    let mut entries = Vec::new();

    // objects
    let (po, co) = (&prev.graph.objects, &curr.graph.objects);
    let pairing = pair_objects(prev, curr);
    let pd: Vec<String> = po.iter().map(|o| o.description.clone()).collect();
    let cd: Vec<String> = co.iter().map(|o| o.description.clone()).collect();
    let pv = embed(embedder, &pd)?;
    let cv = embed(embedder, &cd)?;
    let mut prev_matched = vec![false; po.len()];
    for (j, c) in co.iter().enumerate() {
        match pairing[j] {
            Some(i) => {
                prev_matched[i] = true;
                let sim = text_sim(&pd[i], &cd[j], &pv[i], &cv[j]);
                entries.push(DiffEntry {
                    class: ElementClass::Object,
                    status: if sim >= rho_stable {
                        Status::Persistent
                    } else {
                        Status::Altered
                    },
                    label: c.name.clone(),
                    prev: Some(pd[i].clone()),
                    curr: Some(cd[j].clone()),
                    similarity: Some(sim),
                });
            }
            None => entries.push(DiffEntry {
                class: ElementClass::Object,
                status: Status::New,
                label: c.name.clone(),
                prev: None,
                curr: Some(cd[j].clone()),
                similarity: None,
            }),
        }
    }
    for (i, p) in po.iter().enumerate().filter(|(i, _)| !prev_matched[*i]) {
        entries.push(DiffEntry {
            class: ElementClass::Object,
            status: Status::Removed,
            label: p.name.clone(),
            prev: Some(pd[i].clone()),
            curr: None,
            similarity: None,
        });
    }

    // relationships: endpoints compared through the object pairing
    let mut prev_key: HashMap<String, String> = HashMap::new();
    let mut curr_key: HashMap<String, String> = HashMap::new();
    for (i, p) in po.iter().enumerate() {
        prev_key.insert(p.name.trim().to_string(), format!("#{i}"));
    }
    for (j, c) in co.iter().enumerate() {
        let key = match pairing[j] {
            Some(i) => format!("#{i}"),
            None => format!("+{j}"),
        };
        curr_key.insert(c.name.trim().to_string(), key);
    }
    let endpoint = |keys: &HashMap<String, String>, name: &str| {
        keys.get(name.trim())
            .cloned()
            .unwrap_or_else(|| format!("={}", name.trim()))
    };
    let (pr, cr) = (&prev.graph.relationships, &curr.graph.relationships);
    let ppv = embed(
        embedder,
        &pr.iter().map(|r| r.predicate.clone()).collect::<Vec<_>>(),
    )?;
    let cpv = embed(
        embedder,
        &cr.iter().map(|r| r.predicate.clone()).collect::<Vec<_>>(),
    )?;
    let rel_sim =
        |j: usize, i: usize| text_sim(&cr[j].predicate, &pr[i].predicate, &cpv[j], &ppv[i]);
    let m = greedy_match(cr, pr, rel_sim, |j, i| {
        endpoint(&curr_key, &cr[j].subject) == endpoint(&prev_key, &pr[i].subject)
            && endpoint(&curr_key, &cr[j].object) == endpoint(&prev_key, &pr[i].object)
            && rel_sim(j, i) >= rho_stable
    });
    for (j, r) in cr.iter().enumerate() {
        let e = match m.gt_for_pred(j) {
            Some(i) => DiffEntry {
                class: ElementClass::Relationship,
                status: Status::Persistent,
                label: r.to_string(),
                prev: Some(pr[i].to_string()),
                curr: Some(r.to_string()),
                similarity: Some(rel_sim(j, i)),
            },
            None => DiffEntry {
                class: ElementClass::Relationship,
                status: Status::New,
                label: r.to_string(),
                prev: None,
                curr: Some(r.to_string()),
                similarity: None,
            },
        };
        entries.push(e);
    }
    for &i in &m.unmatched_gt {
        entries.push(DiffEntry {
            class: ElementClass::Relationship,
            status: Status::Removed,
            label: pr[i].to_string(),
            prev: Some(pr[i].to_string()),
            curr: None,
            similarity: None,
        });
    }

    // overall sub-sentences
    let sentences = |g: &CaptionGraph| -> Vec<(String, String)> {
        g.overall
            .iter()
            .flat_map(|s| {
                split_sentences(&s.text)
                    .into_iter()
                    .map(move |t| (s.subtitle.trim().to_string(), t))
            })
            .collect()
    };
    let (ps, cs) = (sentences(&prev.graph), sentences(&curr.graph));
    let psv = embed(
        embedder,
        &ps.iter().map(|s| s.1.clone()).collect::<Vec<_>>(),
    )?;
    let csv = embed(
        embedder,
        &cs.iter().map(|s| s.1.clone()).collect::<Vec<_>>(),
    )?;
    let ssim = |j: usize, i: usize| text_sim(&cs[j].1, &ps[i].1, &csv[j], &psv[i]);
    let m = greedy_match(&cs, &ps, ssim, |j, i| ssim(j, i) >= rho_stable);
    let mut curr_to_prev: Vec<Option<(usize, Status)>> = (0..cs.len())
        .map(|j| m.gt_for_pred(j).map(|i| (i, Status::Persistent)))
        .collect();
    // leftovers under the same subtitle pair up by position as edits
    let mut prev_left: Vec<bool> = vec![false; ps.len()];
    for &i in &m.unmatched_gt {
        prev_left[i] = true;
    }
    for j in m.unmatched_pred.iter().copied() {
        if let Some(i) = (0..ps.len()).find(|&i| prev_left[i] && ps[i].0 == cs[j].0) {
            prev_left[i] = false;
            curr_to_prev[j] = Some((i, Status::Altered));
        }
    }
    for (j, (sub, text)) in cs.iter().enumerate() {
        entries.push(match curr_to_prev[j] {
            Some((i, status)) => DiffEntry {
                class: ElementClass::Overall,
                status,
                label: sub.clone(),
                prev: Some(ps[i].1.clone()),
                curr: Some(text.clone()),
                similarity: Some(ssim(j, i)),
            },
            None => DiffEntry {
                class: ElementClass::Overall,
                status: Status::New,
                label: sub.clone(),
                prev: None,
                curr: Some(text.clone()),
                similarity: None,
            },
        });
    }
    for (_, (sub, text)) in ps.iter().enumerate().filter(|(i, _)| prev_left[*i]) {
        entries.push(DiffEntry {
            class: ElementClass::Overall,
            status: Status::Removed,
            label: sub.clone(),
            prev: Some(text.clone()),
            curr: None,
            similarity: None,
        });
    }

    Ok(DiffReport {
        prev_frame: prev.frame_index,
        curr_frame: curr.frame_index,
        entries,
    })
}

fn class_name(c: ElementClass) -> &'static str {
    match c {
        ElementClass::Object => "object",
        ElementClass::Relationship => "relationship",
        ElementClass::Overall => "overall",
    }
}

fn entry_text(e: &DiffEntry) -> String {
    match (e.status, &e.prev, &e.curr) {
        (Status::Altered, Some(p), Some(c)) => format!("{p} -> {c}"),
        (_, _, Some(c)) => c.clone(),
        (_, Some(p), None) => p.clone(),
        _ => String::new(),
    }
}

/// `[class] label: text`, without the text when it only repeats the label.
fn entry_line(e: &DiffEntry, escape: fn(&str) -> String) -> String {
    let text = entry_text(e);
    if text == e.label {
        format!("[{}] {}", class_name(e.class), escape(&e.label))
    } else {
        format!(
            "[{}] {}: {}",
            class_name(e.class),
            escape(&e.label),
            escape(&text)
        )
    }
}

/// Terminal rendering: new in blue, removed in red, altered in magenta,
/// persistent uncolored.
pub fn render_ansi(report: &DiffReport) -> String {
    let mut out = format!("frame {} -> {}\n", report.prev_frame, report.curr_frame);
    for e in &report.entries {
        let color = match e.status {
            Status::New => "\x1b[34m",
            Status::Removed => "\x1b[31m",
            Status::Altered => "\x1b[35m",
            Status::Persistent => "",
        };
        let reset = if color.is_empty() { "" } else { "\x1b[0m" };
        let _ = writeln!(out, "{color}{}{reset}", entry_line(e, str::to_string));
    }
    out
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_html(report: &DiffReport) -> String {
    let mut out = format!(
        "<div class=\"diff\" data-prev=\"{}\" data-curr=\"{}\">\n",
        report.prev_frame, report.curr_frame
    );
    for e in &report.entries {
        let color = match e.status {
            Status::New => "blue",
            Status::Removed => "red",
            Status::Altered => "#e75480",
            Status::Persistent => "black",
        };
        let _ = writeln!(
            out,
            "<p class=\"{}\" style=\"color:{color}\">{}</p>",
            serde_json::to_value(e.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            entry_line(e, html_escape),
        );
    }
    out.push_str("</div>\n");
    out
}
