//! Region-based question answering helpers over a grounded caption graph.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{iou_box, overlap_fraction, BBox};
use crate::model::{CaptionGraph, ObjectEntry};
use crate::providers::{cosine, ProviderError, TextEmbedder};

pub const DEFAULT_IOU_MIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegionQaError {
    #[error("caption graph has no grounded objects")]
    NoGroundedObjects,
    #[error("need at least two candidate regions, got {0}")]
    TooFewCandidates(usize),
    #[error("iou_min must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionQuery {
    pub target: BBox,
    pub iou_min: f64,
}

impl RegionQuery {
    pub fn new(target: BBox, iou_min: f64) -> Result<Self, RegionQaError> {
        if !(0.0..=1.0).contains(&iou_min) {
            return Err(RegionQaError::InvalidThreshold(iou_min));
        }
        Ok(Self { target, iou_min })
    }
}

/// Box of a grounded object, taken from its mask when no box is attached.
pub fn object_region(o: &ObjectEntry) -> Option<BBox> {
    o.bbox
        .or_else(|| o.mask.as_ref().and_then(|m| m.bbox().ok()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionDescription {
    pub text: String,
    /// Names of included objects, in output order.
    pub included: Vec<String>,
    /// Objects skipped because they carry no region.
    pub ungrounded: Vec<String>,
}

/// Joins the descriptions of objects overlapping the target by at least
/// `iou_min` (and by a positive amount), highest IoU first.
pub fn region_description(graph: &CaptionGraph, q: &RegionQuery) -> RegionDescription {
    let mut ungrounded = Vec::new();
    let mut hits: Vec<(f64, usize)> = Vec::new();
    for (i, o) in graph.objects.iter().enumerate() {
        match object_region(o) {
            Some(b) => {
                let iou = iou_box(&b, &q.target);
                if iou > 0.0 && iou >= q.iou_min {
                    hits.push((iou, i));
                }
            }
            None => ungrounded.push(o.name.clone()),
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let parts: Vec<&str> = hits
        .iter()
        .map(|&(_, i)| graph.objects[i].description.trim())
        .filter(|d| !d.is_empty())
        .collect();
    RegionDescription {
        text: parts.join(" "),
        included: hits
            .iter()
            .map(|&(_, i)| graph.objects[i].name.clone())
            .collect(),
        ungrounded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingResult {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Scores each region by `sum overlap_fraction(object, region) * sigma`
/// where `sigma` is the given per-object score. Returns the argmax, lowest
/// index on ties.
pub fn select_region(objects: &[(BBox, f64)], regions: &[BBox]) -> PointingResult {
    let scores: Vec<f64> = regions
        .iter()
        .map(|r| {
            objects
                .iter()
                .map(|(b, s)| overlap_fraction(b, r) * s)
                .sum()
        })
        .collect();
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    PointingResult { index, scores }
}

/// Picks the candidate region whose grounded objects best match the
/// question, with object score = cosine(description, question).
pub fn pointing_select(
    graph: &CaptionGraph,
    question: &str,
    regions: &[BBox],
    embedder: &dyn TextEmbedder,
) -> Result<PointingResult, RegionQaError> {
    if regions.len() < 2 {
        return Err(RegionQaError::TooFewCandidates(regions.len()));
    }
    let grounded: Vec<(BBox, &ObjectEntry)> = graph
        .objects
        .iter()
        .filter_map(|o| object_region(o).map(|b| (b, o)))
        .collect();
    if grounded.is_empty() {
        return Err(RegionQaError::NoGroundedObjects);
    }
    let mut texts: Vec<String> = grounded
        .iter()
        .map(|(_, o)| o.description.clone())
        .collect();
    texts.push(question.to_string());
    let v = embedder.embed(&texts)?;
    let q = &v[grounded.len()];
    let weighted: Vec<(BBox, f64)> = grounded
        .iter()
        .zip(&v)
        .map(|((b, _), e)| (*b, cosine(e, q)))
        .collect();
    Ok(select_region(&weighted, regions))
}
