//! Evaluation procedures over predictions and ground truth.
//!
//! Labels are matched by embedding similarity instead of class ids. Every
//! evaluator works per item (image or case) and produces an [`ItemResult`];
//! item results merge by adding counts, so batches can be evaluated in any
//! order or in parallel and still reduce to the same report.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{greedy_match, iou_box, max_matching_size, BBox, MatchResult};
use crate::providers::{cosine, Embedding, ProviderError, QaModel, TextEmbedder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("case {case}: vqa mode needs at least 3 ground-truth answers, got {got}")]
    ModeUnavailable { case: usize, got: usize },
    #[error("no cases to evaluate")]
    NoCases,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub label: String,
    pub bbox: BBox,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub subject_box: BBox,
    pub object_box: BBox,
}

impl Triplet {
    /// The string compared by embedding similarity.
    pub fn key(&self) -> String {
        format!("{}_{}_{}", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutItem {
    pub name: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqaCase {
    pub caption: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CqaMode {
    Exact,
    Vqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Ovd,
    Sgg,
    Layout,
    Objects,
    Cqa,
}

/// One matched pair, or one unmatched side when the other index is absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub pred: Option<usize>,
    pub gt: Option<usize>,
    pub iou: Option<f64>,
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub answer: String,
    pub normalized: String,
    pub score: f64,
}

/// Additive counts for one item.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub preds: u64,
    pub gts: u64,
    pub matched: u64,
    pub optimal_matched: u64,
    pub iou_sum: f64,
    pub suboptimal_items: u64,
    pub score_sum: f64,
    pub cases: u64,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.preds += o.preds;
        self.gts += o.gts;
        self.matched += o.matched;
        self.optimal_matched += o.optimal_matched;
        self.iou_sum += o.iou_sum;
        self.suboptimal_items += o.suboptimal_items;
        self.score_sum += o.score_sum;
        self.cases += o.cases;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemResult {
    pub item: String,
    pub tally: Tally,
    pub matches: Vec<MatchRecord>,
    pub case: Option<CaseRecord>,
    /// (confidence, true positive) for every prediction; `None` when some
    /// prediction lacks a confidence.
    pub ap_records: Option<Vec<(f64, bool)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemDetail {
    pub item: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy_suboptimal: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub matches: Vec<MatchRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<CaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub kind: EvalKind,
    pub metrics: IndexMap<String, f64>,
    pub counts: IndexMap<String, u64>,
    pub details: Vec<ItemDetail>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn count(&self, name: &str) -> Option<u64> {
        self.counts.get(name).copied()
    }

    pub fn recall(&self) -> f64 {
        self.metric("recall").unwrap_or(0.0)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Reduces item results, in the given order, into one report.
pub fn merge(kind: EvalKind, items: Vec<ItemResult>) -> EvalReport {
    let mut t = Tally::default();
    let mut ap: Option<Vec<(f64, bool)>> = Some(Vec::new());
    let mut details = Vec::with_capacity(items.len());
    for it in items {
        t.add(&it.tally);
        ap = match (ap, it.ap_records) {
            (Some(mut acc), Some(r)) => {
                acc.extend(r);
                Some(acc)
            }
            _ => None,
        };
        let flagged =
            matches!(kind, EvalKind::Ovd | EvalKind::Sgg).then_some(it.tally.suboptimal_items > 0);
        details.push(ItemDetail {
            item: it.item,
            greedy_suboptimal: flagged,
            matches: it.matches,
            case: it.case,
        });
    }

    let mut metrics = IndexMap::new();
    let mut counts = IndexMap::new();
    let miou = if t.matched == 0 {
        0.0
    } else {
        t.iou_sum / t.matched as f64
    };
    match kind {
        EvalKind::Ovd | EvalKind::Sgg => {
            metrics.insert("recall".into(), ratio(t.matched, t.gts));
            metrics.insert("recall_optimal".into(), ratio(t.optimal_matched, t.gts));
            if kind == EvalKind::Ovd {
                metrics.insert("mIoU".into(), miou);
                if let Some(records) = ap {
                    if t.preds > 0 {
                        metrics.insert("ap50".into(), average_precision(records, t.gts));
                    }
                }
            }
            counts.insert("preds".into(), t.preds);
            counts.insert("gts".into(), t.gts);
            counts.insert("matched".into(), t.matched);
            counts.insert("optimal_matched".into(), t.optimal_matched);
            counts.insert("suboptimal_items".into(), t.suboptimal_items);
        }
        EvalKind::Layout | EvalKind::Objects => {
            if kind == EvalKind::Layout {
                metrics.insert("mIoU".into(), miou);
            }
            metrics.insert("precision".into(), ratio(t.matched, t.preds));
            metrics.insert("recall".into(), ratio(t.matched, t.gts));
            counts.insert("preds".into(), t.preds);
            counts.insert("gts".into(), t.gts);
            counts.insert("matched".into(), t.matched);
        }
        EvalKind::Cqa => {
            let acc = if t.cases == 0 {
                0.0
            } else {
                t.score_sum / t.cases as f64
            };
            metrics.insert("accuracy".into(), acc);
            counts.insert("cases".into(), t.cases);
        }
    }
    EvalReport {
        kind,
        metrics,
        counts,
        details,
    }
}

/// All-point interpolated average precision over confidence-ranked
/// predictions.
fn average_precision(mut records: Vec<(f64, bool)>, n_gt: u64) -> f64 {
    if n_gt == 0 || records.is_empty() {
        return 0.0;
    }
    // stable: equal confidences keep input order
    records.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0u64;
    let mut points = Vec::with_capacity(records.len());
    for (k, (_, hit)) in records.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut best_after = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        best_after[i] = running;
    }
    for (i, (r, _)) in points.iter().enumerate() {
        if *r > prev_recall {
            ap += (r - prev_recall) * best_after[i];
            prev_recall = *r;
        }
    }
    ap
}

fn embed_all(
    embedder: &dyn TextEmbedder,
    texts: Vec<String>,
) -> Result<Vec<Embedding>, ProviderError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    embedder.embed(&texts)
}

/// Cosine matrix `sim[p][g]` between two text lists, embedded in one call.
pub fn similarity_matrix(
    embedder: &dyn TextEmbedder,
    preds: &[String],
    gts: &[String],
) -> Result<Vec<Vec<f64>>, ProviderError> {
    let mut texts = preds.to_vec();
    texts.extend_from_slice(gts);
    let v = embed_all(embedder, texts)?;
    let (pv, gv) = v.split_at(preds.len());
    Ok(pv
        .iter()
        .map(|p| gv.iter().map(|g| cosine(p, g)).collect())
        .collect())
}

fn match_records(
    m: &MatchResult,
    iou: impl Fn(usize, usize) -> f64,
    sim: impl Fn(usize, usize) -> f64,
    with_iou: bool,
) -> Vec<MatchRecord> {
    let mut out: Vec<MatchRecord> = m
        .pairs
        .iter()
        .map(|p| MatchRecord {
            pred: Some(p.pred),
            gt: Some(p.gt),
            iou: with_iou.then(|| iou(p.pred, p.gt)),
            similarity: Some(sim(p.pred, p.gt)),
        })
        .collect();
    out.extend(m.unmatched_gt.iter().map(|&g| MatchRecord {
        pred: None,
        gt: Some(g),
        iou: None,
        similarity: None,
    }));
    out.extend(m.unmatched_pred.iter().map(|&p| MatchRecord {
        pred: Some(p),
        gt: None,
        iou: None,
        similarity: None,
    }));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvdConfig {
    /// Label similarity must strictly exceed this.
    pub tau_sim: f64,
    pub tau_iou: f64,
}

impl Default for OvdConfig {
    fn default() -> Self {
        Self {
            tau_sim: 0.85,
            tau_iou: 0.5,
        }
    }
}

pub fn ovd_item(
    item: impl Into<String>,
    preds: &[Detection],
    gts: &[Detection],
    embedder: &dyn TextEmbedder,
    cfg: &OvdConfig,
) -> Result<ItemResult, ProviderError> {
    let sim = similarity_matrix(
        embedder,
        &preds.iter().map(|d| d.label.clone()).collect::<Vec<_>>(),
        &gts.iter().map(|d| d.label.clone()).collect::<Vec<_>>(),
    )?;
    let iou: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| iou_box(&p.bbox, &g.bbox)).collect())
        .collect();
    let admissible = |p: usize, g: usize| sim[p][g] > cfg.tau_sim && iou[p][g] >= cfg.tau_iou;
    let m = greedy_match(preds, gts, |p, g| iou[p][g], admissible);
    let optimal = max_matching_size(preds.len(), gts.len(), admissible) as u64;
    let matched = m.pairs.len() as u64;

    let ap_records = if preds.iter().all(|d| d.confidence.is_some()) {
        // confidence-ranked pass: each prediction claims the best remaining gt
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .confidence
                .unwrap()
                .total_cmp(&preds[a].confidence.unwrap())
        });
        let mut taken = vec![false; gts.len()];
        let mut records = Vec::with_capacity(preds.len());
        for p in order {
            let best = (0..gts.len())
                .filter(|&g| !taken[g] && admissible(p, g))
                .max_by(|&a, &b| iou[p][a].total_cmp(&iou[p][b]).then(b.cmp(&a)));
            if let Some(g) = best {
                taken[g] = true;
            }
            records.push((preds[p].confidence.unwrap(), best.is_some()));
        }
        Some(records)
    } else {
        None
    };

    Ok(ItemResult {
        item: item.into(),
        tally: Tally {
            preds: preds.len() as u64,
            gts: gts.len() as u64,
            matched,
            optimal_matched: optimal,
            iou_sum: m.pairs.iter().map(|p| iou[p.pred][p.gt]).sum(),
            suboptimal_items: u64::from(matched < optimal),
            ..Default::default()
        },
        matches: match_records(&m, |p, g| iou[p][g], |p, g| sim[p][g], true),
        case: None,
        ap_records,
    })
}

/// Open-vocabulary detection: recall, mIoU over matched pairs, and AP50
/// when every prediction carries a confidence.
pub fn eval_ovd(
    preds: &[Detection],
    gts: &[Detection],
    embedder: &dyn TextEmbedder,
    cfg: &OvdConfig,
) -> Result<EvalReport, ProviderError> {
    Ok(merge(
        EvalKind::Ovd,
        vec![ovd_item("0", preds, gts, embedder, cfg)?],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SggConfig {
    pub tau_sim: f64,
    pub tau_iou: f64,
}

impl Default for SggConfig {
    fn default() -> Self {
        Self {
            tau_sim: 0.9,
            tau_iou: 0.5,
        }
    }
}

pub fn sgg_item(
    item: impl Into<String>,
    preds: &[Triplet],
    gts: &[Triplet],
    embedder: &dyn TextEmbedder,
    cfg: &SggConfig,
) -> Result<ItemResult, ProviderError> {
    let sim = similarity_matrix(
        embedder,
        &preds.iter().map(Triplet::key).collect::<Vec<_>>(),
        &gts.iter().map(Triplet::key).collect::<Vec<_>>(),
    )?;
    let admissible = |p: usize, g: usize| {
        sim[p][g] >= cfg.tau_sim
            && iou_box(&preds[p].subject_box, &gts[g].subject_box) >= cfg.tau_iou
            && iou_box(&preds[p].object_box, &gts[g].object_box) >= cfg.tau_iou
    };
    let m = greedy_match(preds, gts, |p, g| sim[p][g], admissible);
    let optimal = max_matching_size(preds.len(), gts.len(), admissible) as u64;
    let matched = m.pairs.len() as u64;
    Ok(ItemResult {
        item: item.into(),
        tally: Tally {
            preds: preds.len() as u64,
            gts: gts.len() as u64,
            matched,
            optimal_matched: optimal,
            suboptimal_items: u64::from(matched < optimal),
            ..Default::default()
        },
        matches: match_records(&m, |_, _| 0.0, |p, g| sim[p][g], false),
        case: None,
        ap_records: None,
    })
}

/// Scene-graph triplet recall with string similarity plus subject and
/// object box overlap.
pub fn eval_sgg_recall(
    preds: &[Triplet],
    gts: &[Triplet],
    embedder: &dyn TextEmbedder,
    cfg: &SggConfig,
) -> Result<EvalReport, ProviderError> {
    Ok(merge(
        EvalKind::Sgg,
        vec![sgg_item("0", preds, gts, embedder, cfg)?],
    ))
}

pub fn layout_item(
    item: impl Into<String>,
    pred: &[LayoutItem],
    gt: &[LayoutItem],
    embedder: &dyn TextEmbedder,
    tau_name: f64,
) -> Result<ItemResult, ProviderError> {
    let sim = similarity_matrix(
        embedder,
        &pred.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        &gt.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
    )?;
    let iou: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gt.iter().map(|g| iou_box(&p.bbox, &g.bbox)).collect())
        .collect();
    let m = greedy_match(pred, gt, |p, g| iou[p][g], |p, g| sim[p][g] >= tau_name);
    Ok(ItemResult {
        item: item.into(),
        tally: Tally {
            preds: pred.len() as u64,
            gts: gt.len() as u64,
            matched: m.pairs.len() as u64,
            iou_sum: m.pairs.iter().map(|p| iou[p.pred][p.gt]).sum(),
            ..Default::default()
        },
        matches: match_records(&m, |p, g| iou[p][g], |p, g| sim[p][g], true),
        case: None,
        ap_records: None,
    })
}

pub fn eval_layout(
    pred: &[LayoutItem],
    gt: &[LayoutItem],
    embedder: &dyn TextEmbedder,
    tau_name: f64,
) -> Result<EvalReport, ProviderError> {
    Ok(merge(
        EvalKind::Layout,
        vec![layout_item("0", pred, gt, embedder, tau_name)?],
    ))
}

pub fn objects_item(
    item: impl Into<String>,
    pred: &[String],
    gt: &[String],
    embedder: &dyn TextEmbedder,
    tau_name: f64,
) -> Result<ItemResult, ProviderError> {
    let sim = similarity_matrix(embedder, pred, gt)?;
    let m = greedy_match(pred, gt, |p, g| sim[p][g], |p, g| sim[p][g] >= tau_name);
    Ok(ItemResult {
        item: item.into(),
        tally: Tally {
            preds: pred.len() as u64,
            gts: gt.len() as u64,
            matched: m.pairs.len() as u64,
            ..Default::default()
        },
        matches: match_records(&m, |_, _| 0.0, |p, g| sim[p][g], false),
        case: None,
        ap_records: None,
    })
}

/// Object-list precision and recall with name matching by similarity.
pub fn object_list_pr(
    pred: &[String],
    gt: &[String],
    embedder: &dyn TextEmbedder,
    tau_name: f64,
) -> Result<EvalReport, ProviderError> {
    Ok(merge(
        EvalKind::Objects,
        vec![objects_item("0", pred, gt, embedder, tau_name)?],
    ))
}

const ARTICLES: &[&str] = &["a", "an", "the"];

/// Lowercase, drop punctuation and articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cqa_item(
    index: usize,
    case: &CqaCase,
    qa: &dyn QaModel,
    mode: CqaMode,
) -> Result<ItemResult, EvalError> {
    if mode == CqaMode::Vqa && case.answers.len() < 3 {
        return Err(EvalError::ModeUnavailable {
            case: index,
            got: case.answers.len(),
        });
    }
    let answer = qa.answer(&case.caption, &case.question)?;
    let normalized = normalize_answer(&answer);
    let hits = case
        .answers
        .iter()
        .filter(|a| normalize_answer(a) == normalized)
        .count();
    let score = match mode {
        CqaMode::Exact => f64::from(u8::from(hits > 0)),
        CqaMode::Vqa => (hits as f64 / 3.0).min(1.0),
    };
    Ok(ItemResult {
        item: index.to_string(),
        tally: Tally {
            score_sum: score,
            cases: 1,
            ..Default::default()
        },
        matches: Vec::new(),
        case: Some(CaseRecord {
            answer,
            normalized,
            score,
        }),
        ap_records: None,
    })
}

/// Caption question answering: the QA model sees only the caption.
pub fn eval_cqa(
    cases: &[CqaCase],
    qa: &dyn QaModel,
    mode: CqaMode,
) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let items = cases
        .iter()
        .enumerate()
        .map(|(i, c)| cqa_item(i, c, qa, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge(EvalKind::Cqa, items))
}
