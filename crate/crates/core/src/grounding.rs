//! Attaches boxes to caption objects: propose regions by name, drop the
//! ones the judge rejects, then pick the candidate whose crop best matches
//! the object's description.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{optimal_assignment, BBox};
use crate::model::{name_head, CaptionGraph, ObjectEntry};
use crate::providers::{ProposedRegion, ProviderError, ProviderResult, ProviderSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub crop_sim_threshold: f64,
    pub max_candidates: usize,
    pub assign_same_category: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            crop_sim_threshold: 0.25,
            max_candidates: 10,
            assign_same_category: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateLog {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub detector_confidence: f64,
    pub kept: bool,
    pub judge_score: f64,
    /// Only scored for candidates the judge kept.
    pub crop_score: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundingOutcome {
    pub name: String,
    #[serde(rename = "box", serialize_with = "ser_opt_box")]
    pub bbox: Option<BBox>,
    pub stage_log: Vec<CandidateLog>,
    pub error: Option<String>,
}

fn ser_opt_box<S: serde::Serializer>(b: &Option<BBox>, s: S) -> Result<S::Ok, S::Error> {
    match b {
        Some(b) => b.to_array().serialize(s),
        None => s.serialize_none(),
    }
}

/// Query sent to the proposer: the object name without its instance index.
pub fn proposer_query(entry: &ObjectEntry) -> &str {
    name_head(&entry.name)
}

fn candidates(
    image_id: &str,
    query: &str,
    providers: &ProviderSet,
    cfg: &GroundingConfig,
) -> ProviderResult<Vec<ProposedRegion>> {
    let mut regions = providers.region_proposer.propose_regions(image_id, query)?;
    regions.truncate(cfg.max_candidates.max(1));
    Ok(regions)
}

/// Judge and crop-score every candidate for one object.
fn score_candidates(
    entry: &ObjectEntry,
    image_id: &str,
    regions: &[ProposedRegion],
    providers: &ProviderSet,
) -> ProviderResult<Vec<CandidateLog>> {
    regions
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let verdict =
                providers
                    .region_judge
                    .judge_region(image_id, &r.bbox, entry.name.trim())?;
            let crop_score = if verdict.keep {
                Some(
                    providers
                        .crop_scorer
                        .score_crop(image_id, &r.bbox, &entry.description)?,
                )
            } else {
                None
            };
            Ok(CandidateLog {
                index,
                bbox: r.bbox.to_array(),
                detector_confidence: r.detector_confidence,
                kept: verdict.keep,
                judge_score: verdict.score,
                crop_score,
                selected: false,
            })
        })
        .collect()
}

fn admissible(log: &CandidateLog, threshold: f64) -> bool {
    log.kept && log.crop_score.is_some_and(|s| s >= threshold)
}

/// Best admissible candidate: highest crop score, then larger area, then
/// lower index.
fn select(logs: &[CandidateLog], regions: &[ProposedRegion], threshold: f64) -> Option<usize> {
    logs.iter()
        .filter(|l| admissible(l, threshold))
        .max_by(|a, b| {
            let (sa, sb) = (a.crop_score.unwrap(), b.crop_score.unwrap());
            sa.total_cmp(&sb)
                .then(
                    regions[a.index]
                        .bbox
                        .area()
                        .total_cmp(&regions[b.index].bbox.area()),
                )
                .then(b.index.cmp(&a.index))
        })
        .map(|l| l.index)
}

pub fn ground_object(
    entry: &ObjectEntry,
    image_id: &str,
    providers: &ProviderSet,
    cfg: &GroundingConfig,
) -> ProviderResult<GroundingOutcome> {
    let regions = candidates(image_id, proposer_query(entry), providers, cfg)?;
    let mut logs = score_candidates(entry, image_id, &regions, providers)?;
    let chosen = select(&logs, &regions, cfg.crop_sim_threshold);
    if let Some(i) = chosen {
        logs[i].selected = true;
    }
    Ok(GroundingOutcome {
        name: entry.name.trim().to_string(),
        bbox: chosen.map(|i| regions[i].bbox),
        stage_log: logs,
        error: None,
    })
}

fn failed(entry: &ObjectEntry, e: &ProviderError) -> GroundingOutcome {
    GroundingOutcome {
        name: entry.name.trim().to_string(),
        bbox: None,
        stage_log: Vec::new(),
        error: Some(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingReport {
    pub graph: CaptionGraph,
    /// One outcome per object, in object-list order.
    pub outcomes: Vec<GroundingOutcome>,
}

impl GroundingReport {
    pub fn backend_errors(&self) -> usize {
        self.outcomes.iter().filter(|o| o.error.is_some()).count()
    }
}

/// Grounds every object. Provider failures are recorded per object and the
/// remaining objects are still grounded.
///
/// With `assign_same_category`, instances sharing a proposer query get
/// distinct boxes from one joint assignment that maximizes the number of
/// grounded instances and then their summed crop score.
pub fn ground_graph(
    graph: &CaptionGraph,
    image_id: &str,
    providers: &ProviderSet,
    cfg: &GroundingConfig,
) -> GroundingReport {
    let mut outcomes: Vec<Option<GroundingOutcome>> = vec![None; graph.objects.len()];

    if cfg.assign_same_category {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, o) in graph.objects.iter().enumerate() {
            groups.entry(proposer_query(o)).or_default().push(i);
        }
        for (query, members) in groups {
            if members.len() == 1 {
                let o = &graph.objects[members[0]];
                outcomes[members[0]] = Some(
                    ground_object(o, image_id, providers, cfg).unwrap_or_else(|e| failed(o, &e)),
                );
                continue;
            }
            let regions = match candidates(image_id, query, providers, cfg) {
                Ok(r) => r,
                Err(e) => {
                    for &m in &members {
                        outcomes[m] = Some(failed(&graph.objects[m], &e));
                    }
                    continue;
                }
            };
            // Members whose scoring failed sit out of the assignment.
            let mut scored: Vec<(usize, Vec<CandidateLog>)> = Vec::new();
            for &m in &members {
                let o = &graph.objects[m];
                match score_candidates(o, image_id, &regions, providers) {
                    Ok(logs) => scored.push((m, logs)),
                    Err(e) => outcomes[m] = Some(failed(o, &e)),
                }
            }
            let assignment = optimal_assignment(
                scored.len(),
                regions.len(),
                |p, g| scored[p].1[g].crop_score.unwrap_or(f64::NAN),
                |p, g| admissible(&scored[p].1[g], cfg.crop_sim_threshold),
            );
            for (p, (m, mut logs)) in scored.into_iter().enumerate() {
                let chosen = assignment.gt_for_pred(p);
                if let Some(c) = chosen {
                    logs[c].selected = true;
                }
                outcomes[m] = Some(GroundingOutcome {
                    name: graph.objects[m].name.trim().to_string(),
                    bbox: chosen.map(|c| regions[c].bbox),
                    stage_log: logs,
                    error: None,
                });
            }
        }
    } else {
        for (i, o) in graph.objects.iter().enumerate() {
            outcomes[i] =
                Some(ground_object(o, image_id, providers, cfg).unwrap_or_else(|e| failed(o, &e)));
        }
    }

    let outcomes: Vec<GroundingOutcome> = outcomes
        .into_iter()
        .map(|o| o.expect("every object visited"))
        .collect();
    let mut grounded = graph.clone();
    for (obj, out) in grounded.objects.iter_mut().zip(&outcomes) {
        obj.bbox = out.bbox;
    }
    GroundingReport {
        graph: grounded,
        outcomes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::FixtureTable;
    use serde_json::json;

    const B1: [f64; 4] = [0.0, 0.0, 0.4, 0.4];
    const B2: [f64; 4] = [0.5, 0.5, 0.9, 0.9];
    const B3: [f64; 4] = [0.1, 0.5, 0.3, 0.9];

    fn providers(table: serde_json::Value) -> ProviderSet {
        ProviderSet::stub(serde_json::from_value::<FixtureTable>(table).unwrap())
    }

    fn dog() -> ObjectEntry {
        ObjectEntry::new("dog 1", "dog", "a brown dog", "brown")
    }

    fn three_candidates(keep2: bool, scores: [f64; 3]) -> serde_json::Value {
        let judge = |b: [f64; 4], keep: bool| json!({"image_id": "img", "box": b, "name": "dog 1", "keep": keep, "score": 0.5});
        let crop = |b: [f64; 4], s: f64| json!({"image_id": "img", "box": b, "text": "a brown dog", "score": s});
        json!({
            "proposals": [{"image_id": "img", "query": "dog", "regions": [
                {"box": B1, "confidence": 0.9},
                {"box": B2, "confidence": 0.8},
                {"box": B3, "confidence": 0.7}
            ]}],
            "judgements": [judge(B1, true), judge(B2, keep2), judge(B3, true)],
            "crop_scores": [crop(B1, scores[0]), crop(B2, scores[1]), crop(B3, scores[2])]
        })
    }

    #[test]
    fn judge_drop_then_argmax() {
        let p = providers(three_candidates(false, [0.4, 0.99, 0.7]));
        let cfg = GroundingConfig {
            crop_sim_threshold: 0.3,
            ..Default::default()
        };
        let out = ground_object(&dog(), "img", &p, &cfg).unwrap();
        assert_eq!(out.bbox.unwrap().to_array(), B3);
        assert!(out.stage_log[2].selected);
        assert_eq!(out.stage_log[1].crop_score, None);
    }

    #[test]
    fn all_dropped_gives_none() {
        let table = json!({
            "proposals": [{"image_id": "img", "query": "dog", "regions": [{"box": B1, "confidence": 0.9}]}],
            "judgements": [{"image_id": "img", "box": B1, "name": "dog 1", "keep": false, "score": 0.1}]
        });
        let out = ground_object(
            &dog(),
            "img",
            &providers(table),
            &GroundingConfig::default(),
        )
        .unwrap();
        assert_eq!(out.bbox, None);
    }

    #[test]
    fn below_threshold_gives_none() {
        let p = providers(three_candidates(false, [0.4, 0.99, 0.7]));
        let cfg = GroundingConfig {
            crop_sim_threshold: 0.9,
            ..Default::default()
        };
        assert_eq!(ground_object(&dog(), "img", &p, &cfg).unwrap().bbox, None);
    }

    #[test]
    fn ties_prefer_larger_area() {
        // B1 and B2 both 0.16 area; B3 is 0.08. Scores tie across all three.
        let p = providers(three_candidates(true, [0.6, 0.6, 0.6]));
        let out = ground_object(&dog(), "img", &p, &GroundingConfig::default()).unwrap();
        assert_eq!(out.bbox.unwrap().to_array(), B1);
    }

    #[test]
    fn max_candidates_truncates() {
        let p = providers(three_candidates(true, [0.1, 0.2, 0.9]));
        let cfg = GroundingConfig {
            max_candidates: 2,
            crop_sim_threshold: 0.0,
            ..Default::default()
        };
        let out = ground_object(&dog(), "img", &p, &cfg).unwrap();
        assert_eq!(out.stage_log.len(), 2);
        assert_eq!(out.bbox.unwrap().to_array(), B2);
    }

    fn people(matrix: [[f64; 2]; 2]) -> (CaptionGraph, ProviderSet) {
        let descs = ["a man in red", "a woman in blue"];
        let boxes = [B1, B2];
        let mut judgements = vec![];
        let mut crops = vec![];
        for (i, d) in descs.iter().enumerate() {
            for (j, b) in boxes.iter().enumerate() {
                judgements.push(json!({"image_id": "img", "box": b, "name": format!("person {}", i + 1), "keep": true, "score": 0.9}));
                crops.push(json!({"image_id": "img", "box": b, "text": d, "score": matrix[i][j]}));
            }
        }
        let table = json!({
            "proposals": [{"image_id": "img", "query": "person", "regions": [
                {"box": B1, "confidence": 0.9}, {"box": B2, "confidence": 0.8}
            ]}],
            "judgements": judgements,
            "crop_scores": crops
        });
        let graph = CaptionGraph {
            objects: vec![
                ObjectEntry::new("person 1", "person", descs[0], "red"),
                ObjectEntry::new("person 2", "person", descs[1], "blue"),
            ],
            ..Default::default()
        };
        (graph, providers(table))
    }

    #[test]
    fn same_category_assignment() {
        let (g, p) = people([[0.9, 0.2], [0.3, 0.8]]);
        let r = ground_graph(&g, "img", &p, &GroundingConfig::default());
        assert_eq!(r.graph.objects[0].bbox.unwrap().to_array(), B1);
        assert_eq!(r.graph.objects[1].bbox.unwrap().to_array(), B2);
    }

    #[test]
    fn assignment_is_injective_when_both_prefer_one_box() {
        let (g, p) = people([[0.9, 0.5], [0.8, 0.3]]);
        let r = ground_graph(&g, "img", &p, &GroundingConfig::default());
        let b: Vec<_> = r
            .graph
            .objects
            .iter()
            .map(|o| o.bbox.unwrap().to_array())
            .collect();
        assert_ne!(b[0], b[1]);
        // independent grounding picks B1 twice
        let cfg = GroundingConfig {
            assign_same_category: false,
            ..Default::default()
        };
        let r = ground_graph(&g, "img", &p, &cfg);
        assert_eq!(r.graph.objects[0].bbox, r.graph.objects[1].bbox);
    }

    #[test]
    fn single_object_graph_matches_ground_object() {
        let p = providers(three_candidates(false, [0.4, 0.99, 0.7]));
        let g = CaptionGraph {
            objects: vec![dog()],
            ..Default::default()
        };
        let cfg = GroundingConfig::default();
        let r = ground_graph(&g, "img", &p, &cfg);
        assert_eq!(
            r.outcomes[0],
            ground_object(&dog(), "img", &p, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_candidates_and_errors_are_recorded() {
        let table = json!({"images": ["img"]});
        let g = CaptionGraph {
            objects: vec![
                ObjectEntry::new("person 1", "person", "a", "x"),
                ObjectEntry::new("person 2", "person", "b", "y"),
            ],
            ..Default::default()
        };
        let r = ground_graph(
            &g,
            "img",
            &providers(table.clone()),
            &GroundingConfig::default(),
        );
        assert!(r.graph.objects.iter().all(|o| o.bbox.is_none()));
        assert_eq!(r.backend_errors(), 0);

        let r = ground_graph(
            &g,
            "missing",
            &providers(table),
            &GroundingConfig::default(),
        );
        assert_eq!(r.backend_errors(), 2);
        assert!(r.outcomes[0]
            .error
            .as_ref()
            .unwrap()
            .contains("unknown image"));
    }
}
