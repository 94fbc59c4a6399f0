//! Reading command inputs: graphs, eval item files, QA cases.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use capgraph::datasetio::record_from_value;
use capgraph::evalsuite::{CqaCase, Detection, LayoutItem, Triplet};
use capgraph::format::{from_json, parse, serialize, GrammarConfig};
use capgraph::geometry::BBox;
use capgraph::model::{name_head, CaptionGraph};
use capgraph::regionqa::object_region;
use serde_json::Value;

/// Reads a file, or stdin when the path is absent or `-`.
pub fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) if p != Path::new("-") => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
        }
        _ => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .context("reading stdin")?;
            Ok(s)
        }
    }
}

/// A graph in either format: JSON when the text starts with `{`.
pub fn read_graph(path: Option<&PathBuf>, grammar: &GrammarConfig) -> Result<CaptionGraph> {
    let text = read_input(path.map(PathBuf::as_path))?;
    if text.trim_start().starts_with('{') {
        Ok(from_json(&text)?)
    } else {
        Ok(parse(&text, grammar)?)
    }
}

fn json_lines(path: &Path) -> Result<Vec<(usize, Value)>> {
    let text = read_input(Some(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| anyhow!("{at}: missing {key:?}"))
}

fn string(v: &Value, key: &str, at: &str) -> Result<String> {
    field(v, key, at)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| anyhow!("{at}: {key:?} must be a string"))
}

fn array<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Vec<Value>> {
    field(v, key, at)?
        .as_array()
        .ok_or_else(|| anyhow!("{at}: {key:?} must be an array"))
}

fn bbox(v: &Value, key: &str, at: &str) -> Result<BBox> {
    let c: [f64; 4] = serde_json::from_value(field(v, key, at)?.clone())
        .map_err(|_| anyhow!("{at}: {key:?} must be 4 numbers"))?;
    BBox::from_array(c).with_context(|| format!("{at}: {key:?}"))
}

/// Per-image items keyed by `image_id`. A line either holds a dataset
/// record (with `caption`) or the explicit per-task schema.
pub fn load_items<T>(
    path: &Path,
    from_graph: impl Fn(&CaptionGraph) -> T,
    explicit: impl Fn(&Value, &str) -> Result<T>,
) -> Result<Vec<(String, T)>> {
    let mut out: Vec<(String, T)> = Vec::new();
    let mut seen = HashMap::new();
    for (line, v) in json_lines(path)? {
        let at = format!("{}:{line}", path.display());
        let id = string(&v, "image_id", &at)?;
        if let Some(prev) = seen.insert(id.clone(), line) {
            bail!("{at}: image_id {id:?} already used on line {prev}");
        }
        let item = if v.get("caption").is_some() {
            let rec = record_from_value(&v).with_context(|| at.clone())?;
            from_graph(&rec.caption)
        } else {
            explicit(&v, &at)?
        };
        out.push((id, item));
    }
    Ok(out)
}

/// Ground-truth order first, then images that only have predictions.
pub fn pair_items<T: Default>(
    preds: Vec<(String, T)>,
    gts: Vec<(String, T)>,
) -> Vec<(String, T, T)> {
    let mut pred_map: HashMap<String, T> = HashMap::new();
    let mut pred_order = Vec::new();
    for (id, p) in preds {
        pred_order.push(id.clone());
        pred_map.insert(id, p);
    }
    let mut out = Vec::new();
    for (id, g) in gts {
        let p = pred_map.remove(&id).unwrap_or_default();
        out.push((id, p, g));
    }
    for id in pred_order {
        if let Some(p) = pred_map.remove(&id) {
            out.push((id, p, T::default()));
        }
    }
    out
}

pub fn detections_from_graph(g: &CaptionGraph) -> Vec<Detection> {
    g.objects
        .iter()
        .filter_map(|o| {
            object_region(o).map(|b| Detection {
                label: name_head(&o.name).to_string(),
                bbox: b,
                confidence: None,
            })
        })
        .collect()
}

pub fn detections_explicit(v: &Value, at: &str) -> Result<Vec<Detection>> {
    array(v, "detections", at)?
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let at = format!("{at}: detections[{i}]");
            let confidence = match d.get("confidence") {
                None | Some(Value::Null) => None,
                Some(c) => Some(
                    c.as_f64()
                        .ok_or_else(|| anyhow!("{at}: confidence must be a number"))?,
                ),
            };
            Ok(Detection {
                label: string(d, "label", &at)?,
                bbox: bbox(d, "box", &at)?,
                confidence,
            })
        })
        .collect()
}

/// Relationships whose endpoints are both grounded objects.
pub fn triplets_from_graph(g: &CaptionGraph) -> Vec<Triplet> {
    g.relationships
        .iter()
        .filter_map(|r| {
            let s = g.object(&r.subject)?;
            let o = g.object(&r.object)?;
            Some(Triplet {
                subject: name_head(&s.name).to_string(),
                predicate: r.predicate.trim().to_string(),
                object: name_head(&o.name).to_string(),
                subject_box: object_region(s)?,
                object_box: object_region(o)?,
            })
        })
        .collect()
}

pub fn triplets_explicit(v: &Value, at: &str) -> Result<Vec<Triplet>> {
    array(v, "triplets", at)?
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let at = format!("{at}: triplets[{i}]");
            Ok(Triplet {
                subject: string(t, "subject", &at)?,
                predicate: string(t, "predicate", &at)?,
                object: string(t, "object", &at)?,
                subject_box: bbox(t, "subject_box", &at)?,
                object_box: bbox(t, "object_box", &at)?,
            })
        })
        .collect()
}

pub fn layout_from_graph(g: &CaptionGraph) -> Vec<LayoutItem> {
    g.objects
        .iter()
        .filter_map(|o| {
            object_region(o).map(|b| LayoutItem {
                name: name_head(&o.name).to_string(),
                bbox: b,
            })
        })
        .collect()
}

pub fn layout_explicit(v: &Value, at: &str) -> Result<Vec<LayoutItem>> {
    array(v, "items", at)?
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let at = format!("{at}: items[{i}]");
            Ok(LayoutItem {
                name: string(t, "name", &at)?,
                bbox: bbox(t, "box", &at)?,
            })
        })
        .collect()
}

pub fn names_from_graph(g: &CaptionGraph) -> Vec<String> {
    g.objects
        .iter()
        .map(|o| name_head(&o.name).to_string())
        .collect()
}

pub fn names_explicit(v: &Value, at: &str) -> Result<Vec<String>> {
    array(v, "names", at)?
        .iter()
        .map(|n| {
            n.as_str()
                .map(str::to_string)
                .ok_or_else(|| anyhow!("{at}: names must be strings"))
        })
        .collect()
}

/// QA cases; a caption given as a graph object is rendered in the string
/// format before it reaches the QA model.
pub fn load_cases(path: &Path, grammar: &GrammarConfig) -> Result<Vec<CqaCase>> {
    json_lines(path)?
        .into_iter()
        .map(|(line, v)| {
            let at = format!("{}:{line}", path.display());
            let caption = match field(&v, "caption", &at)? {
                Value::String(s) => s.clone(),
                g @ Value::Object(_) => {
                    let graph = capgraph::format::graph_from_value(g, "/caption")
                        .with_context(|| at.clone())?;
                    serialize(&graph, grammar).with_context(|| at.clone())?
                }
                _ => bail!("{at}: caption must be a string or a graph object"),
            };
            let answers = array(&v, "answers", &at)?
                .iter()
                .map(|a| {
                    a.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| anyhow!("{at}: answers must be strings"))
                })
                .collect::<Result<_>>()?;
            Ok(CqaCase {
                caption,
                question: string(&v, "question", &at)?,
                answers,
            })
        })
        .collect()
}

pub fn load_regions(path: &Path) -> Result<Vec<BBox>> {
    let text = read_input(Some(path))?;
    let raw: Vec<[f64; 4]> = serde_json::from_str(&text)
        .with_context(|| format!("{}: expected a JSON array of boxes", path.display()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, c)| {
            BBox::from_array(c).with_context(|| format!("{}: region {i}", path.display()))
        })
        .collect()
}
