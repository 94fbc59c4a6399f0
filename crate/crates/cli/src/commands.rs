use std::io::{BufReader, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use capgraph::consistency::{set_score, ConsistencyConfig};
use capgraph::datasetio::{collect_records, RecordReader, StatsTally};
use capgraph::evalsuite::{
    cqa_item, layout_item, merge, objects_item, ovd_item, sgg_item, CqaMode, EvalKind, ItemResult,
    OvdConfig, SggConfig,
};
use capgraph::format::{
    build_instruction_prompt, from_json, parse, serialize, to_json, PromptError,
};
use capgraph::grounding::{ground_graph, GroundingConfig};
use capgraph::model::{renumber_graph, validate};
use capgraph::providers::{FixtureTable, HttpProvider, ProviderSet};
use capgraph::regionqa::{pointing_select, region_description, RegionQuery};
use capgraph::videodiff::{
    diff_captions, frame_from_value, merge_track_ids, render_ansi, render_html,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::value::RawValue;

use crate::config::{Config, ProviderKind};
use crate::inputs::{self, read_graph, read_input};
use crate::{BackendFailure, Cli, Cmd, CqaModeArg, DiffFormat, EvalCmd, RegionCmd, UsageError};

/// Every report carries the effective configuration first.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a Config,
    #[serde(flatten)]
    body: T,
}

fn emit_report<T: Serialize>(out: &mut dyn Write, config: &Config, body: T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Report { config, body })?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn raw(json: String) -> Result<Box<RawValue>> {
    Ok(RawValue::from_string(json)?)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn set(slot: &mut f64, value: Option<f64>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => Config::default(),
    };
    match (cli.provider, &cli.endpoint) {
        (Some(ProviderKind::Stub), _) => {
            config.provider.kind = ProviderKind::Stub;
            config.provider.endpoint = None;
        }
        (Some(ProviderKind::Http), _) | (None, Some(_)) => {
            config.provider.kind = ProviderKind::Http
        }
        (None, None) => {}
    }
    if let Some(e) = &cli.endpoint {
        config.provider.endpoint = Some(e.clone());
    }
    if let Some(f) = &cli.fixtures {
        config.provider.fixture_path = Some(f.clone());
    }

    let t = &mut config.thresholds;
    match &cli.cmd {
        Cmd::Ground { tau_crop, .. } => set(&mut t.tau_crop, *tau_crop),
        Cmd::Consistency { rho, .. } => set(&mut t.rho, *rho),
        Cmd::Diff {
            rho_stable,
            tau_mask,
            ..
        } => {
            set(&mut t.rho_stable, *rho_stable);
            set(&mut t.tau_mask, *tau_mask);
        }
        Cmd::Regionqa(RegionCmd::Point { iou_min, .. }) => set(&mut t.tau_iou_region, *iou_min),
        Cmd::Eval(EvalCmd::Ovd {
            tau_sim, tau_iou, ..
        }) => {
            set(&mut t.tau_sim_ovd, *tau_sim);
            set(&mut t.tau_iou_ovd, *tau_iou);
        }
        Cmd::Eval(EvalCmd::Sgg {
            tau_sim, tau_iou, ..
        }) => {
            set(&mut t.tau_sim_sgg, *tau_sim);
            set(&mut t.tau_iou_sgg, *tau_iou);
        }
        Cmd::Eval(EvalCmd::Layout { tau_name, .. } | EvalCmd::Objects { tau_name, .. }) => {
            set(&mut t.tau_name, *tau_name)
        }
        _ => {}
    }
    config.check().map_err(|e| usage(format!("{e:#}")))?;
    Ok(config)
}

fn providers(config: &Config) -> Result<ProviderSet> {
    match config.provider.kind {
        ProviderKind::Stub => {
            let table = match &config.provider.fixture_path {
                Some(p) => FixtureTable::load(p)
                    .with_context(|| format!("loading fixtures {}", p.display()))?,
                None => FixtureTable::default(),
            };
            Ok(ProviderSet::stub(table))
        }
        ProviderKind::Http => {
            let endpoint = config.provider.endpoint.as_deref().unwrap_or_default();
            let client = HttpProvider::connect(
                endpoint,
                config.provider.retries,
                Duration::from_millis(config.provider.timeout_ms),
            )?;
            Ok(ProviderSet::http(client))
        }
    }
}

/// Maps items on `jobs` threads; results keep input order.
fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| items.par_iter().map(f).collect())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config = build_config(&cli)?;
    let grammar = &config.grammar;
    let jobs = cli.jobs.get();
    match &cli.cmd {
        Cmd::Parse { input } => {
            let text = read_input(input.as_deref())?;
            writeln!(out, "{}", to_json(&parse(&text, grammar)?))?;
        }
        Cmd::Serialize { input } => {
            let graph = from_json(&read_input(input.as_deref())?)?;
            writeln!(out, "{}", serialize(&graph, grammar)?)?;
        }
        Cmd::Json { input } => {
            let graph = from_json(&read_input(input.as_deref())?)?;
            writeln!(out, "{}", to_json(&graph))?;
        }
        Cmd::Validate { input } => {
            let report = validate(&read_graph(input.as_ref(), grammar)?);
            #[derive(Serialize)]
            struct Body<'a> {
                ok: bool,
                violations: &'a [capgraph::model::Violation],
            }
            let ok = !report.has_errors();
            let text = serde_json::to_string_pretty(&Body {
                ok,
                violations: &report.violations,
            })?;
            writeln!(out, "{text}")?;
            if !ok {
                let n = report
                    .violations
                    .iter()
                    .filter(|v| v.severity == capgraph::model::Severity::Error)
                    .count();
                bail!("validation found {n} error(s)");
            }
        }
        Cmd::Prompt { slots } => {
            let text = build_instruction_prompt(grammar, slots).map_err(|e| match e {
                PromptError::UnknownSlot(_) => usage(e.to_string()),
            })?;
            write!(out, "{text}")?;
        }
        Cmd::Ground {
            input,
            image,
            trace,
            independent,
            ..
        } => {
            let graph = read_graph(input.as_ref(), grammar)?;
            let set = providers(&config)?;
            let cfg = GroundingConfig {
                crop_sim_threshold: config.thresholds.tau_crop,
                assign_same_category: !independent,
                ..GroundingConfig::default()
            };
            let report = ground_graph(&graph, image, &set, &cfg);
            if *trace {
                #[derive(Serialize)]
                struct Body<'a> {
                    grounding: &'a GroundingConfig,
                    graph: Box<RawValue>,
                    outcomes: &'a [capgraph::grounding::GroundingOutcome],
                }
                emit_report(
                    out,
                    &config,
                    Body {
                        grounding: &cfg,
                        graph: raw(to_json(&report.graph))?,
                        outcomes: &report.outcomes,
                    },
                )?;
            } else {
                writeln!(out, "{}", to_json(&report.graph))?;
            }
            if let Some(o) = report.outcomes.iter().find(|o| o.error.is_some()) {
                return Err(anyhow::Error::new(BackendFailure(format!(
                    "{} object(s) could not be grounded; first: {}: {}",
                    report.backend_errors(),
                    o.name,
                    o.error.as_deref().unwrap_or_default()
                ))));
            }
        }
        Cmd::Consistency {
            input,
            raw: raw_mode,
            ..
        } => {
            let text = read_input(input.as_deref())?;
            let answers: Vec<String> =
                serde_json::from_str(&text).context("expected a JSON array of answer strings")?;
            let set = providers(&config)?;
            let cfg = ConsistencyConfig {
                rho: config.thresholds.rho,
                normalize: !raw_mode,
            };
            let score = set_score(&answers, set.text_embedder.as_ref(), &cfg)?;
            #[derive(Serialize)]
            struct Body {
                normalize: bool,
                answers: usize,
                #[serde(flatten)]
                score: capgraph::consistency::SetScore,
            }
            emit_report(
                out,
                &config,
                Body {
                    normalize: cfg.normalize,
                    answers: answers.len(),
                    score,
                },
            )?;
        }
        Cmd::Diff {
            frames,
            format,
            keep_ids,
            ..
        } => {
            let text = read_input(Some(frames))?;
            let mut parsed = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let at = format!("{}:{}", frames.display(), i + 1);
                let v: serde_json::Value =
                    serde_json::from_str(line).with_context(|| format!("{at}: invalid JSON"))?;
                parsed.push(frame_from_value(&v, "").with_context(|| at.clone())?);
            }
            let tracked = if *keep_ids {
                parsed
            } else {
                merge_track_ids(&parsed, config.thresholds.tau_mask)?
            };
            let set = providers(&config)?;
            let pairs: Vec<usize> = (1..tracked.len()).collect();
            let reports = par_map(jobs, &pairs, |&i| {
                Ok(diff_captions(
                    &tracked[i - 1],
                    &tracked[i],
                    set.text_embedder.as_ref(),
                    config.thresholds.rho_stable,
                )?)
            })?;
            match format {
                DiffFormat::Json => {
                    #[derive(Serialize)]
                    struct Tracks<'a> {
                        frame_index: u64,
                        track_ids: &'a std::collections::BTreeMap<String, u64>,
                    }
                    #[derive(Serialize)]
                    struct Body<'a> {
                        tracks: Vec<Tracks<'a>>,
                        diffs: &'a [capgraph::videodiff::DiffReport],
                    }
                    let tracks = tracked
                        .iter()
                        .map(|f| Tracks {
                            frame_index: f.frame_index,
                            track_ids: &f.track_ids,
                        })
                        .collect();
                    emit_report(
                        out,
                        &config,
                        Body {
                            tracks,
                            diffs: &reports,
                        },
                    )?;
                }
                DiffFormat::Ansi => {
                    for r in &reports {
                        write!(out, "{}", render_ansi(r))?;
                    }
                }
                DiffFormat::Html => {
                    writeln!(out, "<!DOCTYPE html>\n<html><body>")?;
                    for r in &reports {
                        write!(out, "{}", render_html(r))?;
                    }
                    writeln!(out, "</body></html>")?;
                }
            }
        }
        Cmd::Stats { input, top, text } => {
            let data = read_input(input.as_deref())?;
            let summary = collect_records(RecordReader::new(BufReader::new(data.as_bytes())))?;
            let chunk = summary.records.len().div_ceil(jobs).max(1);
            let chunks: Vec<&[capgraph::datasetio::DatasetRecord]> =
                summary.records.chunks(chunk).collect();
            let tallies = par_map(jobs, &chunks, |c| {
                let mut t = StatsTally::default();
                for r in c.iter() {
                    t.add(r);
                }
                Ok(t)
            })?;
            let stats = tallies
                .into_iter()
                .fold(StatsTally::default(), StatsTally::merge)
                .finish(*top);
            if *text {
                write!(out, "{stats}")?;
                for e in &summary.errors {
                    writeln!(out, "error: {e}")?;
                }
            } else {
                #[derive(Serialize)]
                struct LineErr<'a> {
                    line: usize,
                    pointer: &'a str,
                    detail: &'a str,
                }
                #[derive(Serialize)]
                struct Body<'a> {
                    #[serde(flatten)]
                    stats: &'a capgraph::datasetio::CorpusStats,
                    errors: Vec<LineErr<'a>>,
                }
                let errors = summary
                    .errors
                    .iter()
                    .map(|e| LineErr {
                        line: e.line,
                        pointer: &e.error.pointer,
                        detail: &e.error.detail,
                    })
                    .collect();
                emit_report(
                    out,
                    &config,
                    Body {
                        stats: &stats,
                        errors,
                    },
                )?;
            }
            if let Some(first) = summary.errors.into_iter().next() {
                return Err(anyhow::Error::new(first).context("dataset has malformed lines"));
            }
        }
        Cmd::Renumber { input } => {
            let graph = read_graph(input.as_ref(), grammar)?;
            writeln!(out, "{}", to_json(&renumber_graph(&graph)))?;
        }
        Cmd::Regionqa(RegionCmd::Point { input, bbox, .. }) => {
            let graph = read_graph(input.as_ref(), grammar)?;
            let q = RegionQuery::new(*bbox, config.thresholds.tau_iou_region)?;
            let d = region_description(&graph, &q);
            if !d.ungrounded.is_empty() {
                eprintln!(
                    "warning: skipped ungrounded objects: {}",
                    d.ungrounded.join(", ")
                );
            }
            #[derive(Serialize)]
            struct Body {
                target: [f64; 4],
                #[serde(flatten)]
                description: capgraph::regionqa::RegionDescription,
            }
            emit_report(
                out,
                &config,
                Body {
                    target: bbox.to_array(),
                    description: d,
                },
            )?;
        }
        Cmd::Regionqa(RegionCmd::Pointing {
            input,
            regions,
            question,
        }) => {
            let graph = read_graph(input.as_ref(), grammar)?;
            let regions = inputs::load_regions(regions)?;
            let set = providers(&config)?;
            let r = pointing_select(&graph, question, &regions, set.text_embedder.as_ref())?;
            #[derive(Serialize)]
            struct Body<'a> {
                question: &'a str,
                #[serde(flatten)]
                result: capgraph::regionqa::PointingResult,
            }
            emit_report(
                out,
                &config,
                Body {
                    question,
                    result: r,
                },
            )?;
        }
        Cmd::Eval(cmd) => {
            let report = run_eval(cmd, &config, jobs)?;
            emit_report(out, &config, report)?;
        }
    }
    Ok(())
}

fn load<T: Default>(
    pred: &Path,
    gt: &Path,
    from_graph: fn(&capgraph::model::CaptionGraph) -> T,
    explicit: fn(&serde_json::Value, &str) -> Result<T>,
) -> Result<Vec<(String, T, T)>> {
    Ok(inputs::pair_items(
        inputs::load_items(pred, from_graph, explicit)?,
        inputs::load_items(gt, from_graph, explicit)?,
    ))
}

fn run_eval(
    cmd: &EvalCmd,
    config: &Config,
    jobs: usize,
) -> Result<capgraph::evalsuite::EvalReport> {
    let t = &config.thresholds;
    let set = providers(config)?;
    let embedder = set.text_embedder.as_ref();
    let (kind, items): (EvalKind, Vec<ItemResult>) = match cmd {
        EvalCmd::Ovd { pred, gt, .. } => {
            let cfg = OvdConfig {
                tau_sim: t.tau_sim_ovd,
                tau_iou: t.tau_iou_ovd,
            };
            let items = load(
                pred,
                gt,
                inputs::detections_from_graph,
                inputs::detections_explicit,
            )?;
            (
                EvalKind::Ovd,
                par_map(jobs, &items, |(id, p, g)| {
                    Ok(ovd_item(id.clone(), p, g, embedder, &cfg)?)
                })?,
            )
        }
        EvalCmd::Sgg { pred, gt, .. } => {
            let cfg = SggConfig {
                tau_sim: t.tau_sim_sgg,
                tau_iou: t.tau_iou_sgg,
            };
            let items = load(
                pred,
                gt,
                inputs::triplets_from_graph,
                inputs::triplets_explicit,
            )?;
            (
                EvalKind::Sgg,
                par_map(jobs, &items, |(id, p, g)| {
                    Ok(sgg_item(id.clone(), p, g, embedder, &cfg)?)
                })?,
            )
        }
        EvalCmd::Layout { pred, gt, .. } => {
            let items = load(pred, gt, inputs::layout_from_graph, inputs::layout_explicit)?;
            (
                EvalKind::Layout,
                par_map(jobs, &items, |(id, p, g)| {
                    Ok(layout_item(id.clone(), p, g, embedder, t.tau_name)?)
                })?,
            )
        }
        EvalCmd::Objects { pred, gt, .. } => {
            let items = load(pred, gt, inputs::names_from_graph, inputs::names_explicit)?;
            (
                EvalKind::Objects,
                par_map(jobs, &items, |(id, p, g)| {
                    Ok(objects_item(id.clone(), p, g, embedder, t.tau_name)?)
                })?,
            )
        }
        EvalCmd::Cqa { cases, mode } => {
            let cases = inputs::load_cases(cases, &config.grammar)?;
            if cases.is_empty() {
                bail!("no cases to evaluate");
            }
            let mode = match mode {
                CqaModeArg::Exact => CqaMode::Exact,
                CqaModeArg::Vqa => CqaMode::Vqa,
            };
            let indexed: Vec<(usize, &capgraph::evalsuite::CqaCase)> =
                cases.iter().enumerate().collect();
            let qa = set.qa_model.as_ref();
            (
                EvalKind::Cqa,
                par_map(jobs, &indexed, |(i, c)| Ok(cqa_item(*i, c, qa, mode)?))?,
            )
        }
    };
    if items.is_empty() && kind != EvalKind::Cqa {
        return Err(anyhow!("no items to evaluate"));
    }
    Ok(merge(kind, items))
}
