//! `capgraph`: structured caption tooling on the command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error, 3 backend
//! unavailable.

mod commands;
mod config;
mod inputs;

use std::error::Error as StdError;
use std::fmt;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use capgraph::consistency::ConsistencyError;
use capgraph::datasetio::LineError;
use capgraph::evalsuite::EvalError;
use capgraph::format::{ParseError, SchemaError};
use capgraph::geometry::BBox;
use capgraph::providers::ProviderError;
use capgraph::regionqa::RegionQaError;
use capgraph::videodiff::VideoError;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::ProviderKind;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (grammar template 1.0.0)");

#[derive(Debug, Parser)]
#[command(name = "capgraph", version = VERSION, about = "Structured image caption toolkit")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Sidecar base URL, required with `--provider http`.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Fixture table for the stub provider.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Worker threads for per-item work. Output order never depends on it.
    #[arg(long, global = true, default_value = "1")]
    pub jobs: NonZeroUsize,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// String format to canonical JSON.
    Parse { input: Option<PathBuf> },
    /// JSON to the string format.
    Serialize { input: Option<PathBuf> },
    /// Canonicalize graph JSON.
    Json { input: Option<PathBuf> },
    /// Structural checks; exits 1 when any error-level violation is found.
    Validate { input: Option<PathBuf> },
    /// Print the instruction prompt for caption generation.
    Prompt {
        /// Override an example slot, `name=text`.
        #[arg(long = "slot", value_parser = parse_slot)]
        slots: Vec<(String, String)>,
    },
    /// Attach boxes to caption objects.
    Ground {
        input: Option<PathBuf>,
        #[arg(long)]
        image: String,
        /// Emit per-candidate logs alongside the graph.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        tau_crop: Option<f64>,
        /// Ground each object on its own instead of jointly per category.
        #[arg(long)]
        independent: bool,
    },
    /// Consistency score of a JSON array of answers.
    Consistency {
        input: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        /// Use raw counts instead of per-answer fractions.
        #[arg(long)]
        raw: bool,
    },
    /// Diff consecutive frames of a frames JSONL file.
    Diff {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: DiffFormat,
        /// Keep the track ids given in the file instead of merging by overlap.
        #[arg(long)]
        keep_ids: bool,
        #[arg(long)]
        rho_stable: Option<f64>,
        #[arg(long)]
        tau_mask: Option<f64>,
    },
    /// Corpus statistics of a dataset JSONL file.
    Stats {
        input: Option<PathBuf>,
        #[arg(long, default_value = "10")]
        top: NonZeroUsize,
        /// Plain-text table instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Rename objects to "<category> <k>" and rewrite references.
    Renumber { input: Option<PathBuf> },
    /// Region-based question answering helpers.
    #[command(subcommand)]
    Regionqa(RegionCmd),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum RegionCmd {
    /// Describe a target region from the grounded objects overlapping it.
    Point {
        input: Option<PathBuf>,
        #[arg(long = "box", value_parser = parse_box)]
        bbox: BBox,
        #[arg(long)]
        iou_min: Option<f64>,
    },
    /// Choose the candidate region that best fits a question.
    Pointing {
        input: Option<PathBuf>,
        /// JSON array of boxes.
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        question: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Open-vocabulary detection: recall, mIoU and AP50 when confidences are present.
    Ovd {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tau_sim: Option<f64>,
        #[arg(long)]
        tau_iou: Option<f64>,
    },
    /// Scene-graph triplet recall.
    Sgg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tau_sim: Option<f64>,
        #[arg(long)]
        tau_iou: Option<f64>,
    },
    /// Named-box layout precision and recall.
    Layout {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tau_name: Option<f64>,
    },
    /// Object-name precision and recall.
    Objects {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tau_name: Option<f64>,
    },
    /// Question answering from captions.
    Cqa {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        mode: CqaModeArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiffFormat {
    Ansi,
    Html,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CqaModeArg {
    Exact,
    Vqa,
}

fn parse_slot(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected name=text, got {s:?}"))
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let c: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let c: [f64; 4] = c
        .try_into()
        .map_err(|_| "expected x1,y1,x2,y2".to_string())?;
    BBox::from_array(c).map_err(|e| e.to_string())
}

/// Bad flag combinations or values that clap cannot check on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl StdError for UsageError {}

/// A command finished but some work hit an unavailable backend.
#[derive(Debug)]
pub struct BackendFailure(pub String);

impl fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl StdError for BackendFailure {}

fn is_backend(e: &(dyn StdError + 'static)) -> bool {
    e.is::<ProviderError>()
        || e.is::<BackendFailure>()
        || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::Provider(_)))
        || matches!(
            e.downcast_ref::<ConsistencyError>(),
            Some(ConsistencyError::Provider(_))
        )
        || matches!(
            e.downcast_ref::<RegionQaError>(),
            Some(RegionQaError::Provider(_))
        )
        || matches!(
            e.downcast_ref::<VideoError>(),
            Some(VideoError::Provider(_))
        )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(is_backend) {
        3
    } else if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

fn error_json(err: &anyhow::Error, code: u8) -> serde_json::Value {
    let mut body = json!({ "code": code, "message": format!("{err:#}") });
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<ParseError>() {
            body["kind"] = json!(p.kind.to_string());
            body["line"] = json!(p.line);
            break;
        }
        if let Some(l) = cause.downcast_ref::<LineError>() {
            body["kind"] = json!("SchemaError");
            body["line"] = json!(l.line);
            body["pointer"] = json!(l.error.pointer);
            break;
        }
        if let Some(s) = cause.downcast_ref::<SchemaError>() {
            body["kind"] = json!("SchemaError");
            body["pointer"] = json!(s.pointer);
            break;
        }
    }
    json!({ "error": body })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json_errors = cli.json_errors;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match commands::run(cli, &mut out) {
        Ok(()) => {
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(err) => {
            let _ = out.flush();
            let code = exit_code(&err);
            if json_errors {
                eprintln!("{}", error_json(&err, code));
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}
