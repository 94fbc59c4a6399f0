//! Structured image captions: a three-part caption graph (overall
//! description, object list, relationships), its string and JSON formats,
//! region grounding, evaluation metrics, region QA and frame diffs.
//!
//! Model backends sit behind the traits in [`providers`]; the built-in
//! stub and fixture providers make everything here deterministic.

pub mod consistency;
pub mod datasetio;
pub mod evalsuite;
pub mod format;
pub mod geometry;
pub mod grounding;
pub mod model;
pub mod providers;
pub mod regionqa;
pub mod videodiff;

pub use format::{from_json, parse, serialize, to_json, GrammarConfig, ParseError, ParseErrorKind};
pub use model::{CaptionGraph, ObjectEntry, OverallSection, RelationTriplet};
