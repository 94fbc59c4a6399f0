//! Model backends behind small traits.
//!
//! Everything learned (text embedding, region proposal, region judging,
//! crop scoring, question answering) is reached through these handles.
//! Two families ship here: deterministic stubs for offline use and an HTTP
//! client for the sidecar wire protocol.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub type ProviderResult<T> = Result<T, ProviderError>;

/// A text or region embedding. Unit-norm, or all zeros for empty input.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalizes `values`; an all-zero input stays all-zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity. Zero vectors score 0; identical non-zero vectors
/// score exactly 1.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    if a.is_zero() || b.is_zero() || a.dim() != b.dim() {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Embedding>>;

    fn embed_one(&self, text: &str) -> ProviderResult<Embedding> {
        let mut v = self.embed(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| ProviderError::Protocol("embedder returned no vector".into()))
    }
}

/// Cosine similarity between two texts under `embedder`.
pub fn text_similarity(embedder: &dyn TextEmbedder, a: &str, b: &str) -> ProviderResult<f64> {
    let v = embedder.embed(&[a.to_string(), b.to_string()])?;
    Ok(cosine(&v[0], &v[1]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposedRegion {
    pub bbox: BBox,
    pub detector_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub keep: bool,
    pub score: f64,
}

pub trait RegionProposer: Send + Sync {
    /// Candidate regions for `query`, sorted by confidence, highest first.
    fn propose_regions(&self, image_id: &str, query: &str) -> ProviderResult<Vec<ProposedRegion>>;
}

pub trait RegionJudge: Send + Sync {
    fn judge_region(&self, image_id: &str, bbox: &BBox, name: &str) -> ProviderResult<Judgement>;
}

pub trait CropScorer: Send + Sync {
    fn score_crop(&self, image_id: &str, bbox: &BBox, description: &str) -> ProviderResult<f64>;
}

pub trait QaModel: Send + Sync {
    fn answer(&self, context: &str, question: &str) -> ProviderResult<String>;
}

/// One handle per model role.
#[derive(Clone)]
pub struct ProviderSet {
    pub text_embedder: Arc<dyn TextEmbedder>,
    pub crop_scorer: Arc<dyn CropScorer>,
    pub region_proposer: Arc<dyn RegionProposer>,
    pub region_judge: Arc<dyn RegionJudge>,
    pub qa_model: Arc<dyn QaModel>,
}

impl ProviderSet {
    /// Hashed bag-of-words embedder plus fixture-table stubs.
    pub fn stub(fixtures: FixtureTable) -> Self {
        let fixtures = Arc::new(FixtureProvider::new(fixtures));
        Self {
            text_embedder: Arc::new(HashedBowEmbedder::default()),
            crop_scorer: fixtures.clone(),
            region_proposer: fixtures.clone(),
            region_judge: fixtures.clone(),
            qa_model: fixtures,
        }
    }

    pub fn http(client: HttpProvider) -> Self {
        let client = Arc::new(client);
        Self {
            text_embedder: client.clone(),
            crop_scorer: client.clone(),
            region_proposer: client.clone(),
            region_judge: client.clone(),
            qa_model: client,
        }
    }
}

pub const STUB_DIM: usize = 256;

/// Deterministic bag-of-words embedder: lowercase, split on
/// non-alphanumerics, FNV-1a each token into 256 buckets, count,
/// L2-normalize.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedBowEmbedder;

impl HashedBowEmbedder {
    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }

    pub fn bucket(token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % STUB_DIM as u64) as usize
    }

    pub fn vector(text: &str) -> Embedding {
        let mut counts = vec![0f64; STUB_DIM];
        for t in Self::tokens(text) {
            counts[Self::bucket(&t)] += 1.0;
        }
        Embedding::normalized(counts)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl TextEmbedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        STUB_DIM
    }

    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Embedding>> {
        Ok(texts.iter().map(|t| Self::vector(t)).collect())
    }
}

// ---------------------------------------------------------------------------
// Fixture-driven stubs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureTable {
    /// Images that exist even without proposals.
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub proposals: Vec<ProposalFixture>,
    #[serde(default)]
    pub judgements: Vec<JudgementFixture>,
    #[serde(default)]
    pub crop_scores: Vec<CropScoreFixture>,
    #[serde(default)]
    pub answers: Vec<AnswerFixture>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalFixture {
    pub image_id: String,
    pub query: String,
    pub regions: Vec<RegionFixture>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFixture {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgementFixture {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub name: String,
    pub keep: bool,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropScoreFixture {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerFixture {
    /// When absent the answer applies to any non-empty context.
    #[serde(default)]
    pub context: Option<String>,
    pub question: String,
    pub answer: String,
}

impl FixtureTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            ProviderError::BackendUnavailable(format!(
                "cannot read fixtures {}: {e}",
                path.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            ProviderError::Protocol(format!("bad fixture file {}: {e}", path.display()))
        })
    }
}

/// Boxes are keyed at four decimals, the precision of the JSON formats.
fn box_key(c: &[f64; 4]) -> String {
    format!("{:.4},{:.4},{:.4},{:.4}", c[0], c[1], c[2], c[3])
}

#[derive(Debug, Default)]
pub struct FixtureProvider {
    images: std::collections::HashSet<String>,
    proposals: HashMap<(String, String), Vec<ProposedRegion>>,
    judgements: HashMap<(String, String, String), Judgement>,
    crop_scores: HashMap<(String, String, String), f64>,
    answers: HashMap<(Option<String>, String), String>,
}

impl FixtureProvider {
    pub fn new(table: FixtureTable) -> Self {
        let mut p = FixtureProvider::default();
        p.images.extend(table.images);
        for f in table.proposals {
            p.images.insert(f.image_id.clone());
            // Invalid fixture boxes are dropped rather than served.
            let mut regions: Vec<ProposedRegion> = f
                .regions
                .iter()
                .filter_map(|r| {
                    BBox::from_array(r.bbox).ok().map(|bbox| ProposedRegion {
                        bbox,
                        detector_confidence: r.confidence.clamp(0.0, 1.0),
                    })
                })
                .collect();
            regions.sort_by(|a, b| b.detector_confidence.total_cmp(&a.detector_confidence));
            p.proposals.insert((f.image_id, f.query), regions);
        }
        for f in table.judgements {
            p.images.insert(f.image_id.clone());
            p.judgements.insert(
                (f.image_id, box_key(&f.bbox), f.name),
                Judgement {
                    keep: f.keep,
                    score: f.score,
                },
            );
        }
        for f in table.crop_scores {
            p.images.insert(f.image_id.clone());
            p.crop_scores.insert(
                (f.image_id, box_key(&f.bbox), f.text),
                f.score.clamp(0.0, 1.0),
            );
        }
        for f in table.answers {
            p.answers.insert((f.context, f.question), f.answer);
        }
        p
    }

    fn check_image(&self, image_id: &str) -> ProviderResult<()> {
        if self.images.contains(image_id) {
            Ok(())
        } else {
            Err(ProviderError::BackendUnavailable(format!(
                "unknown image id {image_id:?}"
            )))
        }
    }
}

impl RegionProposer for FixtureProvider {
    fn propose_regions(&self, image_id: &str, query: &str) -> ProviderResult<Vec<ProposedRegion>> {
        self.check_image(image_id)?;
        Ok(self
            .proposals
            .get(&(image_id.to_string(), query.to_string()))
            .cloned()
            .unwrap_or_default())
    }
}

impl RegionJudge for FixtureProvider {
    fn judge_region(&self, image_id: &str, bbox: &BBox, name: &str) -> ProviderResult<Judgement> {
        self.judgements
            .get(&(
                image_id.to_string(),
                box_key(&bbox.to_array()),
                name.to_string(),
            ))
            .copied()
            .ok_or_else(|| {
                ProviderError::BackendUnavailable(format!(
                    "no judgement fixture for {image_id} {bbox} {name:?}"
                ))
            })
    }
}

impl CropScorer for FixtureProvider {
    fn score_crop(&self, image_id: &str, bbox: &BBox, description: &str) -> ProviderResult<f64> {
        self.crop_scores
            .get(&(
                image_id.to_string(),
                box_key(&bbox.to_array()),
                description.to_string(),
            ))
            .copied()
            .ok_or_else(|| {
                ProviderError::BackendUnavailable(format!(
                    "no crop-score fixture for {image_id} {bbox} {description:?}"
                ))
            })
    }
}

impl QaModel for FixtureProvider {
    fn answer(&self, context: &str, question: &str) -> ProviderResult<String> {
        if context.trim().is_empty() {
            return Ok("unknown".to_string());
        }
        self.answers
            .get(&(Some(context.to_string()), question.to_string()))
            .or_else(|| self.answers.get(&(None, question.to_string())))
            .cloned()
            .ok_or_else(|| {
                ProviderError::BackendUnavailable(format!("no answer fixture for {question:?}"))
            })
    }
}

// ---------------------------------------------------------------------------
// HTTP sidecar client
// ---------------------------------------------------------------------------

/// Blocking client for the sidecar JSON protocol. All endpoints are
/// read-only, so failed calls are retried a bounded number of times.
pub struct HttpProvider {
    base: String,
    agent: ureq::Agent,
    retries: u32,
    dim: usize,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("base", &self.base)
            .field("retries", &self.retries)
            .field("dim", &self.dim)
            .finish()
    }
}

impl HttpProvider {
    /// Connects and performs the `/v1/health` handshake, which fixes the
    /// embedding dimension for the lifetime of the client.
    pub fn connect(endpoint: &str, retries: u32, timeout: Duration) -> ProviderResult<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
            retries,
            dim: 0,
        };
        let health = client.call("/v1/health", None)?;
        if health.get("ok") != Some(&Value::Bool(true)) {
            return Err(ProviderError::BackendUnavailable(
                "sidecar health check did not report ok".into(),
            ));
        }
        client.dim = health
            .get("dim")
            .and_then(Value::as_u64)
            .filter(|&d| d > 0)
            .ok_or_else(|| ProviderError::Protocol("health response lacks a positive dim".into()))?
            as usize;
        Ok(client)
    }

    fn call(&self, path: &str, body: Option<&Value>) -> ProviderResult<Value> {
        let url = format!("{}{}", self.base, path);
        let mut last_err = String::new();
        for _ in 0..=self.retries {
            let result = match body {
                Some(b) => self
                    .agent
                    .post(&url)
                    .header("Content-Type", "application/json")
                    .send(b.to_string().as_bytes()),
                None => self.agent.get(&url).call(),
            };
            match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| ProviderError::Protocol(format!("{path}: {e}")))?;
                    if status == 200 {
                        return serde_json::from_str(&text).map_err(|e| {
                            ProviderError::Protocol(format!("{path}: invalid JSON response: {e}"))
                        });
                    }
                    if (400..500).contains(&status) {
                        return Err(ProviderError::BackendUnavailable(format!(
                            "{path}: rejected with status {status}: {text}"
                        )));
                    }
                    last_err = format!("{path}: status {status}");
                }
                Err(e) => last_err = format!("{path}: {e}"),
            }
        }
        Err(ProviderError::BackendUnavailable(last_err))
    }

    fn field<'a>(v: &'a Value, key: &str, path: &str) -> ProviderResult<&'a Value> {
        v.get(key)
            .ok_or_else(|| ProviderError::Protocol(format!("{path}: missing field {key:?}")))
    }

    fn finite(v: &Value, what: &str) -> ProviderResult<f64> {
        v.as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| ProviderError::Protocol(format!("{what} is not a finite number")))
    }
}

impl TextEmbedder for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Embedding>> {
        let resp = self.call("/v1/embed", Some(&json!({ "texts": texts })))?;
        let dim = Self::field(&resp, "dim", "/v1/embed")?
            .as_u64()
            .ok_or_else(|| ProviderError::Protocol("/v1/embed: dim is not an integer".into()))?
            as usize;
        if dim != self.dim {
            return Err(ProviderError::DimensionMismatch {
                expected: self.dim,
                got: dim,
            });
        }
        let vectors = Self::field(&resp, "vectors", "/v1/embed")?
            .as_array()
            .ok_or_else(|| ProviderError::Protocol("/v1/embed: vectors is not an array".into()))?;
        if vectors.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "/v1/embed: {} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        vectors
            .iter()
            .map(|v| {
                let values = v
                    .as_array()
                    .ok_or_else(|| {
                        ProviderError::Protocol("/v1/embed: vector is not an array".into())
                    })?
                    .iter()
                    .map(|x| Self::finite(x, "embedding component"))
                    .collect::<ProviderResult<Vec<f64>>>()?;
                if values.len() != self.dim {
                    return Err(ProviderError::DimensionMismatch {
                        expected: self.dim,
                        got: values.len(),
                    });
                }
                Ok(Embedding::normalized(values))
            })
            .collect()
    }
}

impl RegionProposer for HttpProvider {
    fn propose_regions(&self, image_id: &str, query: &str) -> ProviderResult<Vec<ProposedRegion>> {
        let resp = self.call(
            "/v1/propose",
            Some(&json!({ "image_id": image_id, "query": query })),
        )?;
        let regions = Self::field(&resp, "regions", "/v1/propose")?
            .as_array()
            .ok_or_else(|| {
                ProviderError::Protocol("/v1/propose: regions is not an array".into())
            })?;
        let mut out = regions
            .iter()
            .map(|r| {
                let bbox = parse_wire_box(Self::field(r, "box", "/v1/propose")?)?;
                let confidence =
                    Self::finite(Self::field(r, "confidence", "/v1/propose")?, "confidence")?;
                Ok(ProposedRegion {
                    bbox,
                    detector_confidence: confidence.clamp(0.0, 1.0),
                })
            })
            .collect::<ProviderResult<Vec<_>>>()?;
        out.sort_by(|a, b| b.detector_confidence.total_cmp(&a.detector_confidence));
        Ok(out)
    }
}

impl RegionJudge for HttpProvider {
    fn judge_region(&self, image_id: &str, bbox: &BBox, name: &str) -> ProviderResult<Judgement> {
        let resp = self.call(
            "/v1/judge",
            Some(&json!({ "image_id": image_id, "box": bbox.to_array(), "name": name })),
        )?;
        let keep = Self::field(&resp, "keep", "/v1/judge")?
            .as_bool()
            .ok_or_else(|| ProviderError::Protocol("/v1/judge: keep is not a bool".into()))?;
        let score = Self::finite(Self::field(&resp, "score", "/v1/judge")?, "judge score")?;
        Ok(Judgement { keep, score })
    }
}

impl CropScorer for HttpProvider {
    fn score_crop(&self, image_id: &str, bbox: &BBox, description: &str) -> ProviderResult<f64> {
        let resp = self.call(
            "/v1/score_crop",
            Some(&json!({ "image_id": image_id, "box": bbox.to_array(), "text": description })),
        )?;
        Ok(
            Self::finite(Self::field(&resp, "score", "/v1/score_crop")?, "crop score")?
                .clamp(0.0, 1.0),
        )
    }
}

impl QaModel for HttpProvider {
    fn answer(&self, context: &str, question: &str) -> ProviderResult<String> {
        if context.trim().is_empty() {
            return Ok("unknown".to_string());
        }
        let resp = self.call(
            "/v1/qa",
            Some(&json!({ "context": context, "question": question })),
        )?;
        let answer = Self::field(&resp, "answer", "/v1/qa")?
            .as_str()
            .ok_or_else(|| ProviderError::Protocol("/v1/qa: answer is not a string".into()))?;
        Ok(if answer.trim().is_empty() {
            "unknown".to_string()
        } else {
            answer.to_string()
        })
    }
}

fn parse_wire_box(v: &Value) -> ProviderResult<BBox> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| ProviderError::Protocol("box must be an array of 4 numbers".into()))?;
    let mut c = [0f64; 4];
    for (slot, x) in c.iter_mut().zip(arr) {
        *slot = HttpProvider::finite(x, "box coordinate")?;
    }
    BBox::from_array(c).map_err(|e| ProviderError::Protocol(e.to_string()))
}
