//! Turning retrieved evidence into text, assembling the four-part prompt
//! and sending it to a generation backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::autodiff::Tape;
use crate::embedding::tokenize;
use crate::error::{Error, Result};
use crate::gate::{ExpertId, GateWeights};
use crate::graph::TextualGraph;
use crate::model::Forward;
use crate::subgraph::RetrievedSubgraph;
use crate::tensor::Tensor;

pub const DEFAULT_TASK: &str = "Answer the question using only the provided graph evidence.";
pub const DEFAULT_BUDGET: usize = 4000;
pub const NO_EVIDENCE: &str = "No graph evidence retrieved.";
pub const UNKNOWN_ANSWER: &str = "unknown";
pub const API_KEY_VAR: &str = "MIXRAG_LLM_API_KEY";
const TRIPLE_SEP: &str = " — ";
const ENTITY_PREFIX: &str = "Entity: ";

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "by", "did", "do", "does", "for", "from", "how", "in", "is", "it",
    "of", "on", "or", "the", "to", "was", "were", "what", "when", "where", "which", "who",
    "whom", "whose", "why", "with",
];

pub fn triple_line(head: &str, relation: &str, tail: &str) -> String {
    format!("{head}{TRIPLE_SEP}{relation}{TRIPLE_SEP}{tail}.")
}

pub fn entity_line(text: &str) -> String {
    format!("{ENTITY_PREFIX}{text}.")
}

/// Weighted entity and triple ids of the full graph, deduplicated by
/// keeping each id's largest weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evidence {
    pub entities: BTreeMap<usize, f64>,
    pub triples: BTreeMap<usize, f64>,
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.triples.is_empty()
    }

    pub fn add_entity(&mut self, id: usize, weight: f64) {
        let w = self.entities.entry(id).or_insert(weight);
        *w = w.max(weight);
    }

    pub fn add_triple(&mut self, id: usize, weight: f64) {
        let w = self.triples.entry(id).or_insert(weight);
        *w = w.max(weight);
    }

    /// Collects evidence from the three experts, scaling each item by its
    /// expert's gate weight. Subgraph triples share the subgraph weight
    /// evenly; subgraph nodes are used only when the subgraph has no triples.
    pub fn from_sources(
        subgraph: Option<&RetrievedSubgraph>,
        top_entities: &[(usize, f64)],
        top_triples: &[(usize, f64)],
        gate: &GateWeights,
    ) -> Self {
        let mut ev = Self::default();
        let a_e = gate.get(ExpertId::Entity);
        for &(id, w) in top_entities {
            ev.add_entity(id, a_e * w);
        }
        let a_r = gate.get(ExpertId::Relation);
        for &(id, w) in top_triples {
            ev.add_triple(id, a_r * w);
        }
        if let Some(s) = subgraph {
            let a_s = gate.get(ExpertId::Subgraph);
            let map = &s.subgraph;
            if !map.triple_map.is_empty() {
                let w = a_s / map.triple_map.len() as f64;
                for &t in &map.triple_map {
                    ev.add_triple(t, w);
                }
            } else if !map.node_map.is_empty() {
                let w = a_s / map.node_map.len() as f64;
                for &v in &map.node_map {
                    ev.add_entity(v, w);
                }
            }
        }
        ev
    }

    pub fn from_forward(tape: &Tape, forward: &Forward) -> Self {
        let gate = forward.gate.weights(tape);
        let none = Vec::new();
        Self::from_sources(
            forward.subgraph.as_ref().map(|p| &p.retrieved),
            forward.entity.as_ref().map_or(&none, |o| &o.top_items),
            forward.relation.as_ref().map_or(&none, |o| &o.top_items),
            &gate,
        )
    }

    /// Evidence lines in output order: descending weight, triples before
    /// entities on ties, then ascending id.
    pub fn lines(&self, graph: &TextualGraph) -> Vec<String> {
        let mut items: Vec<(f64, u8, usize)> = self
            .triples
            .iter()
            .map(|(&id, &w)| (w, 0, id))
            .chain(self.entities.iter().map(|(&id, &w)| (w, 1, id)))
            .collect();
        items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        items
            .into_iter()
            .map(|(_, kind, id)| {
                if kind == 0 {
                    let (h, r, t) = graph.triple_texts(id);
                    triple_line(h, r, t)
                } else {
                    entity_line(graph.entity_text(id))
                }
            })
            .collect()
    }
}

/// Evidence text within `budget` characters, cut after the last whole line
/// that fits.
pub fn textualize(graph: &TextualGraph, evidence: &Evidence, budget: usize) -> String {
    if evidence.is_empty() {
        return NO_EVIDENCE.to_string();
    }
    let lines = evidence.lines(graph);
    let mut out = String::new();
    let mut used = 0;
    for line in &lines {
        let extra = line.chars().count() + usize::from(!out.is_empty());
        if used + extra > budget {
            break;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(line);
        used += extra;
    }
    if out.is_empty() {
        log::warn!("first evidence line exceeds the {budget}-character budget; evidence left empty");
    }
    out
}

/// The four prompt parts in fixed order: task, soft prompt, evidence, query.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub task: String,
    pub soft_prompt: Vec<Tensor>,
    pub evidence: String,
    pub query: String,
    /// Gate weights, for backends that cannot take the soft prompt.
    pub priority: Option<GateWeights>,
}

impl PromptBundle {
    /// Text form: task, evidence and query joined by newlines, skipping
    /// empty evidence.
    pub fn to_text(&self) -> String {
        if self.evidence.is_empty() {
            format!("{}\n{}", self.task, self.query)
        } else {
            format!("{}\n{}\n{}", self.task, self.evidence, self.query)
        }
    }

    pub fn with_priority(mut self, gate: GateWeights) -> Self {
        self.priority = Some(gate);
        self
    }
}

pub fn assemble(task: &str, soft: Vec<Tensor>, evidence: &str, query: &str) -> Result<PromptBundle> {
    if query.trim().is_empty() {
        return Err(Error::Parameter("query must be non-empty".into()));
    }
    Ok(PromptBundle {
        task: task.to_string(),
        soft_prompt: soft,
        evidence: evidence.to_string(),
        query: query.to_string(),
        priority: None,
    })
}

/// Rows of an `[m, d_p]` soft prompt as separate vectors.
pub fn soft_prompt_rows(p_soft: &Tensor) -> Vec<Tensor> {
    match p_soft.shape() {
        [_, _] => (0..p_soft.rows()).map(|i| Tensor::vector(p_soft.row(i).to_vec())).collect(),
        _ => vec![Tensor::vector(p_soft.data().to_vec())],
    }
}

/// `relation (0.912) > entity (0.061) > subgraph (0.027)`
pub fn priority_line(gate: &GateWeights) -> String {
    let mut ranked: Vec<(ExpertId, f64)> = gate.alpha.iter().map(|(&e, &w)| (e, w)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let parts: Vec<String> = ranked.iter().map(|(e, w)| format!("{e} ({w:.3})")).collect();
    format!("Evidence priority: {}", parts.join(" > "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub text: String,
    pub raw: Value,
    pub latency_ms: f64,
}

pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn accepts_soft_prompt(&self) -> bool;
    fn generate(&self, bundle: &PromptBundle) -> Result<Answer>;
}

/// Parts recovered from a serialized prompt by the mock backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptEcho {
    pub task: String,
    pub evidence: String,
    pub query: String,
    pub soft_vectors: usize,
    pub soft_dim: usize,
}

/// Deterministic in-process backend. It reads only the bundle and answers
/// with the best-weighted evidence entity that the query is asking about.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    /// Required soft prompt shape `(vectors, dim)`, if any.
    pub expected_soft: Option<(usize, usize)>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expecting(vectors: usize, dim: usize) -> Self {
        Self {
            expected_soft: Some((vectors, dim)),
        }
    }

    /// Splits the text form back into its parts. Task and query are taken
    /// to be single lines.
    pub fn echo(bundle: &PromptBundle) -> PromptEcho {
        let text = bundle.to_text();
        let lines: Vec<&str> = text.split('\n').collect();
        let task = lines[0].to_string();
        let query = lines[lines.len() - 1].to_string();
        let evidence = if lines.len() > 2 {
            lines[1..lines.len() - 1].join("\n")
        } else {
            String::new()
        };
        PromptEcho {
            task,
            evidence,
            query,
            soft_vectors: bundle.soft_prompt.len(),
            soft_dim: bundle.soft_prompt.first().map_or(0, Tensor::len),
        }
    }

    fn check_soft(&self, bundle: &PromptBundle) -> Result<()> {
        let Some((m, d)) = self.expected_soft else {
            return Ok(());
        };
        let soft = &bundle.soft_prompt;
        if soft.len() != m || soft.iter().any(|v| v.shape() != [d]) {
            let dims: Vec<usize> = soft.iter().map(Tensor::len).collect();
            return Err(Error::Protocol(format!(
                "expected {m} soft prompt vectors of dim {d}, got dims {dims:?}"
            )));
        }
        if soft.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft prompt".into()));
        }
        Ok(())
    }

    /// The answer policy on its own.
    pub fn answer_for(evidence: &str, query: &str) -> String {
        let focus: BTreeSet<String> = tokenize(query)
            .into_iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .collect();
        let overlaps = |text: &str| tokenize(text).iter().any(|t| focus.contains(t));
        for line in evidence.lines() {
            let line = line.trim();
            if let Some(text) = line.strip_prefix(ENTITY_PREFIX) {
                let text = text.strip_suffix('.').unwrap_or(text);
                if !text.is_empty() && !overlaps(text) {
                    return text.to_string();
                }
                continue;
            }
            let body = line.strip_suffix('.').unwrap_or(line);
            let parts: Vec<&str> = body.split(TRIPLE_SEP).collect();
            if let [head, _, tail] = parts[..] {
                match (overlaps(head), overlaps(tail)) {
                    (true, false) => return tail.to_string(),
                    (false, true) => return head.to_string(),
                    _ => {}
                }
            }
        }
        UNKNOWN_ANSWER.to_string()
    }
}

impl GenerationBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn accepts_soft_prompt(&self) -> bool {
        true
    }

    fn generate(&self, bundle: &PromptBundle) -> Result<Answer> {
        self.check_soft(bundle)?;
        if let Some(g) = &bundle.priority {
            log::trace!("{}", priority_line(g));
        }
        let text = Self::answer_for(&bundle.evidence, &bundle.query);
        Ok(Answer {
            raw: json!({ "answer": text }),
            text,
            latency_ms: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    /// Extra attempts after a retryable failure.
    pub retries: usize,
    pub backoff: Duration,
    pub api_key: Option<String>,
}

impl HttpConfig {
    /// Defaults with the bearer token read from the environment.
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
        }
    }
}

/// Chat-completions client. The soft prompt cannot go over the wire, so it
/// is dropped and the gate weights are sent as a priority line instead.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport {
                status: None,
                message: e.to_string(),
            })?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn request_body(&self, bundle: &PromptBundle) -> Value {
        let mut user = String::new();
        if let Some(g) = &bundle.priority {
            let _ = writeln!(user, "{}", priority_line(g));
        }
        if !bundle.evidence.is_empty() {
            let _ = writeln!(user, "{}", bundle.evidence);
        }
        user.push_str(&bundle.query);
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.task},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.transport(e))?;
        let status = resp.status();
        if !status.is_success() {
            let message = resp.text().unwrap_or_default();
            return Err(Error::Transport {
                status: Some(status.as_u16()),
                message,
            });
        }
        let text = resp.text().map_err(|e| self.transport(e))?;
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))
    }

    fn transport(&self, e: reqwest::Error) -> Error {
        if e.is_timeout() {
            Error::Timeout(self.config.timeout)
        } else {
            Error::Transport {
                status: e.status().map(|s| s.as_u16()),
                message: e.to_string(),
            }
        }
    }
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Transport { status: None, .. } | Error::Timeout(_) => true,
        Error::Transport { status: Some(s), .. } => *s == 429 || *s >= 500,
        _ => false,
    }
}

/// Content of the first choice's message.
pub fn parse_chat_response(raw: &Value) -> Result<String> {
    let text = raw
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol("missing choices[0].message.content".into()))?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Protocol("empty completion".into()));
    }
    Ok(text.to_string())
}

impl GenerationBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn accepts_soft_prompt(&self) -> bool {
        false
    }

    fn generate(&self, bundle: &PromptBundle) -> Result<Answer> {
        let body = self.request_body(bundle);
        let start = Instant::now();
        let mut attempt = 0;
        let raw = loop {
            match self.attempt(&body) {
                Ok(raw) => break raw,
                Err(e) if attempt < self.config.retries && retryable(&e) => {
                    attempt += 1;
                    log::warn!("generation attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(self.config.backoff * attempt as u32);
                }
                Err(e) => return Err(e),
            }
        };
        let text = parse_chat_response(&raw)?;
        Ok(Answer {
            text,
            raw,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
