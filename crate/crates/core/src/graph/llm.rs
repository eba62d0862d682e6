//! Concept-relation prompting: prompt construction, response extraction and
//! the clients that answer prompts (canned fixture or live HTTP endpoint).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use indexmap::IndexSet;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "SINKT_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "SINKT_LLM_MODEL";
pub const ENV_API_KEY: &str = "SINKT_LLM_API_KEY";

/// Prompts with more candidates than this are split and their answers unioned.
pub const MAX_CANDIDATES_PER_PROMPT: usize = 500;

pub trait LlmClient: Send + Sync {
    /// Short label recorded in graph provenance.
    fn kind(&self) -> String;

    /// Answer `prompt`. `key` identifies the vertex the prompt is about and is
    /// what canned clients dispatch on.
    fn complete(&self, key: &str, prompt: &str) -> Result<String>;

    /// Content hash of the canned fixture, if any.
    fn fixture_hash(&self) -> Option<String> {
        None
    }
}

/// Canned responses keyed by vertex id, loaded from a JSON object.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    responses: BTreeMap<String, String>,
    hash: String,
}

impl MockClient {
    pub fn from_map(responses: BTreeMap<String, String>) -> Self {
        let bytes = serde_json::to_vec(&responses).unwrap_or_default();
        Self {
            hash: hex::encode(Sha256::digest(&bytes)),
            responses,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let responses: BTreeMap<String, String> = serde_json::from_slice(&bytes)?;
        Ok(Self {
            hash: hex::encode(Sha256::digest(&bytes)),
            responses,
        })
    }
}

impl LlmClient for MockClient {
    fn kind(&self) -> String {
        "mock".into()
    }

    fn complete(&self, key: &str, _prompt: &str) -> Result<String> {
        match self.responses.get(key) {
            Some(r) => Ok(r.clone()),
            None => {
                log::debug!("mock fixture has no response for `{key}`");
                Ok(String::new())
            }
        }
    }

    fn fixture_hash(&self) -> Option<String> {
        Some(self.hash.clone())
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    model: String,
    token: Option<String>,
    max_attempts: u32,
    backoff: Duration,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::invalid(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            max_attempts: 4,
            backoff: Duration::from_millis(500),
            http,
        })
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| {
            Error::invalid(format!("live mode requires {ENV_ENDPOINT}; use --mock for fixtures"))
        })?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4".into());
        Self::new(endpoint, model, std::env::var(ENV_API_KEY).ok())
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = ChatRequest {
            model: &self.model,
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("http status {status}"));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response has no choices".to_string())
    }
}

impl LlmClient for HttpClient {
    fn kind(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, key: &str, prompt: &str) -> Result<String> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.request_once(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("llm attempt {attempt}/{} for `{key}` failed: {e}", self.max_attempts);
                    last = e;
                }
            }
            if attempt < self.max_attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Llm {
            concept: key.to_owned(),
            message: last,
        })
    }
}

pub fn build_prompt(target_concept_text: &str, candidate_concept_texts: &[&str]) -> String {
    let mut p = String::new();
    p.push_str("TARGET:\n");
    p.push_str(target_concept_text);
    p.push_str("\n\nCANDIDATES:\n");
    for c in candidate_concept_texts {
        p.push_str("- ");
        p.push_str(c);
        p.push('\n');
    }
    p.push_str(
        "\nINSTRUCTION:\n\
         Select from the CANDIDATES list every concept that is related to the TARGET \
         concept, such as a prerequisite a student must master first. Only choose \
         names that appear in the list and copy them exactly; do not invent new \
         concepts. Answer with a single bracketed, comma-separated list, for example \
         [first concept, second concept]. Answer [] if none are related.\n",
    );
    p
}

/// Prompt asking which existing concepts a new question exercises.
pub fn build_question_prompt(question_text: &str, candidate_concept_texts: &[&str]) -> String {
    let mut p = String::new();
    p.push_str("QUESTION:\n");
    p.push_str(question_text);
    p.push_str("\n\nCANDIDATES:\n");
    for c in candidate_concept_texts {
        p.push_str("- ");
        p.push_str(c);
        p.push('\n');
    }
    p.push_str(
        "\nINSTRUCTION:\n\
         Select from the CANDIDATES list the concepts a student must apply to answer \
         the QUESTION. Only choose names that appear in the list and copy them exactly. \
         Answer with a single bracketed, comma-separated list, for example \
         [first concept, second concept].\n",
    );
    p
}

pub fn normalize_name(text: &str) -> String {
    text.trim().to_lowercase()
}

fn bracket_list() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("static regex"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedRelations {
    pub ids: Vec<String>,
    /// Whether a bracketed list was present at all.
    pub found_list: bool,
    pub unknown_items: usize,
}

/// Extract the first bracketed list and map its items onto known concept ids.
/// `known_concepts` maps [`normalize_name`]d concept text to id.
pub fn parse_relations_detailed(
    response_text: &str,
    known_concepts: &BTreeMap<String, String>,
) -> ParsedRelations {
    let Some(cap) = bracket_list().captures(response_text) else {
        return ParsedRelations::default();
    };
    let mut ids: IndexSet<String> = IndexSet::new();
    let mut unknown = 0;
    for item in cap[1].split(',') {
        let name = normalize_name(item.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`'));
        if name.is_empty() {
            continue;
        }
        match known_concepts.get(&name) {
            Some(id) => {
                ids.insert(id.clone());
            }
            None => unknown += 1,
        }
    }
    ParsedRelations {
        ids: ids.into_iter().collect(),
        found_list: true,
        unknown_items: unknown,
    }
}

pub fn parse_relations(response_text: &str, known_concepts: &BTreeMap<String, String>) -> Vec<String> {
    parse_relations_detailed(response_text, known_concepts).ids
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeGenReport {
    pub calls: usize,
    pub unparsable: usize,
    pub unknown_items: usize,
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConceptEntry<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub fn known_concept_map(concepts: &[ConceptEntry<'_>]) -> BTreeMap<String, String> {
    concepts
        .iter()
        .map(|c| (normalize_name(c.text), c.id.to_owned()))
        .collect()
}

/// Ask the client which concepts relate to `target`, chunking long candidate
/// lists. Returns related ids in answer order.
fn related_concepts(
    target: ConceptEntry<'_>,
    concepts: &[ConceptEntry<'_>],
    known: &BTreeMap<String, String>,
    client: &dyn LlmClient,
) -> Result<(Vec<String>, EdgeGenReport)> {
    let candidates: Vec<&str> = concepts
        .iter()
        .filter(|c| c.id != target.id)
        .map(|c| c.text)
        .collect();
    let mut report = EdgeGenReport::default();
    let mut related: IndexSet<String> = IndexSet::new();
    if candidates.is_empty() {
        return Ok((Vec::new(), report));
    }
    for chunk in candidates.chunks(MAX_CANDIDATES_PER_PROMPT) {
        let prompt = build_prompt(target.text, chunk);
        let response = client.complete(target.id, &prompt)?;
        report.calls += 1;
        let parsed = parse_relations_detailed(&response, known);
        if !parsed.found_list {
            report.unparsable += 1;
        }
        report.unknown_items += parsed.unknown_items;
        related.extend(parsed.ids);
    }
    Ok((related.into_iter().collect(), report))
}

/// For each target concept `c_i`, every concept `c_j` the client relates to it
/// yields the directed edge `c_j -> c_i`. Self-loops and duplicates are dropped;
/// edge order follows concept order, then answer order.
pub fn generate_concept_edges(
    concepts: &[ConceptEntry<'_>],
    client: &dyn LlmClient,
) -> Result<(Vec<(String, String)>, EdgeGenReport)> {
    generate_edges_for(concepts, concepts, client)
}

/// Like [`generate_concept_edges`] but only issues prompts for `targets`, with
/// the whole `concepts` list as the candidate universe.
pub fn generate_edges_for(
    targets: &[ConceptEntry<'_>],
    concepts: &[ConceptEntry<'_>],
    client: &dyn LlmClient,
) -> Result<(Vec<(String, String)>, EdgeGenReport)> {
    let known = known_concept_map(concepts);
    let answers: Vec<Result<(Vec<String>, EdgeGenReport)>> = targets
        .par_iter()
        .map(|t| related_concepts(*t, concepts, &known, client))
        .collect();
    let mut report = EdgeGenReport::default();
    let mut edges: IndexSet<(String, String)> = IndexSet::new();
    for (target, answer) in targets.iter().zip(answers) {
        let (related, r) = answer?;
        report.calls += r.calls;
        report.unparsable += r.unparsable;
        report.unknown_items += r.unknown_items;
        for src in related {
            if src == target.id {
                report.self_loops_dropped += 1;
                continue;
            }
            if !edges.insert((src, target.id.to_owned())) {
                report.duplicates_dropped += 1;
            }
        }
    }
    Ok((edges.into_iter().collect(), report))
}

/// Ask the client which concepts a new question exercises.
pub fn annotate_question(
    question_id: &str,
    question_text: &str,
    concepts: &[ConceptEntry<'_>],
    client: &dyn LlmClient,
) -> Result<Vec<String>> {
    let known = known_concept_map(concepts);
    let texts: Vec<&str> = concepts.iter().map(|c| c.text).collect();
    let mut out: IndexSet<String> = IndexSet::new();
    for chunk in texts.chunks(MAX_CANDIDATES_PER_PROMPT.max(1)) {
        let prompt = build_question_prompt(question_text, chunk);
        let response = client.complete(question_id, &prompt)?;
        out.extend(parse_relations(&response, &known));
    }
    Ok(out.into_iter().collect())
}
