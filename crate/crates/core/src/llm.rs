//! Chat-completions backend with content-addressed record/replay.
//!
//! Every request is a [`PromptBundle`]; its SHA-256 over the canonical JSON
//! form keys the [`Cassette`]. In replay mode nothing touches the network and
//! a missing key is an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decompose::{ContextMode, DecomposerOutput, DecompositionContext, DecompositionPolicy, PolicyError, Reply};
use crate::terminate::{CongruenceJudge, CongruenceQuery};

pub const ENV_BASE_URL: &str = "STEP_LLM_BASE_URL";
pub const ENV_MODEL: &str = "STEP_LLM_MODEL";
pub const ENV_API_KEY: &str = "STEP_LLM_API_KEY";

pub const DEFAULT_MAX_RETRIES: u32 = 2;

const SUBGOAL_SYSTEM: &str = "You plan household manipulation tasks for a one-armed robot by splitting a task into \
subgoals, one at a time. You are given a task, the steps already completed for it, what the robot can see and what \
its body can do. Reply with the single next subgoal that moves the task forward, as one line of the form \
`SUBGOAL: <text>`. Use a primitive phrase when one action suffices: `walk to <target>`, `grasp <object>`, \
`put <object> on <surface>`, `put <object> in <container>`, `open <container>`, `close <container>`. \
If the completed steps already achieve the task, reply with the single word `DONE`.";

const ACTION_SYSTEM: &str = "You control a one-armed household robot. Given an instruction, the actions executed so \
far and what the robot can see, reply with the next action as one line `ACTION: <phrase>` where the phrase is one of \
`walk to <target>`, `grasp <object>`, `put <object> on <surface>`, `put <object> in <container>`, `open <container>`, \
`close <container>`. If the instruction is accomplished, reply with the single word `DONE`.";

const VERDICT_SYSTEM: &str = "You check whether a proposed subgoal belongs to its parent task. Given the parent task, \
the previous sibling subgoal and the candidate, answer `YES` if achieving the candidate is part of what the parent \
task still needs after the previous sibling, and `NO` otherwise. Answer with exactly one word.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpectedForm {
    SubgoalLine,
    VerdictToken,
    ActionLine,
}

impl ExpectedForm {
    fn reminder(self) -> &'static str {
        match self {
            ExpectedForm::SubgoalLine => {
                "Your previous reply could not be parsed. Answer with exactly one line: `SUBGOAL: <text>` or `DONE`."
            }
            ExpectedForm::ActionLine => {
                "Your previous reply could not be parsed. Answer with exactly one line: `ACTION: <phrase>` or `DONE`."
            }
            ExpectedForm::VerdictToken => "Your previous reply could not be parsed. Answer with exactly `YES` or `NO`.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub expected_form: ExpectedForm,
}

impl PromptBundle {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn key(&self) -> String {
        let canonical = serde_json::to_string(self).expect("bundle serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Short human-readable summary stored next to recorded responses.
    pub fn digest(&self) -> String {
        let first = self.user_text.lines().take(2).collect::<Vec<_>>().join(" | ");
        format!("{:?}: {first}", self.expected_form)
    }

    fn with_reminder(&self, attempt: u32) -> PromptBundle {
        let mut b = self.clone();
        for _ in 0..attempt {
            b.user_text.push_str("\n\n");
            b.user_text.push_str(self.expected_form.reminder());
        }
        b
    }
}

pub fn subgoal_bundle(ctx: &DecompositionContext) -> PromptBundle {
    let (system, form) = match ctx.mode {
        ContextMode::FlatBaseline => (ACTION_SYSTEM, ExpectedForm::ActionLine),
        _ => (SUBGOAL_SYSTEM, ExpectedForm::SubgoalLine),
    };
    PromptBundle { system_text: system.into(), user_text: ctx.render(), expected_form: form }
}

pub fn verdict_bundle(q: &CongruenceQuery<'_>) -> PromptBundle {
    let user_text = format!(
        "parent task: {}\nprevious sibling: {}\ncandidate subgoal: {}\nobservation:\n{}",
        q.parent,
        q.left_sibling.unwrap_or("(none)"),
        q.candidate,
        q.observation.digest()
    );
    PromptBundle { system_text: VERDICT_SYSTEM.into(), user_text, expected_form: ExpectedForm::VerdictToken }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable reply: {raw:?}")]
pub struct GrammarError {
    pub raw: String,
}

fn single_line(raw: &str) -> Option<&str> {
    let t = raw.trim();
    (!t.is_empty() && !t.contains('\n')).then_some(t)
}

fn tagged<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let head = line.get(..tag.len())?;
    if !head.eq_ignore_ascii_case(tag) {
        return None;
    }
    let rest = line[tag.len()..].trim();
    (!rest.is_empty()).then_some(rest)
}

fn parse_tagged(raw: &str, tag: &str) -> Result<DecomposerOutput, GrammarError> {
    let err = || GrammarError { raw: raw.to_string() };
    let line = single_line(raw).ok_or_else(err)?;
    if line.eq_ignore_ascii_case("DONE") {
        return Ok(DecomposerOutput::EndOfSiblings);
    }
    tagged(line, tag).map(|t| DecomposerOutput::Subgoal(t.to_string())).ok_or_else(err)
}

/// Accepts `SUBGOAL: <text>` or `DONE` on a single line.
pub fn parse_subgoal(raw: &str) -> Result<DecomposerOutput, GrammarError> {
    parse_tagged(raw, "SUBGOAL:")
}

/// Accepts `ACTION: <phrase>` or `DONE` on a single line.
pub fn parse_action(raw: &str) -> Result<DecomposerOutput, GrammarError> {
    parse_tagged(raw, "ACTION:")
}

/// Accepts `YES` or `NO`, case-insensitive.
pub fn parse_verdict(raw: &str) -> Result<bool, GrammarError> {
    match raw.trim().to_ascii_uppercase().as_str() {
        "YES" => Ok(true),
        "NO" => Ok(false),
        _ => Err(GrammarError { raw: raw.to_string() }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_digest: String,
    pub response_text: String,
    /// Unix seconds at recording time.
    pub timestamp: u64,
}

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Recorded responses keyed by bundle hash. Reads are shared, writes exclusive.
#[derive(Debug, Default)]
pub struct Cassette {
    entries: RwLock<BTreeMap<String, CassetteEntry>>,
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: BTreeMap<String, CassetteEntry>) -> Self {
        Self { entries: RwLock::new(entries) }
    }

    pub fn load(path: &Path) -> Result<Self, CassetteError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| CassetteError::Io { path: p.clone(), source })?;
        let entries = serde_json::from_str(&text).map_err(|source| CassetteError::Json { path: p, source })?;
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<(), CassetteError> {
        std::fs::write(path, self.to_json())
            .map_err(|source| CassetteError::Io { path: path.display().to_string(), source })
    }

    pub fn to_json(&self) -> String {
        let entries = self.entries.read().expect("cassette lock");
        let mut s = serde_json::to_string_pretty(&*entries).expect("cassette serializes");
        s.push('\n');
        s
    }

    pub fn get(&self, key: &str) -> Option<CassetteEntry> {
        self.entries.read().expect("cassette lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, entry: CassetteEntry) {
        self.entries.write().expect("cassette lock").insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint answered HTTP {0}")]
    HttpStatus(u16),
    #[error("no cassette entry for request {key} ({digest})")]
    CassetteMiss { key: String, digest: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint not configured: set {0}")]
    NotConfigured(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub temperature: f64,
    pub seed: u64,
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self, TransportError> {
        let var = |k: &'static str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Ok(Self {
            base_url: var(ENV_BASE_URL).ok_or(TransportError::NotConfigured(ENV_BASE_URL))?,
            model: var(ENV_MODEL).ok_or(TransportError::NotConfigured(ENV_MODEL))?,
            api_key: var(ENV_API_KEY),
            timeout: Duration::from_secs(60),
            temperature: 0.0,
            seed: 0,
        })
    }
}

pub struct LlmClient {
    mode: TransportMode,
    endpoint: Option<EndpointConfig>,
    cassette: Arc<Cassette>,
    agent: ureq::Agent,
}

impl LlmClient {
    /// Live and record modes need an endpoint; replay never uses one.
    pub fn new(
        mode: TransportMode,
        endpoint: Option<EndpointConfig>,
        cassette: Arc<Cassette>,
    ) -> Result<Self, TransportError> {
        if mode != TransportMode::Replay && endpoint.is_none() {
            return Err(TransportError::NotConfigured(ENV_BASE_URL));
        }
        let timeout = endpoint.as_ref().map(|e| e.timeout);
        let agent = ureq::Agent::config_builder().timeout_global(timeout).http_status_as_error(false).build().into();
        Ok(Self { mode, endpoint, cassette, agent })
    }

    pub fn replay(cassette: Arc<Cassette>) -> Self {
        Self::new(TransportMode::Replay, None, cassette).expect("replay needs no endpoint")
    }

    pub fn cassette(&self) -> &Arc<Cassette> {
        &self.cassette
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<String, TransportError> {
        let key = bundle.key();
        match self.mode {
            TransportMode::Replay => self
                .cassette
                .get(&key)
                .map(|e| e.response_text)
                .ok_or_else(|| TransportError::CassetteMiss { key, digest: bundle.digest() }),
            TransportMode::Live => self.post(bundle),
            TransportMode::Record => {
                let text = self.post(bundle)?;
                let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                self.cassette.insert(
                    key,
                    CassetteEntry { request_digest: bundle.digest(), response_text: text.clone(), timestamp },
                );
                Ok(text)
            }
        }
    }

    fn post(&self, bundle: &PromptBundle) -> Result<String, TransportError> {
        let ep = self.endpoint.as_ref().ok_or(TransportError::NotConfigured(ENV_BASE_URL))?;
        let url = format!("{}/chat/completions", ep.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": ep.model,
            "temperature": ep.temperature,
            "seed": ep.seed,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(k) = &ep.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout(ep.timeout),
            ureq::Error::StatusCode(c) => TransportError::HttpStatus(c),
            other => TransportError::Network(other.to_string()),
        };
        let mut resp = req.send(body.to_string()).map_err(map_err)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::HttpStatus(status));
        }
        let value: serde_json::Value = resp.body_mut().read_json().map_err(map_err)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Malformed(value.to_string()))
    }
}

/// Asks until `parse` accepts the reply, appending a format reminder on each retry.
fn ask<T>(
    client: &LlmClient,
    bundle: &PromptBundle,
    max_retries: u32,
    parse: impl Fn(&str) -> Result<T, GrammarError>,
) -> Result<(T, u32), PolicyError> {
    let mut last = String::new();
    for attempt in 0..=max_retries {
        let raw = client.complete(&bundle.with_reminder(attempt)).map_err(|e| PolicyError::Backend(e.to_string()))?;
        match parse(&raw) {
            Ok(v) => return Ok((v, attempt)),
            Err(e) => last = e.raw,
        }
    }
    Err(PolicyError::Grammar { raw: last, retries: max_retries })
}

/// Decomposition policy backed by the chat endpoint.
pub struct LlmPolicy {
    client: Arc<LlmClient>,
    max_retries: u32,
}

impl LlmPolicy {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self { client, max_retries: DEFAULT_MAX_RETRIES }
    }

    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }
}

impl DecompositionPolicy for LlmPolicy {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        let bundle = subgoal_bundle(ctx);
        let parse = match bundle.expected_form {
            ExpectedForm::ActionLine => parse_action,
            _ => parse_subgoal,
        };
        let (output, retries) = ask(&self.client, &bundle, self.max_retries, parse)?;
        Ok(Reply { output, retries })
    }
}

/// Congruence judge backed by the chat endpoint.
pub struct LlmJudge {
    client: Arc<LlmClient>,
    max_retries: u32,
}

impl LlmJudge {
    pub fn new(client: Arc<LlmClient>) -> Self {
        Self { client, max_retries: DEFAULT_MAX_RETRIES }
    }
}

impl CongruenceJudge for LlmJudge {
    fn congruent(&self, q: &CongruenceQuery<'_>) -> Result<bool, PolicyError> {
        ask(&self.client, &verdict_bundle(q), self.max_retries, parse_verdict).map(|(v, _)| v)
    }
}

fn format_output(output: &DecomposerOutput, form: ExpectedForm) -> String {
    match (output, form) {
        (DecomposerOutput::EndOfSiblings, _) => "DONE".into(),
        (DecomposerOutput::Subgoal(t), ExpectedForm::ActionLine) => format!("ACTION: {t}"),
        (DecomposerOutput::Subgoal(t), _) => format!("SUBGOAL: {t}"),
    }
}

fn scribe(cassette: &Cassette, bundle: &PromptBundle, response_text: String) {
    cassette.insert(bundle.key(), CassetteEntry { request_digest: bundle.digest(), response_text, timestamp: 0 });
}

/// Wraps a policy and writes its answers into a cassette under the exact
/// bundles [`LlmPolicy`] would send, so a replay reproduces the wrapped policy.
pub struct ScribePolicy<P> {
    inner: P,
    cassette: Arc<Cassette>,
}

impl<P> ScribePolicy<P> {
    pub fn new(inner: P, cassette: Arc<Cassette>) -> Self {
        Self { inner, cassette }
    }
}

impl<P: DecompositionPolicy> DecompositionPolicy for ScribePolicy<P> {
    fn next_subgoal(&self, ctx: &DecompositionContext) -> Result<Reply, PolicyError> {
        let reply = self.inner.next_subgoal(ctx)?;
        let bundle = subgoal_bundle(ctx);
        scribe(&self.cassette, &bundle, format_output(&reply.output, bundle.expected_form));
        Ok(reply)
    }
}

/// Judge counterpart of [`ScribePolicy`].
pub struct ScribeJudge<J> {
    inner: J,
    cassette: Arc<Cassette>,
}

impl<J> ScribeJudge<J> {
    pub fn new(inner: J, cassette: Arc<Cassette>) -> Self {
        Self { inner, cassette }
    }
}

impl<J: CongruenceJudge> CongruenceJudge for ScribeJudge<J> {
    fn congruent(&self, q: &CongruenceQuery<'_>) -> Result<bool, PolicyError> {
        let verdict = self.inner.congruent(q)?;
        scribe(&self.cassette, &verdict_bundle(q), if verdict { "YES" } else { "NO" }.into());
        Ok(verdict)
    }
}
