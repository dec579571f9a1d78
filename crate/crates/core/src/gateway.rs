//! Chat-model access: prompt templates, content-addressed response cache,
//! retries, and the two backends (HTTP chat-completion and a fixture-driven
//! mock).
//!
//! Every model call in the pipeline goes through [`ModelGateway::complete`].
//! The cache key is the SHA-256 of `(model_id, rendered prompt, image_refs,
//! temperature)`, so identical requests are answered from the cache and a
//! rerun with the same fixtures replays byte-identical responses.
//!
//! Disk cache layout: `<cache_dir>/<first two hex digits>/<digest>.json`,
//! each file holding `{"digest": ..., "text": ...}`. Entries are written to a
//! temporary file in the same directory and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::sha256_hex;

pub const ENV_ENDPOINT: &str = "STSG_MODEL_ENDPOINT";
pub const ENV_KEY: &str = "STSG_MODEL_KEY";
pub const ENV_MODEL_ID: &str = "STSG_MODEL_ID";

const BUILTIN_PROMPTS: &str = include_str!("../assets/prompts.txt");

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing-binding:{0}")]
    MissingBinding(String),
    #[error("template asset: {0}")]
    Template(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("no mock fixture matches prompt (digest {0})")]
    NoFixture(String),
    #[error("mock fixture: {0}")]
    Fixture(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Which visual input a prompt is issued with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visual {
    None,
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: String,
    pub visual: Visual,
    pub body: String,
}

impl PromptTemplate {
    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names = Vec::new();
        for cap in placeholder_re().captures_iter(&self.body) {
            let name = cap[1].to_string();
            if !names.contains(&name) {
                names.push(name);
            }
        }
        names
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        if let Some(missing) = self
            .placeholders()
            .into_iter()
            .find(|name| !bindings.contains_key(name))
        {
            return Err(GatewayError::MissingBinding(missing));
        }
        Ok(placeholder_re()
            .replace_all(&self.body, |cap: &regex::Captures<'_>| {
                bindings[&cap[1]].clone()
            })
            .into_owned())
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").unwrap())
}

#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    /// Parse a prompt asset. Templates start with `=== <id> [image|video]`.
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let mut templates = BTreeMap::new();
        let mut current: Option<(String, Visual, Vec<&str>)> = None;
        let finish = |current: Option<(String, Visual, Vec<&str>)>,
                      templates: &mut BTreeMap<String, PromptTemplate>|
         -> Result<(), GatewayError> {
            if let Some((id, visual, lines)) = current {
                let body = lines.join("\n").trim_end().to_string();
                if templates
                    .insert(
                        id.clone(),
                        PromptTemplate {
                            id: id.clone(),
                            visual,
                            body,
                        },
                    )
                    .is_some()
                {
                    return Err(GatewayError::Template(format!("duplicate template `{id}`")));
                }
            }
            Ok(())
        };
        for line in text.lines() {
            if let Some(header) = line.strip_prefix("=== ") {
                finish(current.take(), &mut templates)?;
                let mut parts = header.split_whitespace();
                let id = parts
                    .next()
                    .ok_or_else(|| GatewayError::Template("template header without id".into()))?;
                let visual = match parts.next() {
                    None => Visual::None,
                    Some("image") => Visual::Image,
                    Some("video") => Visual::Video,
                    Some(other) => {
                        return Err(GatewayError::Template(format!(
                            "unknown visual tag `{other}`"
                        )))
                    }
                };
                current = Some((id.to_string(), visual, Vec::new()));
            } else if let Some((_, _, lines)) = current.as_mut() {
                lines.push(line);
            } else if !(line.starts_with('#') || line.trim().is_empty()) {
                return Err(GatewayError::Template(format!(
                    "text outside a template: {line}"
                )));
            }
        }
        finish(current, &mut templates)?;
        Ok(Self { templates })
    }

    pub fn builtin() -> &'static TemplateRegistry {
        static REG: OnceLock<TemplateRegistry> = OnceLock::new();
        REG.get_or_init(|| TemplateRegistry::parse(BUILTIN_PROMPTS).expect("builtin prompt asset"))
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, GatewayError> {
        self.templates
            .get(id)
            .ok_or_else(|| GatewayError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, GatewayError> {
        self.get(id)?.render(bindings)
    }
}

/// Render a builtin template.
pub fn render_prompt(
    template_id: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    TemplateRegistry::builtin().render(template_id, bindings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub template_id: String,
    pub bindings: BTreeMap<String, String>,
    pub image_refs: Vec<String>,
    /// Empty means "use the gateway's configured model".
    pub model_id: String,
    pub temperature: f64,
    /// Extra instruction appended after the rendered template (format retries).
    pub suffix: Option<String>,
}

impl ModelRequest {
    pub fn new(template_id: impl Into<String>) -> Self {
        Self {
            template_id: template_id.into(),
            bindings: BTreeMap::new(),
            image_refs: Vec::new(),
            model_id: String::new(),
            temperature: 0.0,
            suffix: None,
        }
    }

    pub fn bind(mut self, name: &str, value: impl Into<String>) -> Self {
        self.bindings.insert(name.to_string(), value.into());
        self
    }

    pub fn image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_refs.push(image_ref.into());
        self
    }

    pub fn images<I, S>(mut self, refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.image_refs.extend(refs.into_iter().map(Into::into));
        self
    }

    pub fn with_suffix(mut self, suffix: impl Into<String>) -> Self {
        self.suffix = Some(suffix.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// Cache key over everything that determines a model answer.
pub fn request_digest(
    model_id: &str,
    prompt: &str,
    image_refs: &[String],
    temperature: f64,
) -> String {
    let canonical = serde_json::to_vec(&(model_id, prompt, image_refs, format!("{temperature}")))
        .expect("tuple of strings serializes");
    sha256_hex(&canonical)
}

/// One upstream call as seen by a backend.
#[derive(Debug, Clone)]
pub struct BackendCall<'a> {
    pub digest: &'a str,
    pub prompt: &'a str,
    pub image_refs: &'a [String],
    pub model_id: &'a str,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Retryable.
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Refusal(String),
    #[error("{0}")]
    NoFixture(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn performs_network(&self) -> bool;
    fn call(&self, call: &BackendCall<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRecordSpec {
    #[serde(default)]
    pub digest: Option<String>,
    /// Regex over the rendered prompt; capture groups may be referenced in
    /// `response` as `$1` / `${name}`.
    #[serde(default)]
    pub pattern: Option<String>,
    /// Optional regex that at least one image ref must match.
    #[serde(default)]
    pub image: Option<String>,
    pub response: String,
}

/// Mock fixture document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixture {
    pub records: Vec<MockRecordSpec>,
    #[serde(default)]
    pub default: Option<String>,
}

struct MockRecord {
    digest: Option<String>,
    pattern: Option<Regex>,
    image: Option<Regex>,
    response: String,
}

/// Deterministic offline backend answering from fixture records: exact
/// digest matches first, then the first matching pattern record in file
/// order, then the fixture default.
pub struct MockBackend {
    records: Vec<MockRecord>,
    default: Option<String>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(fixture: MockFixture) -> Result<Self, GatewayError> {
        let compile = |p: &Option<String>| -> Result<Option<Regex>, GatewayError> {
            p.as_deref()
                .map(Regex::new)
                .transpose()
                .map_err(|e| GatewayError::Fixture(e.to_string()))
        };
        let records = fixture
            .records
            .iter()
            .map(|r| {
                if r.digest.is_none() && r.pattern.is_none() {
                    return Err(GatewayError::Fixture(
                        "record needs a digest or a pattern".into(),
                    ));
                }
                Ok(MockRecord {
                    digest: r.digest.clone(),
                    pattern: compile(&r.pattern)?,
                    image: compile(&r.image)?,
                    response: r.response.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            records,
            default: fixture.default,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let fixture: MockFixture =
            serde_json::from_str(text).map_err(|e| GatewayError::Fixture(e.to_string()))?;
        Self::new(fixture)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn performs_network(&self) -> bool {
        false
    }

    fn call(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.digest.as_deref() == Some(call.digest))
        {
            return Ok(r.response.clone());
        }
        for r in &self.records {
            let Some(pattern) = &r.pattern else { continue };
            if let Some(image) = &r.image {
                if !call.image_refs.iter().any(|i| image.is_match(i)) {
                    continue;
                }
            }
            if let Some(caps) = pattern.captures(call.prompt) {
                let mut out = String::new();
                caps.expand(&r.response, &mut out);
                return Ok(out);
            }
        }
        self.default
            .clone()
            .ok_or_else(|| BackendError::NoFixture(call.digest.to_string()))
    }
}

/// Chat-completion client over HTTP. Images are attached by reference.
pub struct HttpBackend {
    endpoint: String,
    key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            key,
            agent,
        }
    }

    pub fn from_env(timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok()?;
        Some(Self::new(endpoint, std::env::var(ENV_KEY).ok(), timeout))
    }

    fn body(call: &BackendCall<'_>) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": call.prompt})];
        content.extend(
            call.image_refs
                .iter()
                .map(|r| serde_json::json!({"type": "image_url", "image_url": {"url": r}})),
        );
        serde_json::json!({
            "model": call.model_id,
            "temperature": call.temperature,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn performs_network(&self) -> bool {
        true
    }

    fn call(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(Self::body(call))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}: {raw}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Refusal(format!("HTTP {status}: {raw}")));
        }
        let value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        let choice = &value["choices"][0];
        if choice["finish_reason"] == "content_filter"
            || choice["message"]["refusal"]
                .as_str()
                .is_some_and(|s| !s.is_empty())
        {
            return Err(BackendError::Refusal(raw));
        }
        choice["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport(format!("response without content: {raw}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    digest: String,
    text: String,
}

enum ResponseCache {
    Memory(Mutex<HashMap<String, String>>),
    Disk(PathBuf),
}

impl ResponseCache {
    fn entry_path(dir: &Path, digest: &str) -> PathBuf {
        dir.join(&digest[..2]).join(format!("{digest}.json"))
    }

    fn get(&self, digest: &str) -> Result<Option<String>, GatewayError> {
        match self {
            ResponseCache::Memory(map) => Ok(map.lock().unwrap().get(digest).cloned()),
            ResponseCache::Disk(dir) => {
                let path = Self::entry_path(dir, digest);
                match fs::read(&path) {
                    Ok(bytes) => match serde_json::from_slice::<CacheEntry>(&bytes) {
                        Ok(entry) if entry.digest == digest => Ok(Some(entry.text)),
                        _ => Ok(None),
                    },
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn put(&self, digest: &str, text: &str) -> Result<(), GatewayError> {
        match self {
            ResponseCache::Memory(map) => {
                map.lock()
                    .unwrap()
                    .insert(digest.to_string(), text.to_string());
                Ok(())
            }
            ResponseCache::Disk(dir) => {
                let path = Self::entry_path(dir, digest);
                let parent = path.parent().expect("entry has a parent");
                fs::create_dir_all(parent)?;
                let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
                serde_json::to_writer(
                    &mut tmp,
                    &CacheEntry {
                        digest: digest.to_string(),
                        text: text.to_string(),
                    },
                )
                .map_err(std::io::Error::other)?;
                tmp.flush()?;
                tmp.persist(&path).map_err(|e| e.error)?;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub model_id: String,
    pub temperature: f64,
    /// Upstream retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// `None` keeps the cache in memory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_id: "mock-video-llm".into(),
            temperature: 0.0,
            max_retries: 2,
            backoff_base_ms: 200,
            cache_dir: None,
        }
    }
}

pub struct ModelGateway {
    registry: TemplateRegistry,
    backend: Arc<dyn Backend>,
    cache: ResponseCache,
    config: GatewayConfig,
    upstream_calls: AtomicU64,
}

impl ModelGateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Self {
        let cache = match &config.cache_dir {
            Some(dir) => ResponseCache::Disk(dir.clone()),
            None => ResponseCache::Memory(Mutex::new(HashMap::new())),
        };
        Self {
            registry: TemplateRegistry::builtin().clone(),
            backend,
            cache,
            config,
            upstream_calls: AtomicU64::new(0),
        }
    }

    /// Gateway over a mock fixture with an in-memory cache and no backoff.
    pub fn mock(fixture: MockFixture) -> Result<Self, GatewayError> {
        let config = GatewayConfig {
            backoff_base_ms: 0,
            ..GatewayConfig::default()
        };
        Ok(Self::new(Arc::new(MockBackend::new(fixture)?), config))
    }

    pub fn with_registry(mut self, registry: TemplateRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn registry(&self) -> &TemplateRegistry {
        &self.registry
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of requests that reached the backend (cache misses, including retries).
    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::Relaxed)
    }

    pub fn render(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        let mut prompt = self
            .registry
            .render(&request.template_id, &request.bindings)?;
        if let Some(suffix) = &request.suffix {
            prompt.push('\n');
            prompt.push_str(suffix);
        }
        Ok(prompt)
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let started = Instant::now();
        let prompt = self.render(request)?;
        let model_id = if request.model_id.is_empty() {
            self.config.model_id.as_str()
        } else {
            request.model_id.as_str()
        };
        let digest = request_digest(model_id, &prompt, &request.image_refs, request.temperature);
        if let Some(text) = self.cache.get(&digest)? {
            return Ok(ModelResponse {
                text,
                cached: true,
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        let call = BackendCall {
            digest: &digest,
            prompt: &prompt,
            image_refs: &request.image_refs,
            model_id,
            temperature: request.temperature,
        };
        let attempts = 1 + self.config.max_retries;
        let mut last = String::new();
        for attempt in 0..attempts {
            self.upstream_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.call(&call) {
                Ok(text) => {
                    self.cache.put(&digest, &text)?;
                    return Ok(ModelResponse {
                        text,
                        cached: false,
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(BackendError::Transport(msg)) => {
                    last = msg;
                    if attempt + 1 < attempts && self.config.backoff_base_ms > 0 {
                        let wait = self
                            .config
                            .backoff_base_ms
                            .saturating_mul(1 << attempt.min(16));
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
                Err(BackendError::Refusal(raw)) => return Err(GatewayError::Refusal(raw)),
                Err(BackendError::NoFixture(d)) => return Err(GatewayError::NoFixture(d)),
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }

    /// Complete a request and return just the text.
    pub fn ask(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        self.complete(request).map(|r| r.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn builtin_registry_has_all_templates() {
        let reg = TemplateRegistry::builtin();
        for id in [
            "scene_narrative",
            "object_extract",
            "object_quantity",
            "object_mobility",
            "attribute_narrative",
            "attribute_extract",
            "relation_narrative",
            "triplet_extract",
            "verify_node",
            "verify_node_confirm",
            "verify_relation",
            "verify_relation_confirm",
            "frame_identity",
            "action_describe",
            "action_extract",
            "predicate_extract",
            "clip_identity",
            "event_describe",
            "qra_refine",
        ] {
            assert!(reg.get(id).is_ok(), "{id}");
        }
        assert_eq!(reg.get("scene_narrative").unwrap().visual, Visual::Image);
        assert_eq!(reg.get("object_mobility").unwrap().visual, Visual::Video);
    }

    #[test]
    fn object_extract_carries_sentence_in_final_question() {
        let sentence = "A man and a woman carring a red box are on a dock";
        let text = render_prompt("object_extract", &bindings(&[("sentence", sentence)])).unwrap();
        let last_question = text.rsplit("Question:").next().unwrap();
        assert!(last_question.contains(sentence));
        assert!(text.contains("Answer: Meaningful objects are [children, toys, yard]."));
    }

    #[test]
    fn triplet_extract_targets_given_object() {
        let text = render_prompt(
            "triplet_extract",
            &bindings(&[
                ("object", "man"),
                (
                    "sentence",
                    "The man is standing at the end of a dock, waiting for the woman",
                ),
            ]),
        )
        .unwrap();
        let last_question = text.rsplit("Question:").next().unwrap();
        assert!(last_question.contains("extract meaningful triplets for the given object man"));
    }

    #[test]
    fn missing_binding_named() {
        let err = render_prompt("object_extract", &BTreeMap::new()).unwrap_err();
        assert_eq!(err.to_string(), "missing-binding:sentence");
        assert!(matches!(
            render_prompt("nope", &BTreeMap::new()),
            Err(GatewayError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn refine_prompt_keeps_literal_json_braces() {
        let text = render_prompt(
            "qra_refine",
            &bindings(&[("q", "Q?"), ("r", "R."), ("a", "A")]),
        )
        .unwrap();
        assert!(text.contains(r#"{"Q": "question", "R": "rationale", "A": "answer"}"#));
        assert!(
            text.contains(r#"I have the question "Q?", the rationale "R.", and the answer "A""#)
        );
    }

    #[test]
    fn digest_depends_on_every_component() {
        let base = request_digest("m", "p", &["i".into()], 0.0);
        assert_eq!(base, request_digest("m", "p", &["i".into()], 0.0));
        assert_ne!(base, request_digest("m2", "p", &["i".into()], 0.0));
        assert_ne!(base, request_digest("m", "p2", &["i".into()], 0.0));
        assert_ne!(base, request_digest("m", "p", &[], 0.0));
        assert_ne!(base, request_digest("m", "p", &["i".into()], 0.5));
    }

    #[test]
    fn second_identical_request_is_cached() {
        let fixture = MockFixture {
            records: vec![MockRecordSpec {
                pattern: Some("Describe the keyframe".into()),
                response: "A dock.".into(),
                ..Default::default()
            }],
            default: None,
        };
        let gw = ModelGateway::mock(fixture).unwrap();
        let req = ModelRequest::new("scene_narrative").image("v#frame=0");
        let first = gw.complete(&req).unwrap();
        let second = gw.complete(&req).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(second.text, "A dock.");
        assert_eq!(gw.upstream_calls(), 1);
    }

    #[test]
    fn mock_digest_record_answers() {
        let gw_probe = ModelGateway::mock(MockFixture::default()).unwrap();
        let req = ModelRequest::new("object_mobility")
            .bind("object", "man")
            .image("demo#frames=0-24");
        let prompt = gw_probe.render(&req).unwrap();
        let digest = request_digest("mock-video-llm", &prompt, &req.image_refs, 0.0);
        let gw = ModelGateway::mock(MockFixture {
            records: vec![MockRecordSpec {
                digest: Some(digest),
                response: "Dynamic".into(),
                ..Default::default()
            }],
            default: None,
        })
        .unwrap();
        assert_eq!(gw.complete(&req).unwrap().text, "Dynamic");
        assert!(!gw.backend().performs_network());
    }

    #[test]
    fn mock_captures_and_image_filter() {
        let gw = ModelGateway::mock(MockFixture {
            records: vec![
                MockRecordSpec {
                    pattern: Some(r"Given the object: (\w+), determine".into()),
                    image: Some("frames=24-".into()),
                    response: "Static".into(),
                    ..Default::default()
                },
                MockRecordSpec {
                    pattern: Some(r"Given the object: (\w+), determine".into()),
                    response: "echo:$1".into(),
                    ..Default::default()
                },
            ],
            default: None,
        })
        .unwrap();
        let a = ModelRequest::new("object_mobility")
            .bind("object", "cat")
            .image("v#frames=0-24");
        let b = ModelRequest::new("object_mobility")
            .bind("object", "cat")
            .image("v#frames=24-40");
        assert_eq!(gw.ask(&a).unwrap(), "echo:cat");
        assert_eq!(gw.ask(&b).unwrap(), "Static");
        let c = ModelRequest::new("scene_narrative");
        assert!(matches!(gw.ask(&c), Err(GatewayError::NoFixture(_))));
    }

    struct Flaky {
        failures: u64,
        calls: AtomicU64,
    }

    impl Backend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn performs_network(&self) -> bool {
            false
        }
        fn call(&self, _: &BackendCall<'_>) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::Relaxed);
            if n < self.failures {
                Err(BackendError::Transport("connection reset".into()))
            } else {
                Ok("Yes".into())
            }
        }
    }

    fn flaky_gateway(failures: u64, retries: u32) -> ModelGateway {
        ModelGateway::new(
            Arc::new(Flaky {
                failures,
                calls: AtomicU64::new(0),
            }),
            GatewayConfig {
                max_retries: retries,
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    #[test]
    fn retries_then_succeeds() {
        let gw = flaky_gateway(2, 2);
        assert_eq!(
            gw.ask(&ModelRequest::new("scene_narrative")).unwrap(),
            "Yes"
        );
        assert_eq!(gw.upstream_calls(), 3);
    }

    #[test]
    fn transport_error_after_exhausting_retries() {
        let gw = flaky_gateway(3, 2);
        match gw.complete(&ModelRequest::new("scene_narrative")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disk_cache_survives_gateway_restart() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = MockFixture {
            records: vec![],
            default: Some("No".into()),
        };
        let config = GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        };
        let req = ModelRequest::new("verify_node").bind("object", "box");
        let gw = ModelGateway::new(
            Arc::new(MockBackend::new(fixture.clone()).unwrap()),
            config.clone(),
        );
        assert!(!gw.complete(&req).unwrap().cached);
        let gw2 = ModelGateway::new(Arc::new(MockBackend::new(fixture).unwrap()), config);
        let again = gw2.complete(&req).unwrap();
        assert!(again.cached);
        assert_eq!(again.text, "No");
        assert_eq!(gw2.upstream_calls(), 0);
    }
}
