//! HTTP gateways for OpenAI-compatible chat and embedding endpoints and a
//! JSON speech endpoint.

use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{AudioClip, ChatGateway, ChatMessage, ChatRequest, Embedder, ProviderError, SpeechSynthesizer};
use crate::forge::CheckReport;
use crate::script::{Block, GuidanceScript};

/// Transport-error retry schedule: `retries` extra attempts, delay doubling
/// from `base_delay`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_delay: Duration::from_millis(250) }
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn join_url(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}/{path}")
    }
}

fn is_transport(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::Io(_)
            | ureq::Error::ConnectionFailed
            | ureq::Error::HostNotFound
            | ureq::Error::Timeout(_)
    )
}

/// POST JSON, retrying transport failures only. Returns the raw response.
fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
    retry: RetryPolicy,
) -> Result<ureq::http::Response<ureq::Body>, ProviderError> {
    let mut delay = retry.base_delay;
    let mut attempt = 0;
    loop {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let code = resp.status().as_u16();
                if !(200..300).contains(&code) {
                    let body = resp.body_mut().read_to_string().unwrap_or_default();
                    return Err(ProviderError::Status { code, body });
                }
                return Ok(resp);
            }
            Err(e) if is_transport(&e) && attempt < retry.retries => {
                tracing::warn!(%url, attempt, error = %e, "transport error, retrying");
                thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            Err(e) if is_transport(&e) => return Err(ProviderError::Unreachable(e.to_string())),
            Err(e) => return Err(ProviderError::Decode(e.to_string())),
        }
    }
}

pub struct LiveChat {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl LiveChat {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            agent: agent(),
            url: join_url(&endpoint.into(), "chat/completions"),
            api_key,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatGateway for LiveChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatMessage, ProviderError> {
        request.validate()?;
        let body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut resp = post_json(&self.agent, &self.url, self.api_key.as_deref(), &body, self.retry)?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Decode(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(ChatMessage::assistant(content))
    }
}

pub struct LiveEmbedder {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    dim: usize,
    pub model: String,
    pub retry: RetryPolicy,
}

impl LiveEmbedder {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        Self {
            agent: agent(),
            url: join_url(&endpoint.into(), "embeddings"),
            api_key,
            dim,
            model: "text-embedding".into(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for LiveEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<crate::Embedding, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let body = json!({ "model": self.model, "input": text });
        let mut resp = post_json(&self.agent, &self.url, self.api_key.as_deref(), &body, self.retry)?;
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Decode(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or(ProviderError::EmptyResponse)?;
        if values.len() != self.dim {
            return Err(ProviderError::Decode(format!(
                "expected dimension {}, got {}",
                self.dim,
                values.len()
            )));
        }
        Ok(crate::Embedding::new(values))
    }
}

/// Speech endpoint taking `{"voice_id", "text"}` where pauses are rendered as
/// `<break time="Ns"/>` markers. A `{voice_id}` placeholder in the endpoint
/// is substituted.
pub struct LiveSpeech {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl LiveSpeech {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            agent: agent(),
            endpoint: endpoint.into(),
            api_key,
            retry: RetryPolicy::default(),
        }
    }
}

/// Narration text with pause markers, following the first option of any interaction.
pub fn speech_markup(script: &GuidanceScript) -> String {
    script
        .linearize(&[])
        .iter()
        .map(|b| match b {
            Block::Narration { text } => text.clone(),
            Block::Pause { seconds } => format!("<break time=\"{seconds}s\"/>"),
            Block::Interaction(_) => String::new(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl SpeechSynthesizer for LiveSpeech {
    fn synthesize(
        &self,
        script: &GuidanceScript,
        report: &CheckReport,
        voice_id: &str,
    ) -> Result<AudioClip, ProviderError> {
        if !report.passed {
            return Err(ProviderError::UncheckedScript);
        }
        let url = self.endpoint.replace("{voice_id}", voice_id);
        let body = json!({ "voice_id": voice_id, "text": speech_markup(script) });
        let mut resp = post_json(&self.agent, &url, self.api_key.as_deref(), &body, self.retry)?;
        let mime = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("audio/mpeg")
            .to_string();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| ProviderError::Decode(e.to_string()))?;
        if bytes.is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(AudioClip { bytes, mime, duration_s: script.predicted_duration() })
    }
}
