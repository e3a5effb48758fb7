//! Provider-agnostic gateways for chat completion, text embedding and speech.
//!
//! Every other module talks to these traits only. Each gateway has a live
//! implementation speaking an OpenAI-compatible JSON wire format and a
//! deterministic mock used by tests and offline runs.

mod live;
mod mock;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::CheckReport;
use crate::scalar::Scalar;
use crate::script::GuidanceScript;

pub use live::{LiveChat, LiveEmbedder, LiveSpeech, RetryPolicy};
pub use mock::{HashEmbedder, MockChat, MockSpeech, MOCK_EMBED_DIM};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("provider returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("script has not passed the checkers")]
    UncheckedScript,
    #[error("provider not configured: {0}")]
    NotConfigured(String),
}

impl ProviderError {
    /// Errors worth retrying at a higher level.
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Unreachable(_) | ProviderError::EmptyResponse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Routing key for scripted mock responses; never sent over the wire.
    #[serde(skip)]
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.7,
            max_tokens: 2048,
            tag: None,
        }
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidRequest(m.to_string()));
        if self.messages.is_empty() {
            return bad("messages must not be empty");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        let body = match self.messages[0].role {
            Role::System => &self.messages[1..],
            _ => &self.messages[..],
        };
        let mut prev: Option<Role> = None;
        for m in body {
            match m.role {
                Role::System => return bad("system message only allowed first"),
                r if Some(r) == prev => return bad("user and assistant turns must alternate"),
                r => prev = Some(r),
            }
            if m.content.trim().is_empty() {
                return bad("user and assistant messages need content");
            }
        }
        if body.is_empty() {
            return bad("at least one user or assistant message required");
        }
        Ok(())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }
}

/// Fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<S: Scalar> {
    #[serde(bound = "")]
    pub values: Vec<S>,
}

impl<S: Scalar> EmbeddingVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> S {
        self.values.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> S {
        crate::vector_index::cosine(&self.values, &other.values)
    }
}

/// Audio payload produced by a speech gateway.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub mime: String,
    pub duration_s: f64,
}

impl fmt::Debug for AudioClip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AudioClip")
            .field("bytes", &self.bytes.len())
            .field("mime", &self.mime)
            .field("duration_s", &self.duration_s)
            .finish()
    }
}

pub trait ChatGateway: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatMessage, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<crate::Embedding, ProviderError>;
}

pub trait SpeechSynthesizer: Send + Sync {
    /// Render a checked script. Narration becomes speech, pauses become silence.
    fn synthesize(
        &self,
        script: &GuidanceScript,
        report: &CheckReport,
        voice_id: &str,
    ) -> Result<AudioClip, ProviderError>;
}

impl<T: ChatGateway + ?Sized> ChatGateway for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatMessage, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<crate::Embedding, ProviderError> {
        (**self).embed(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Live,
    Mock,
}

/// Gateway configuration, normally read from the environment.
#[derive(Debug, Clone)]
pub struct ProviderSettings {
    pub mode: ProviderMode,
    pub chat_endpoint: Option<String>,
    pub chat_api_key: Option<String>,
    pub chat_model_id: String,
    pub embed_endpoint: Option<String>,
    pub embed_dim: usize,
    pub tts_endpoint: Option<String>,
    pub tts_voice_id: String,
    pub mock_table: Option<String>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Mock,
            chat_endpoint: None,
            chat_api_key: None,
            chat_model_id: "guide-mini".into(),
            embed_endpoint: None,
            embed_dim: MOCK_EMBED_DIM,
            tts_endpoint: None,
            tts_voice_id: "default".into(),
            mock_table: None,
        }
    }
}

impl ProviderSettings {
    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        let mode = match get("PROVIDER_MODE").as_deref() {
            None | Some("mock") => ProviderMode::Mock,
            Some("live") => ProviderMode::Live,
            Some(other) => {
                return Err(ProviderError::NotConfigured(format!("PROVIDER_MODE={other}")))
            }
        };
        let mut s = Self {
            mode,
            chat_endpoint: get("CHAT_ENDPOINT"),
            chat_api_key: get("CHAT_API_KEY"),
            ..Self::default()
        };
        if let Some(m) = get("CHAT_MODEL_ID") {
            s.chat_model_id = m;
        }
        s.embed_endpoint = get("EMBED_ENDPOINT");
        if let Some(d) = get("EMBED_DIM") {
            s.embed_dim = d
                .parse()
                .map_err(|_| ProviderError::NotConfigured(format!("EMBED_DIM={d}")))?;
        } else if s.mode == ProviderMode::Live {
            s.embed_dim = 1536;
        }
        s.tts_endpoint = get("TTS_ENDPOINT");
        if let Some(v) = get("TTS_VOICE_ID") {
            s.tts_voice_id = v;
        }
        s.mock_table = get("MOCK_SCRIPT_TABLE");
        Ok(s)
    }
}

/// The three gateways bundled together.
#[derive(Clone)]
pub struct Providers {
    pub mode: ProviderMode,
    pub chat: Arc<dyn ChatGateway>,
    pub embedder: Arc<dyn Embedder>,
    pub speech: Arc<dyn SpeechSynthesizer>,
    pub model_id: String,
    pub voice_id: String,
}

impl Providers {
    pub fn mock() -> Self {
        Self {
            mode: ProviderMode::Mock,
            chat: Arc::new(MockChat::with_default_table()),
            embedder: Arc::new(HashEmbedder::default()),
            speech: Arc::new(MockSpeech::default()),
            model_id: ProviderSettings::default().chat_model_id,
            voice_id: "default".into(),
        }
    }

    pub fn from_settings(s: &ProviderSettings) -> Result<Self, ProviderError> {
        match s.mode {
            ProviderMode::Mock => {
                let chat = match &s.mock_table {
                    Some(path) => {
                        let raw = std::fs::read_to_string(path)
                            .map_err(|e| ProviderError::NotConfigured(format!("{path}: {e}")))?;
                        MockChat::from_json(&raw)?
                    }
                    None => MockChat::with_default_table(),
                };
                Ok(Self {
                    mode: ProviderMode::Mock,
                    chat: Arc::new(chat),
                    embedder: Arc::new(HashEmbedder::default()),
                    speech: Arc::new(MockSpeech::default()),
                    model_id: s.chat_model_id.clone(),
                    voice_id: s.tts_voice_id.clone(),
                })
            }
            ProviderMode::Live => {
                let need = |v: &Option<String>, name: &str| {
                    v.clone().ok_or_else(|| ProviderError::NotConfigured(name.to_string()))
                };
                let chat = LiveChat::new(need(&s.chat_endpoint, "CHAT_ENDPOINT")?, s.chat_api_key.clone());
                let embed_ep = s.embed_endpoint.clone().or_else(|| s.chat_endpoint.clone());
                let embedder = LiveEmbedder::new(
                    need(&embed_ep, "EMBED_ENDPOINT")?,
                    s.chat_api_key.clone(),
                    s.embed_dim,
                );
                let speech = LiveSpeech::new(need(&s.tts_endpoint, "TTS_ENDPOINT")?, s.chat_api_key.clone());
                Ok(Self {
                    mode: ProviderMode::Live,
                    chat: Arc::new(chat),
                    embedder: Arc::new(embedder),
                    speech: Arc::new(speech),
                    model_id: s.chat_model_id.clone(),
                    voice_id: s.tts_voice_id.clone(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let ok = ChatRequest::new(
            "m",
            vec![ChatMessage::system("s"), ChatMessage::user("hi"), ChatMessage::assistant("yo")],
        );
        assert!(ok.validate().is_ok());

        let twice = ChatRequest::new("m", vec![ChatMessage::user("a"), ChatMessage::user("b")]);
        assert!(twice.validate().is_err());

        let late_system = ChatRequest::new("m", vec![ChatMessage::user("a"), ChatMessage::system("b")]);
        assert!(late_system.validate().is_err());

        let empty = ChatRequest::new("m", vec![]);
        assert!(empty.validate().is_err());

        let blank = ChatRequest::new("m", vec![ChatMessage::user("  ")]);
        assert!(blank.validate().is_err());

        let mut hot = ChatRequest::new("m", vec![ChatMessage::user("a")]);
        hot.temperature = 2.5;
        assert!(hot.validate().is_err());
    }

    #[test]
    fn tag_is_not_serialized() {
        let r = ChatRequest::new("m", vec![ChatMessage::user("a")]).tagged("k");
        let v = serde_json::to_value(&r).unwrap();
        assert!(v.get("tag").is_none());
    }

    #[test]
    fn settings_from_lookup() {
        let env = |k: &str| match k {
            "PROVIDER_MODE" => Some("live".to_string()),
            "CHAT_ENDPOINT" => Some("http://x".to_string()),
            "CHAT_MODEL_ID" => Some("tuned".to_string()),
            _ => None,
        };
        let s = ProviderSettings::from_lookup(env).unwrap();
        assert_eq!(s.mode, ProviderMode::Live);
        assert_eq!(s.chat_model_id, "tuned");
        // TTS endpoint missing
        assert!(matches!(
            Providers::from_settings(&s),
            Err(ProviderError::NotConfigured(_))
        ));
        let bad = ProviderSettings::from_lookup(|k| (k == "PROVIDER_MODE").then(|| "weird".into()));
        assert!(bad.is_err());
    }
}
