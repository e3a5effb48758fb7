//! Deterministic offline gateways.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    AudioClip, ChatGateway, ChatMessage, ChatRequest, Embedder, ProviderError, SpeechSynthesizer,
};
use crate::forge::CheckReport;
use crate::script::GuidanceScript;
use crate::text;

const DEFAULT_TABLE: &str = include_str!("../../fixtures/mock_responses.json");

pub const MOCK_EMBED_DIM: usize = 256;

/// Scripted chat backend: exact tag lookup first, then a templated fallback
/// chosen by tag family. Output is a pure function of the request.
#[derive(Debug, Default)]
pub struct MockChat {
    table: HashMap<String, String>,
    calls: AtomicUsize,
}

impl MockChat {
    pub fn new(table: HashMap<String, String>) -> Self {
        Self { table, calls: AtomicUsize::new(0) }
    }

    pub fn with_default_table() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("shipped mock table is valid")
    }

    pub fn from_json(raw: &str) -> Result<Self, ProviderError> {
        let table: HashMap<String, String> =
            serde_json::from_str(raw).map_err(|e| ProviderError::Decode(e.to_string()))?;
        Ok(Self::new(table))
    }

    pub fn insert(&mut self, key: impl Into<String>, response: impl Into<String>) {
        self.table.insert(key.into(), response.into());
    }

    /// Number of chat calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let tag = req.tag.as_deref().unwrap_or("");
        if let Some(hit) = self.table.get(tag) {
            return hit.clone();
        }
        let user = req.last_user().unwrap_or("");
        let system = req.system_prompt().unwrap_or("");
        if tag.starts_with("personalize") {
            return text::markdown_section(user, "TEMPLATE").unwrap_or(user).to_string();
        }
        if tag.starts_with("correct-definition") {
            let field = |name: &str| {
                user.lines()
                    .find_map(|l| l.strip_prefix(name))
                    .map(str::trim)
                    .unwrap_or("")
            };
            let def = field("DEFINITION:");
            let mut chars = def.chars();
            let def = match chars.next() {
                Some(c) => c.to_lowercase().chain(chars).collect::<String>(),
                None => String::new(),
            };
            return format!("{} means {}", field("TERM:"), def);
        }
        if tag.starts_with("reflect") {
            let ctx = text::markdown_section(system, "CONTEXT").unwrap_or("");
            return format!("{ctx} What feels most important to bring into today's practice?")
                .trim()
                .to_string();
        }
        if tag.starts_with("judge-definition") {
            return "CONSISTENT".into();
        }
        if tag.starts_with("summarize") {
            let s = text::markdown_section(user, "SESSION").unwrap_or(user);
            return text::truncate_chars(s, 500).to_string();
        }
        format!("Thank you for sharing. {}", text::truncate_chars(user, 200))
            .trim()
            .to_string()
    }
}

impl ChatGateway for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatMessage, ProviderError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.respond(request);
        if out.trim().is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(ChatMessage::assistant(out))
    }
}

/// Bag-of-tokens embedder: FNV-1a token hashes folded into a fixed number of
/// buckets, then L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(MOCK_EMBED_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, input: &str) -> Result<crate::Embedding, ProviderError> {
        let mut values = vec![0.0f64; self.dim];
        for tok in text::tokens(input) {
            let bucket = (text::fnv1a(tok.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ProviderError::EmptyText);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(crate::Embedding::new(values))
    }
}

/// Emits silent 8-bit mono WAV whose length equals the script's predicted duration.
#[derive(Debug, Clone)]
pub struct MockSpeech {
    pub sample_rate: u32,
}

impl Default for MockSpeech {
    fn default() -> Self {
        Self { sample_rate: 8_000 }
    }
}

impl SpeechSynthesizer for MockSpeech {
    fn synthesize(
        &self,
        script: &GuidanceScript,
        report: &CheckReport,
        _voice_id: &str,
    ) -> Result<AudioClip, ProviderError> {
        if !report.passed {
            return Err(ProviderError::UncheckedScript);
        }
        let duration_s = script.predicted_duration();
        let samples = (duration_s * f64::from(self.sample_rate)).round() as u32;
        Ok(AudioClip {
            bytes: silent_wav(self.sample_rate, samples),
            mime: "audio/wav".into(),
            duration_s,
        })
    }
}

fn silent_wav(rate: u32, samples: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + samples as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + samples).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes()); // byte rate
    out.extend_from_slice(&1u16.to_le_bytes()); // block align
    out.extend_from_slice(&8u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&samples.to_le_bytes());
    out.resize(44 + samples as usize, 0x80);
    out
}
