#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::Mutex;
use sati_core::providers::{ChatGateway, ChatMessage, ChatRequest, MockChat, ProviderError, Providers};
use sati_core::session::{
    Clock, EventLog, InputChoices, ManualClock, ServiceConfig, ServiceParts, SessionService,
};
use sati_core::personalization::Mood;
use sati_core::forge::GuidanceLevel;
use sati_core::VectorIndex;

/// Mock chat that keeps every request it served.
#[derive(Default)]
pub struct Recorder {
    inner: MockChat,
    pub requests: Mutex<Vec<ChatRequest>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self { inner: MockChat::with_default_table(), requests: Mutex::new(Vec::new()) }
    }

    pub fn tagged(&self, prefix: &str) -> Vec<ChatRequest> {
        self.requests
            .lock()
            .iter()
            .filter(|r| r.tag.as_deref().is_some_and(|t| t.starts_with(prefix)))
            .cloned()
            .collect()
    }

    pub fn count(&self) -> usize {
        self.requests.lock().len()
    }
}

impl ChatGateway for Recorder {
    fn chat(&self, request: &ChatRequest) -> Result<ChatMessage, ProviderError> {
        self.requests.lock().push(request.clone());
        self.inner.chat(request)
    }
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 4, 1, 12, 0, 0).unwrap()
}

pub struct Harness {
    pub svc: SessionService,
    pub chat: Arc<Recorder>,
    pub clock: Arc<ManualClock>,
}

pub fn harness_with_log(log: EventLog) -> Harness {
    let chat = Arc::new(Recorder::new());
    let clock = Arc::new(ManualClock::new(t0()));
    let mut providers = Providers::mock();
    providers.chat = chat.clone();
    let index = Arc::new(VectorIndex::new(providers.embedder.dim()));
    let parts = ServiceParts::new(providers, index, clock.clone() as Arc<dyn Clock>).unwrap();
    let svc = SessionService::new(parts, ServiceConfig::default(), log).unwrap();
    Harness { svc, chat, clock }
}

pub fn harness() -> Harness {
    harness_with_log(EventLog::memory())
}

pub fn choices(goal: &str, duration_min: u32) -> InputChoices {
    InputChoices {
        mood: Mood::Neutral,
        goal: goal.into(),
        duration_min,
        technique: "Noting".into(),
        guidance_level: GuidanceLevel::More,
    }
}
