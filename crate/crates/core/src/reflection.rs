//! Pre-session reflective chat in three explicit modes: the present state,
//! past sessions (retrieved from the user's stored summaries) and
//! terminology (grounded in the knowledge base).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_kb::{normalize_term, ConceptEntry, KnowledgeBase};
use crate::personalization::{Mood, SessionInputs};
use crate::providers::{ChatGateway, ChatMessage, ChatRequest, Embedder, ProviderError, Role};
use crate::text;
use crate::vector_index::{IndexError, MetadataFilter, Namespace, VectorRecord};
use crate::{IndexHit, VectorIndex};

/// User turns allowed in one reflection.
pub const TURN_CAP: usize = 12;
/// Past sessions retrieved per turn.
pub const PAST_K: usize = 3;
/// Minimum similarity for a semantic concept match.
pub const CONCEPT_FLOOR: f64 = 0.3;
pub const SUMMARY_MAX_CHARS: usize = 500;

pub const FIRST_SESSION_CONTEXT: &str =
    "This is your first session with me, so there are no past sessions to look back on yet.";

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("reflection is closed")]
    Closed,
    #[error("reflection already closed")]
    AlreadyClosed,
    #[error("reflection reached its limit of {0} turns")]
    TurnLimit(usize),
    #[error("empty message")]
    EmptyMessage,
    #[error("session is not completed")]
    IncompleteSession,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectionMode {
    Present,
    Past,
    Terms,
}

impl ReflectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReflectionMode::Present => "present",
            ReflectionMode::Past => "past",
            ReflectionMode::Terms => "terms",
        }
    }
}

impl fmt::Display for ReflectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReflectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "present" => Ok(ReflectionMode::Present),
            "past" => Ok(ReflectionMode::Past),
            "terms" => Ok(ReflectionMode::Terms),
            other => Err(format!("unknown reflection mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSegment {
    pub mode: ReflectionMode,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionTranscript {
    pub session_id: String,
    pub mode_segments: Vec<ModeSegment>,
    pub skipped: bool,
    pub ended_by_user: bool,
    pub closed: bool,
}

impl ReflectionTranscript {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            mode_segments: Vec::new(),
            skipped: false,
            ended_by_user: false,
            closed: false,
        }
    }

    pub fn is_open(&self) -> bool {
        !self.closed
    }

    pub fn user_turns(&self) -> usize {
        self.mode_segments
            .iter()
            .flat_map(|s| &s.messages)
            .filter(|m| m.role == Role::User)
            .count()
    }

    /// Plain-text rendering used in prompts, one line per message.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for seg in &self.mode_segments {
            out.push_str(&format!("[{}]\n", seg.mode));
            for m in &seg.messages {
                let who = match m.role {
                    Role::User => "User",
                    Role::Assistant => "Guide",
                    Role::System => "System",
                };
                out.push_str(&format!("{who}: {}\n", m.content));
            }
        }
        out.trim_end().to_string()
    }

    /// Mark skipped: segments are dropped and the transcript is closed.
    pub fn skip(&mut self) {
        self.skipped = true;
        self.mode_segments.clear();
        self.closed = true;
        self.ended_by_user = true;
    }

    pub fn close(&mut self) -> Result<(), ReflectionError> {
        if self.closed {
            return Err(ReflectionError::AlreadyClosed);
        }
        self.closed = true;
        self.ended_by_user = true;
        Ok(())
    }

    fn push(&mut self, mode: ReflectionMode, msg: ChatMessage) {
        match self.mode_segments.last_mut() {
            Some(seg) if seg.mode == mode => seg.messages.push(msg),
            _ => self.mode_segments.push(ModeSegment { mode, messages: vec![msg] }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub mode: ReflectionMode,
    pub reply: ChatMessage,
    /// Ids of the retrieved session summaries or concepts.
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub user_id: String,
    pub summary_text: String,
    pub goal: String,
    pub mood: Mood,
    pub created_at: DateTime<Utc>,
}

/// What summarization needs to know about a session.
#[derive(Debug, Clone)]
pub struct SummaryInput<'a> {
    pub session_id: &'a str,
    pub user_id: &'a str,
    pub completed: bool,
    pub goal: &'a str,
    pub mood: Mood,
    pub technique: &'a str,
    pub feedback: Option<&'a str>,
    pub transcript: Option<&'a ReflectionTranscript>,
    pub at: DateTime<Utc>,
}

const GUIDE_ROLE: &str = "You are a warm, concise meditation guide trained in Unified Mindfulness. \
You help the user reflect before a session. Ask at most one question per reply. Use only the \
context below for facts about the user's past or about terminology.";

const SUMMARY_SYSTEM: &str = "Summarize this meditation session for the user's next visit in at \
most three short sentences. Mention the goal, the technique and anything the user said they want \
to keep working on.";

fn mood_word(m: Mood) -> &'static str {
    match m {
        Mood::Positive => "good",
        Mood::Neutral => "okay",
        Mood::Negative => "low",
    }
}

/// Text embedded to look up related past sessions.
pub fn past_query(inputs: &SessionInputs, message: &str) -> String {
    format!("{} {} {}", message, inputs.goal, inputs.mood)
}

pub struct ReflectionEngine {
    kb: Arc<KnowledgeBase>,
    chat: Arc<dyn ChatGateway>,
    embedder: Arc<dyn Embedder>,
    index: Arc<VectorIndex>,
    model_id: String,
}

impl fmt::Debug for ReflectionEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReflectionEngine").field("model_id", &self.model_id).finish()
    }
}

impl ReflectionEngine {
    /// Builds the engine and indexes every KB concept in the concepts namespace.
    pub fn new(
        kb: Arc<KnowledgeBase>,
        chat: Arc<dyn ChatGateway>,
        embedder: Arc<dyn Embedder>,
        index: Arc<VectorIndex>,
        model_id: impl Into<String>,
    ) -> Result<Self, ReflectionError> {
        for c in kb.concepts() {
            index.upsert(VectorRecord {
                id: c.id.clone(),
                namespace: Namespace::Concepts,
                vector: embedder.embed(&format!("{}. {}", c.name, c.definition))?,
                metadata: BTreeMap::new(),
                payload: c.definition.clone(),
            })?;
        }
        Ok(Self { kb, chat, embedder, index, model_id: model_id.into() })
    }

    fn ask(&self, tag: &str, context: &str, history: &[ChatMessage], user: Option<&str>) -> Result<ChatMessage, ReflectionError> {
        let mut messages = vec![ChatMessage::system(format!("{GUIDE_ROLE}\n\n## CONTEXT\n{context}"))];
        messages.extend(history.iter().cloned());
        if let Some(u) = user {
            messages.push(ChatMessage::user(u));
        }
        if messages.len() == 1 {
            messages.push(ChatMessage::user("I'm ready to reflect before my session."));
        }
        let req = ChatRequest::new(self.model_id.clone(), messages).tagged(tag);
        Ok(self.chat.chat(&req)?)
    }

    /// Start in present mode with an opener conditioned on mood and goal.
    pub fn open(&self, session_id: &str, inputs: &SessionInputs) -> Result<(ChatMessage, ReflectionTranscript), ReflectionError> {
        let context = format!(
            "You mentioned feeling {} today and wanting to work on {}.",
            mood_word(inputs.mood),
            inputs.goal
        );
        let opener = self.ask(&format!("reflect-present-{}", inputs.mood), &context, &[], None)?;
        let mut t = ReflectionTranscript::new(session_id);
        t.push(ReflectionMode::Present, opener.clone());
        Ok((opener, t))
    }

    pub fn turn(
        &self,
        t: &mut ReflectionTranscript,
        inputs: &SessionInputs,
        message: &str,
        mode: ReflectionMode,
    ) -> Result<TurnReply, ReflectionError> {
        if t.closed {
            return Err(ReflectionError::Closed);
        }
        if message.trim().is_empty() {
            return Err(ReflectionError::EmptyMessage);
        }
        if t.user_turns() >= TURN_CAP {
            return Err(ReflectionError::TurnLimit(TURN_CAP));
        }
        let (context, retrieved) = match mode {
            ReflectionMode::Present => (
                format!(
                    "You mentioned feeling {} today and wanting to work on {}.",
                    mood_word(inputs.mood),
                    inputs.goal
                ),
                Vec::new(),
            ),
            ReflectionMode::Past => {
                let hits = self.related(&inputs.user_id, &past_query(inputs, message), PAST_K)?;
                if hits.is_empty() {
                    (FIRST_SESSION_CONTEXT.to_string(), Vec::new())
                } else {
                    let lines: Vec<String> = hits.iter().map(|h| h.payload.clone()).collect();
                    (
                        format!("From your earlier sessions: {}", lines.join(" | ")),
                        hits.into_iter().map(|h| h.record_id).collect(),
                    )
                }
            }
            ReflectionMode::Terms => match self.find_concept(message)? {
                Some(c) => (format!("{}: {}", c.name, c.definition), vec![c.id.clone()]),
                None => (
                    "That word does not appear in the Unified Mindfulness glossary I know, so I can only offer general guidance.".into(),
                    Vec::new(),
                ),
            },
        };
        let history: Vec<ChatMessage> = match t.mode_segments.last() {
            Some(seg) if seg.mode == mode => seg.messages.clone(),
            _ => Vec::new(),
        };
        let reply = self.ask(&format!("reflect-{mode}"), &context, &history, Some(message))?;
        t.push(mode, ChatMessage::user(message));
        t.push(mode, reply.clone());
        Ok(TurnReply { mode, reply, retrieved })
    }

    /// Exact or alias mention of a KB term, else the nearest concept above the floor.
    pub fn find_concept(&self, message: &str) -> Result<Option<&ConceptEntry>, ReflectionError> {
        let padded = format!(" {} ", normalize_term(message));
        let mut terms: Vec<(&str, &ConceptEntry)> = self.kb.terms().collect();
        terms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
        if let Some((_, c)) = terms.into_iter().find(|(t, _)| padded.contains(&format!(" {t} "))) {
            return Ok(Some(c));
        }
        let q = match self.embedder.embed(message) {
            Ok(q) => q,
            Err(ProviderError::EmptyText) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let hits = self.index.query(Namespace::Concepts, &q, 1, &MetadataFilter::any())?;
        Ok(hits
            .into_iter()
            .find(|h| h.similarity >= CONCEPT_FLOOR)
            .and_then(|h| self.kb.concept(&h.record_id)))
    }

    /// Top-`k` stored summaries of this user's sessions for a query text.
    pub fn related(&self, user_id: &str, query: &str, k: usize) -> Result<Vec<IndexHit>, ReflectionError> {
        let q = match self.embedder.embed(query) {
            Ok(q) => q,
            Err(ProviderError::EmptyText) => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        Ok(self.index.query(Namespace::Sessions, &q, k, &MetadataFilter::any().eq("user_id", user_id))?)
    }

    /// Summarize a completed session and store it in the sessions namespace.
    pub fn summarize(&self, input: &SummaryInput<'_>) -> Result<SessionSummary, ReflectionError> {
        if !input.completed {
            return Err(ReflectionError::IncompleteSession);
        }
        let technique = self
            .kb
            .resolve_technique(input.technique)
            .map_or(input.technique, |c| c.name.as_str());
        let feedback = input
            .feedback
            .and_then(|f| text::sentences(f).into_iter().next())
            .unwrap_or("none");
        let extract = format!(
            "Goal: {}. Technique: {}. Mood: {}. Feedback: {}",
            input.goal, technique, input.mood, feedback
        );
        let mut user = format!("## SESSION\n{extract}");
        if let Some(t) = input.transcript.filter(|t| !t.mode_segments.is_empty()) {
            user.push_str(&format!("\n\n## TRANSCRIPT\n{}", t.text()));
        }
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::system(SUMMARY_SYSTEM), ChatMessage::user(user)],
        )
        .tagged("summarize");
        let reply = self.chat.chat(&req)?;
        let summary_text = text::truncate_chars(reply.content.trim(), SUMMARY_MAX_CHARS).to_string();
        let metadata: BTreeMap<String, String> = [
            ("user_id".to_string(), input.user_id.to_string()),
            ("goal".to_string(), input.goal.to_string()),
            ("mood".to_string(), input.mood.to_string()),
            ("session_id".to_string(), input.session_id.to_string()),
        ]
        .into();
        self.index.upsert(VectorRecord {
            id: input.session_id.to_string(),
            namespace: Namespace::Sessions,
            vector: self.embedder.embed(&summary_text)?,
            metadata,
            payload: summary_text.clone(),
        })?;
        Ok(SessionSummary {
            session_id: input.session_id.to_string(),
            user_id: input.user_id.to_string(),
            summary_text,
            goal: input.goal.to_string(),
            mood: input.mood,
            created_at: input.at,
        })
    }
}
