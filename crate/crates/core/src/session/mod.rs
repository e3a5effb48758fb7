//! Session lifecycle: users, the per-session state machine, daily
//! check-ins, reminders and the event log that persists all of it.

mod clock;
mod log;
mod service;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{CheckReport, ForgeError, SelectionRoute};
use crate::personalization::{PersonalizeError, PromptConfig, SessionInputs};
use crate::providers::ProviderError;
use crate::reflection::{ReflectionError, ReflectionTranscript, SessionSummary};
use crate::script::GuidanceScript;
use crate::vector_index::IndexError;

pub use clock::{Clock, ManualClock, SystemClock};
pub use log::{Event, EventLog};
pub use service::{
    EngagementReport, GenerateOutcome, InputChoices, MenuOrder, ServiceConfig, ServiceParts, SessionService,
    IDLE_TIMEOUT_MIN, STATIC_DURATION_MIN, STATIC_GUIDANCE,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{session_id}` is {state}; cannot {op}")]
    BadState { session_id: String, state: SessionState, op: &'static str },
    #[error("reflection is not part of the {0} condition")]
    ReflectionUnavailable(Condition),
    #[error("reflection must be closed or skipped before generation")]
    ReflectionOpen,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt event log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Personalize(#[from] PersonalizeError),
    #[error(transparent)]
    Reflection(#[from] ReflectionError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
}

/// Study arm: template only, personalization without reflection, or the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Static,
    Personal,
    Mindful,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Static, Condition::Personal, Condition::Mindful];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Static => "static",
            Condition::Personal => "personal",
            Condition::Mindful => "mindful",
        }
    }

    pub fn has_reflection(self) -> bool {
        self == Condition::Mindful
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" => Ok(Condition::Static),
            "personal" => Ok(Condition::Personal),
            "mindful" => Ok(Condition::Mindful),
            other => Err(format!("unknown condition `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Created,
    InputsSet,
    Reflecting,
    Generating,
    Ready,
    Playing,
    Feedback,
    Completed,
    Abandoned,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Completed | SessionState::Abandoned)
    }

    /// Edges of the lifecycle graph. Abandoned is reachable from every
    /// non-terminal state.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        if to == Abandoned {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (Created, InputsSet)
                | (InputsSet, Reflecting)
                | (InputsSet, Generating)
                | (Reflecting, Generating)
                | (Generating, Ready)
                | (Ready, Playing)
                | (Playing, Feedback)
                | (Feedback, Completed)
        )
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SessionState,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub rating: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: String,
    pub date: NaiveDate,
    pub sleep: u8,
    pub mood: u8,
    pub focus: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub display_name: String,
    /// Local wall-clock time of the daily reminder.
    pub reminder_time: NaiveTime,
    /// Minutes east of UTC.
    pub utc_offset_minutes: i32,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    /// An approved template delivered unmodified.
    Template,
    Personalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveredScript {
    pub kind: ScriptKind,
    pub source_template_id: String,
    pub route: SelectionRoute,
    pub drawn_goal: Option<String>,
    pub script: GuidanceScript,
    pub check_report: CheckReport,
    pub prompt_config: Option<PromptConfig>,
    pub model_id: Option<String>,
    /// Personalization gave up and delivered the template.
    pub fallback: bool,
    pub attempts: usize,
    pub pseudo_delay_ms: Option<u64>,
}

impl DeliveredScript {
    pub fn script_ref(&self, session_id: &str) -> String {
        match self.kind {
            ScriptKind::Template => format!("template:{}", self.source_template_id),
            ScriptKind::Personalized => format!("session:{session_id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_id: String,
    pub condition: Condition,
    pub state: SessionState,
    pub inputs: Option<SessionInputs>,
    pub transcript: Option<ReflectionTranscript>,
    pub script: Option<DeliveredScript>,
    pub feedback: Option<Feedback>,
    pub summary: Option<SessionSummary>,
    pub transitions: Vec<Transition>,
}

impl SessionRecord {
    pub fn created_at(&self) -> DateTime<Utc> {
        self.transitions[0].at
    }

    pub fn updated_at(&self) -> DateTime<Utc> {
        self.transitions.last().expect("created transition").at
    }

    pub fn completed_at(&self) -> Option<DateTime<Utc>> {
        self.transitions
            .iter()
            .find(|t| t.state == SessionState::Completed)
            .map(|t| t.at)
    }

    pub fn script_ref(&self) -> Option<String> {
        self.script.as_ref().map(|s| s.script_ref(&self.session_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardKind {
    Tip,
    PersonalSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Card {
    pub kind: CardKind,
    pub text: String,
}

/// Cards shown while a script is being prepared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardDeck {
    pub cards: Vec<Card>,
}
