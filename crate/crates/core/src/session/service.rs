use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveTime, TimeZone, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{
    Card, CardDeck, CardKind, CheckIn, Clock, Condition, DeliveredScript, Event, EventLog, Feedback,
    ScriptKind, ServiceError, SessionRecord, SessionState, SystemClock, Transition, User,
};
use crate::analytics::{condition_engagement, daily_series, Completion, DailyPoint, DateWindow};
use crate::concept_kb::KnowledgeBase;
use crate::forge::{CheckerConfig, DefinitionJudge, GuidanceLevel, RarestTokenJudge, TemplateLibrary};
use crate::personalization::{
    assemble_prompt, generate_personalized, pseudo_delay, DelayConfig, Generation, ModelIds, Mood,
    PracticeHistory, PromptConfig, SessionInputs, UserProfile,
};
use crate::providers::{AudioClip, ChatMessage, Providers};
use crate::reflection::{ReflectionEngine, ReflectionMode, ReflectionTranscript, SessionSummary, SummaryInput, TurnReply};
use crate::text;
use crate::{EngagementSummary, VectorIndex};

pub const IDLE_TIMEOUT_MIN: i64 = 60;
pub const STATIC_DURATION_MIN: u32 = 10;
pub const STATIC_GUIDANCE: GuidanceLevel = GuidanceLevel::More;
const TIP_CARDS: usize = 3;
const SUMMARY_CARDS: usize = 2;
const RELATED_K: usize = 3;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub default_condition: Condition,
    pub default_reminder: NaiveTime,
    pub idle_timeout: Duration,
    pub prompt_config: PromptConfig,
    pub models: ModelIds,
    pub checker: CheckerConfig,
    pub delay: DelayConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            default_condition: Condition::Mindful,
            default_reminder: NaiveTime::from_hms_opt(9, 0, 0).expect("valid time"),
            idle_timeout: Duration::minutes(IDLE_TIMEOUT_MIN),
            prompt_config: PromptConfig::D,
            models: ModelIds::same("guide-mini"),
            checker: CheckerConfig::default(),
            delay: DelayConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `CONDITION_DEFAULT` and `REMINDER_DEFAULT` (HH:MM).
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let mut c = Self::default();
        if let Some(v) = get("CONDITION_DEFAULT") {
            c.default_condition = v.parse().map_err(ServiceError::InvalidInput)?;
        }
        if let Some(v) = get("REMINDER_DEFAULT") {
            c.default_reminder = NaiveTime::parse_from_str(v.trim(), "%H:%M")
                .map_err(|_| ServiceError::InvalidInput(format!("REMINDER_DEFAULT={v}")))?;
        }
        Ok(c)
    }
}

/// Everything the service is built from.
#[derive(Clone)]
pub struct ServiceParts {
    pub kb: Arc<KnowledgeBase>,
    pub library: Arc<TemplateLibrary>,
    pub providers: Providers,
    pub index: Arc<VectorIndex>,
    pub judge: Arc<dyn DefinitionJudge>,
    pub clock: Arc<dyn Clock>,
}

impl ServiceParts {
    /// Shipped fixtures, the given providers and index, deterministic judge.
    pub fn new(providers: Providers, index: Arc<VectorIndex>, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let kb = Arc::new(KnowledgeBase::default_fixture());
        let library = Arc::new(TemplateLibrary::default_fixture(
            kb.clone(),
            providers.embedder.clone(),
            index.clone(),
        )?);
        Ok(Self { kb, library, providers, index, judge: Arc::new(RarestTokenJudge), clock })
    }

    pub fn mock() -> Self {
        let providers = Providers::mock();
        let index = Arc::new(VectorIndex::new(providers.embedder.dim()));
        Self::new(providers, index, Arc::new(SystemClock)).expect("shipped fixtures are valid")
    }
}

/// Session inputs as chosen in the UI; the user comes from the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputChoices {
    pub mood: Mood,
    pub goal: String,
    pub duration_min: u32,
    pub technique: String,
    #[serde(default = "default_guidance")]
    pub guidance_level: GuidanceLevel,
}

fn default_guidance() -> GuidanceLevel {
    GuidanceLevel::More
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateOutcome {
    pub script_ref: String,
    pub deck: CardDeck,
    pub delivered: DeliveredScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MenuOrder {
    pub goals: Vec<String>,
    pub techniques: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngagementReport {
    pub window: DateWindow,
    pub per_user: Vec<EngagementSummary>,
    pub daily: BTreeMap<Condition, Vec<DailyPoint<f64>>>,
}

/// State changes as logged. Replaying them rebuilds the projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
enum Change {
    UserCreated { user: User },
    SessionCreated { user_id: String, condition: Condition },
    InputsSet { inputs: SessionInputs },
    StateChanged { from: SessionState, to: SessionState },
    Reflection { transcript: ReflectionTranscript },
    ScriptDelivered { script: Box<DeliveredScript> },
    FeedbackGiven { feedback: Feedback },
    SummaryStored { summary: SessionSummary },
    CheckinRecorded { checkin: CheckIn },
}

impl Change {
    fn into_event(self, ts: DateTime<Utc>, session_id: Option<&str>) -> Event {
        let v = serde_json::to_value(&self).expect("changes serialize");
        Event {
            ts,
            session_id: session_id.map(str::to_string),
            event: v["event"].as_str().expect("tagged").to_string(),
            payload: v.get("payload").cloned().unwrap_or(serde_json::Value::Null),
        }
    }

    fn from_event(e: &Event) -> Result<Self, String> {
        serde_json::from_value(serde_json::json!({ "event": e.event, "payload": e.payload })).map_err(|x| x.to_string())
    }
}

/// Per-session slot: `op` serializes operations, `record` serves snapshots.
struct Slot {
    op: Mutex<()>,
    record: RwLock<SessionRecord>,
}

pub struct SessionService {
    parts: ServiceParts,
    config: ServiceConfig,
    reflection: ReflectionEngine,
    log: EventLog,
    users: RwLock<HashMap<String, User>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    checkins: RwLock<BTreeMap<(String, NaiveDate), CheckIn>>,
    summaries: RwLock<HashMap<String, Vec<SessionSummary>>>,
}

impl std::fmt::Debug for SessionService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionService")
            .field("sessions", &self.sessions.read().len())
            .field("events", &self.log.len())
            .finish()
    }
}

impl SessionService {
    /// Builds the service and replays every event already in `log`.
    pub fn new(parts: ServiceParts, config: ServiceConfig, log: EventLog) -> Result<Self, ServiceError> {
        let reflection = ReflectionEngine::new(
            parts.kb.clone(),
            parts.providers.chat.clone(),
            parts.providers.embedder.clone(),
            parts.index.clone(),
            config.models.base.clone(),
        )?;
        let svc = Self {
            parts,
            config,
            reflection,
            log,
            users: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            checkins: RwLock::new(BTreeMap::new()),
            summaries: RwLock::new(HashMap::new()),
        };
        for (i, e) in svc.log.events().iter().enumerate() {
            let change = Change::from_event(e).map_err(|reason| ServiceError::CorruptLog { line: i + 1, reason })?;
            svc.apply(e.ts, e.session_id.as_deref(), change, true)
                .map_err(|err| ServiceError::CorruptLog { line: i + 1, reason: err.to_string() })?;
        }
        Ok(svc)
    }

    /// In-memory service over the shipped fixtures and mock providers.
    pub fn mock() -> Self {
        Self::new(ServiceParts::mock(), ServiceConfig::default(), EventLog::memory()).expect("empty log replays")
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.parts.kb
    }

    pub fn parts(&self) -> &ServiceParts {
        &self.parts
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn reflection_engine(&self) -> &ReflectionEngine {
        &self.reflection
    }

    fn now(&self) -> DateTime<Utc> {
        self.parts.clock.now()
    }

    fn commit(&self, session_id: Option<&str>, change: Change) -> Result<(), ServiceError> {
        let ts = self.now();
        let event = change.clone().into_event(ts, session_id);
        self.log.append(&event)?;
        self.apply(ts, session_id, change, false)
    }

    fn apply(&self, ts: DateTime<Utc>, session_id: Option<&str>, change: Change, replay: bool) -> Result<(), ServiceError> {
        let sid = || session_id.ok_or_else(|| ServiceError::InvalidInput("event without session id".into()));
        match change {
            Change::UserCreated { user } => {
                self.users.write().insert(user.user_id.clone(), user);
            }
            Change::CheckinRecorded { checkin } => {
                self.checkins.write().insert((checkin.user_id.clone(), checkin.date), checkin);
            }
            Change::SessionCreated { user_id, condition } => {
                let id = sid()?.to_string();
                let record = SessionRecord {
                    session_id: id.clone(),
                    user_id,
                    condition,
                    state: SessionState::Created,
                    inputs: None,
                    transcript: None,
                    script: None,
                    feedback: None,
                    summary: None,
                    transitions: vec![Transition { state: SessionState::Created, at: ts }],
                };
                let slot = Arc::new(Slot { op: Mutex::new(()), record: RwLock::new(record) });
                self.sessions.write().insert(id, slot);
            }
            other => {
                let id = sid()?;
                let slot = self.slot(id)?;
                let mut r = slot.record.write();
                match other {
                    Change::InputsSet { inputs } => r.inputs = Some(inputs),
                    Change::StateChanged { from, to } => {
                        if r.state != from || !from.can_transition(to) {
                            return Err(ServiceError::BadState { session_id: id.into(), state: r.state, op: "transition" });
                        }
                        r.state = to;
                        r.transitions.push(Transition { state: to, at: ts });
                    }
                    Change::Reflection { transcript } => r.transcript = Some(transcript),
                    Change::ScriptDelivered { script } => r.script = Some(*script),
                    Change::FeedbackGiven { feedback } => r.feedback = Some(feedback),
                    Change::SummaryStored { summary } => {
                        if replay {
                            self.reindex_summary(&summary)?;
                        }
                        self.summaries.write().entry(summary.user_id.clone()).or_default().push(summary.clone());
                        r.summary = Some(summary);
                    }
                    Change::UserCreated { .. } | Change::CheckinRecorded { .. } | Change::SessionCreated { .. } => {
                        unreachable!("handled above")
                    }
                }
            }
        }
        Ok(())
    }

    fn reindex_summary(&self, s: &SessionSummary) -> Result<(), ServiceError> {
        let metadata: BTreeMap<String, String> = [
            ("user_id".to_string(), s.user_id.clone()),
            ("goal".to_string(), s.goal.clone()),
            ("mood".to_string(), s.mood.to_string()),
            ("session_id".to_string(), s.session_id.clone()),
        ]
        .into();
        self.parts.index.upsert(crate::vector_index::VectorRecord {
            id: s.session_id.clone(),
            namespace: crate::vector_index::Namespace::Sessions,
            vector: self.parts.providers.embedder.embed(&s.summary_text)?,
            metadata,
            payload: s.summary_text.clone(),
        })?;
        Ok(())
    }

    fn slot(&self, session_id: &str) -> Result<Arc<Slot>, ServiceError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    fn transition(&self, r: &SessionRecord, to: SessionState) -> Result<(), ServiceError> {
        self.commit(Some(&r.session_id), Change::StateChanged { from: r.state, to })
    }

    fn bad_state(r: &SessionRecord, op: &'static str) -> ServiceError {
        ServiceError::BadState { session_id: r.session_id.clone(), state: r.state, op }
    }

    /// Run `f` with the session's operation lock held, on a snapshot of the record.
    fn with_session<T>(
        &self,
        session_id: &str,
        f: impl FnOnce(&SessionRecord) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let slot = self.slot(session_id)?;
        let _guard = slot.op.lock();
        let snapshot = slot.record.read().clone();
        f(&snapshot)
    }

    pub fn create_user(
        &self,
        display_name: &str,
        reminder_time: Option<NaiveTime>,
        utc_offset_minutes: i32,
    ) -> Result<User, ServiceError> {
        if display_name.trim().is_empty() {
            return Err(ServiceError::InvalidInput("empty display name".into()));
        }
        if utc_offset_minutes.abs() > 14 * 60 {
            return Err(ServiceError::InvalidInput(format!("utc offset {utc_offset_minutes} min out of range")));
        }
        let user = User {
            user_id: uuid::Uuid::new_v4().to_string(),
            display_name: display_name.trim().to_string(),
            reminder_time: reminder_time.unwrap_or(self.config.default_reminder),
            utc_offset_minutes,
            created_at: self.now(),
        };
        self.commit(None, Change::UserCreated { user: user.clone() })?;
        Ok(user)
    }

    pub fn user(&self, user_id: &str) -> Result<User, ServiceError> {
        self.users
            .read()
            .get(user_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownUser(user_id.to_string()))
    }

    pub fn users(&self) -> Vec<User> {
        let mut v: Vec<User> = self.users.read().values().cloned().collect();
        v.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.user_id.cmp(&b.user_id)));
        v
    }

    pub fn create_session(&self, user_id: &str, condition: Option<Condition>) -> Result<SessionRecord, ServiceError> {
        self.user(user_id)?;
        let id = uuid::Uuid::new_v4().to_string();
        let condition = condition.unwrap_or(self.config.default_condition);
        self.commit(Some(&id), Change::SessionCreated { user_id: user_id.to_string(), condition })?;
        self.session(&id)
    }

    pub fn session(&self, session_id: &str) -> Result<SessionRecord, ServiceError> {
        Ok(self.slot(session_id)?.record.read().clone())
    }

    /// Every session, oldest first.
    pub fn sessions(&self) -> Vec<SessionRecord> {
        let mut v: Vec<SessionRecord> = self.sessions.read().values().map(|s| s.record.read().clone()).collect();
        v.sort_by(|a, b| a.created_at().cmp(&b.created_at()).then(a.session_id.cmp(&b.session_id)));
        v
    }

    pub fn set_inputs(&self, session_id: &str, choices: InputChoices) -> Result<SessionRecord, ServiceError> {
        self.with_session(session_id, |r| {
            if r.state != SessionState::Created {
                return Err(Self::bad_state(r, "set inputs"));
            }
            let inputs = SessionInputs {
                user_id: r.user_id.clone(),
                mood: choices.mood,
                goal: choices.goal,
                duration_min: choices.duration_min,
                technique: choices.technique,
                guidance_level: choices.guidance_level,
            }
            .validated(&self.parts.kb)?;
            self.commit(Some(session_id), Change::InputsSet { inputs })?;
            self.transition(r, SessionState::InputsSet)
        })?;
        self.session(session_id)
    }

    fn reflection_inputs(r: &SessionRecord) -> Result<&SessionInputs, ServiceError> {
        if !r.condition.has_reflection() {
            return Err(ServiceError::ReflectionUnavailable(r.condition));
        }
        r.inputs.as_ref().ok_or_else(|| Self::bad_state(r, "reflect"))
    }

    pub fn open_reflection(&self, session_id: &str) -> Result<(ChatMessage, ReflectionTranscript), ServiceError> {
        self.with_session(session_id, |r| {
            let inputs = Self::reflection_inputs(r)?;
            if r.state != SessionState::InputsSet || r.transcript.is_some() {
                return Err(Self::bad_state(r, "open reflection"));
            }
            let (opener, transcript) = self.reflection.open(session_id, inputs)?;
            self.commit(Some(session_id), Change::Reflection { transcript: transcript.clone() })?;
            self.transition(r, SessionState::Reflecting)?;
            Ok((opener, transcript))
        })
    }

    pub fn reflect_turn(&self, session_id: &str, message: &str, mode: ReflectionMode) -> Result<TurnReply, ServiceError> {
        self.with_session(session_id, |r| {
            let inputs = Self::reflection_inputs(r)?;
            if r.state != SessionState::Reflecting {
                return Err(Self::bad_state(r, "reflect"));
            }
            let mut transcript = r.transcript.clone().ok_or_else(|| Self::bad_state(r, "reflect"))?;
            let reply = self.reflection.turn(&mut transcript, inputs, message, mode)?;
            self.commit(Some(session_id), Change::Reflection { transcript })?;
            Ok(reply)
        })
    }

    pub fn close_reflection(&self, session_id: &str) -> Result<ReflectionTranscript, ServiceError> {
        self.with_session(session_id, |r| {
            Self::reflection_inputs(r)?;
            if r.state != SessionState::Reflecting {
                return Err(Self::bad_state(r, "close reflection"));
            }
            let mut transcript = r.transcript.clone().ok_or_else(|| Self::bad_state(r, "close reflection"))?;
            transcript.close()?;
            self.commit(Some(session_id), Change::Reflection { transcript: transcript.clone() })?;
            Ok(transcript)
        })
    }

    /// Skip reflection, before opening it or part-way through.
    pub fn skip_reflection(&self, session_id: &str) -> Result<ReflectionTranscript, ServiceError> {
        self.with_session(session_id, |r| {
            Self::reflection_inputs(r)?;
            if !matches!(r.state, SessionState::InputsSet | SessionState::Reflecting) {
                return Err(Self::bad_state(r, "skip reflection"));
            }
            let mut transcript = r.transcript.clone().unwrap_or_else(|| ReflectionTranscript::new(session_id));
            if transcript.closed {
                return Err(crate::reflection::ReflectionError::AlreadyClosed.into());
            }
            transcript.skip();
            self.commit(Some(session_id), Change::Reflection { transcript: transcript.clone() })?;
            Ok(transcript)
        })
    }

    fn seed(session_id: &str) -> u64 {
        text::fnv1a(session_id.as_bytes())
    }

    /// Tips from the KB plus this user's most recent session summaries.
    pub fn cards(&self, session_id: &str) -> Result<CardDeck, ServiceError> {
        let r = self.session(session_id)?;
        Ok(self.deck_for(&r))
    }

    fn deck_for(&self, r: &SessionRecord) -> CardDeck {
        let mut cards = Vec::new();
        if let Some(mine) = self.summaries.read().get(&r.user_id) {
            for s in mine.iter().rev().filter(|s| s.session_id != r.session_id).take(SUMMARY_CARDS) {
                cards.push(Card { kind: CardKind::PersonalSummary, text: s.summary_text.clone() });
            }
        }
        let concepts = self.parts.kb.concepts();
        let start = (Self::seed(&r.session_id) % concepts.len() as u64) as usize;
        for i in 0..TIP_CARDS.min(concepts.len()) {
            let c = &concepts[(start + i) % concepts.len()];
            cards.push(Card { kind: CardKind::Tip, text: format!("{}: {}", c.name, c.definition) });
        }
        CardDeck { cards }
    }

    fn history(&self, r: &SessionRecord, inputs: &SessionInputs) -> Result<PracticeHistory, ServiceError> {
        if !r.condition.has_reflection() {
            return Ok(PracticeHistory::default());
        }
        let technique = self.parts.kb.resolve_technique(&inputs.technique).map_or("", |c| c.name.as_str());
        let query = format!("{} {} {}", inputs.goal, technique, inputs.mood);
        let related = self
            .reflection
            .related(&r.user_id, &query, RELATED_K)?
            .into_iter()
            .map(|h| h.payload)
            .collect();
        let recent = self
            .summaries
            .read()
            .get(&r.user_id)
            .map(|v| v.iter().rev().take(3).map(|s| s.summary_text.clone()).collect())
            .unwrap_or_default();
        Ok(PracticeHistory { related, recent })
    }

    pub fn generate(&self, session_id: &str) -> Result<GenerateOutcome, ServiceError> {
        self.with_session(session_id, |r| {
            let inputs = r.inputs.clone().ok_or_else(|| Self::bad_state(r, "generate"))?;
            match r.state {
                SessionState::InputsSet => {}
                SessionState::Reflecting if r.transcript.as_ref().is_some_and(|t| t.closed) => {}
                SessionState::Reflecting => return Err(ServiceError::ReflectionOpen),
                _ => return Err(Self::bad_state(r, "generate")),
            }
            self.transition(r, SessionState::Generating)?;
            let deck = self.deck_for(r);
            let generating = self.session(session_id)?;
            match self.produce(r, &inputs) {
                Ok(delivered) => {
                    self.commit(Some(session_id), Change::ScriptDelivered { script: Box::new(delivered.clone()) })?;
                    self.transition(&generating, SessionState::Ready)?;
                    Ok(GenerateOutcome { script_ref: delivered.script_ref(session_id), deck, delivered })
                }
                Err(e) => {
                    tracing::error!(session_id, error = %e, "generation failed; abandoning session");
                    self.transition(&generating, SessionState::Abandoned)?;
                    Err(e)
                }
            }
        })
    }

    fn produce(&self, r: &SessionRecord, inputs: &SessionInputs) -> Result<DeliveredScript, ServiceError> {
        let seed = Self::seed(&r.session_id);
        let lib = &self.parts.library;
        if r.condition == Condition::Static {
            let sel = lib.select(&inputs.goal, STATIC_DURATION_MIN, STATIC_GUIDANCE, seed)?;
            let delay = pseudo_delay(Condition::Static, seed, &self.config.delay)?;
            let check_report = lib.check(&sel.template);
            return Ok(DeliveredScript {
                kind: ScriptKind::Template,
                source_template_id: sel.template.template_id.clone(),
                route: sel.route,
                drawn_goal: sel.drawn_goal,
                script: sel.template.script,
                check_report,
                prompt_config: None,
                model_id: None,
                fallback: false,
                attempts: 0,
                pseudo_delay_ms: Some(delay.as_millis() as u64),
            });
        }
        let sel = lib.select(&inputs.goal, inputs.duration_min, inputs.guidance_level, seed)?;
        let mut prompt_inputs = inputs.clone();
        if let Some(g) = &sel.drawn_goal {
            prompt_inputs.goal = g.clone();
        }
        let user = self.user(&r.user_id)?;
        let profile = UserProfile {
            display_name: user.display_name,
            prior_session_count: self.completed_count(&r.user_id),
        };
        let transcript = if r.condition.has_reflection() { r.transcript.as_ref() } else { None };
        let history = self.history(r, &prompt_inputs)?;
        let checkins = self.checkins(&r.user_id);
        let bundle = assemble_prompt(
            &prompt_inputs,
            &profile,
            &sel.template,
            transcript,
            &history,
            &checkins,
            self.config.prompt_config,
            &self.parts.kb,
            &self.config.models,
        )?;
        let generation = Generation {
            kb: &self.parts.kb,
            config: &self.config.checker,
            judge: self.parts.judge.as_ref(),
            chat: self.parts.providers.chat.as_ref(),
        };
        let out = generate_personalized(&r.session_id, &prompt_inputs, &bundle, &sel.template, &generation)?;
        Ok(DeliveredScript {
            kind: ScriptKind::Personalized,
            source_template_id: out.source_template_id,
            route: sel.route,
            drawn_goal: sel.drawn_goal,
            script: out.script,
            check_report: out.check_report,
            prompt_config: Some(out.prompt_config),
            model_id: Some(out.model_id),
            fallback: out.fallback,
            attempts: out.attempts,
            pseudo_delay_ms: None,
        })
    }

    fn completed_count(&self, user_id: &str) -> usize {
        self.sessions()
            .iter()
            .filter(|s| s.user_id == user_id && s.state == SessionState::Completed)
            .count()
    }

    /// Synthesize the delivered script; the first fetch starts playback.
    pub fn audio(&self, session_id: &str) -> Result<AudioClip, ServiceError> {
        self.with_session(session_id, |r| {
            if !matches!(r.state, SessionState::Ready | SessionState::Playing) {
                return Err(Self::bad_state(r, "play audio"));
            }
            let delivered = r.script.as_ref().ok_or_else(|| Self::bad_state(r, "play audio"))?;
            let clip = self.parts.providers.speech.synthesize(
                &delivered.script,
                &delivered.check_report,
                &self.parts.providers.voice_id,
            )?;
            if r.state == SessionState::Ready {
                self.transition(r, SessionState::Playing)?;
            }
            Ok(clip)
        })
    }

    pub fn finish_playback(&self, session_id: &str) -> Result<SessionRecord, ServiceError> {
        self.with_session(session_id, |r| {
            if r.state != SessionState::Playing {
                return Err(Self::bad_state(r, "finish playback"));
            }
            self.transition(r, SessionState::Feedback)
        })?;
        self.session(session_id)
    }

    pub fn submit_feedback(&self, session_id: &str, rating: u8, text: &str) -> Result<SessionRecord, ServiceError> {
        self.with_session(session_id, |r| {
            if !matches!(r.state, SessionState::Playing | SessionState::Feedback) {
                return Err(Self::bad_state(r, "submit feedback"));
            }
            if !(1..=5).contains(&rating) {
                return Err(ServiceError::InvalidInput(format!("rating must be 1-5, got {rating}")));
            }
            if r.state == SessionState::Playing {
                self.transition(r, SessionState::Feedback)?;
            }
            let feedback = Feedback { rating, text: text.trim().to_string() };
            self.commit(Some(session_id), Change::FeedbackGiven { feedback: feedback.clone() })?;
            let current = self.session(session_id)?;
            self.transition(&current, SessionState::Completed)?;
            let inputs = current.inputs.as_ref().expect("inputs precede playback");
            let summary = self.reflection.summarize(&SummaryInput {
                session_id,
                user_id: &current.user_id,
                completed: true,
                goal: &inputs.goal,
                mood: inputs.mood,
                technique: &inputs.technique,
                feedback: Some(&feedback.text).filter(|t| !t.is_empty()).map(String::as_str),
                transcript: current.transcript.as_ref(),
                at: self.now(),
            });
            match summary {
                Ok(summary) => self.commit(Some(session_id), Change::SummaryStored { summary }),
                Err(e) => {
                    tracing::warn!(session_id, error = %e, "session summary not stored");
                    Ok(())
                }
            }
        })?;
        self.session(session_id)
    }

    pub fn abandon(&self, session_id: &str) -> Result<SessionRecord, ServiceError> {
        self.with_session(session_id, |r| {
            if r.state.is_terminal() {
                return Err(Self::bad_state(r, "abandon"));
            }
            self.transition(r, SessionState::Abandoned)
        })?;
        self.session(session_id)
    }

    /// Abandon every non-terminal session idle for at least the timeout.
    /// Sessions busy with another operation are left for the next sweep.
    pub fn sweep_idle(&self) -> Result<Vec<String>, ServiceError> {
        let cutoff = self.now() - self.config.idle_timeout;
        let slots: Vec<Arc<Slot>> = self.sessions.read().values().cloned().collect();
        let mut abandoned = Vec::new();
        for slot in slots {
            let Some(_guard) = slot.op.try_lock() else { continue };
            let r = slot.record.read().clone();
            if !r.state.is_terminal() && r.updated_at() <= cutoff {
                self.transition(&r, SessionState::Abandoned)?;
                abandoned.push(r.session_id);
            }
        }
        abandoned.sort();
        Ok(abandoned)
    }

    /// Goals and techniques ranked by completed-session frequency, then
    /// recency, then fixture order.
    pub fn menu_order(&self, user_id: &str) -> MenuOrder {
        let mut goal_stats: HashMap<String, (usize, DateTime<Utc>)> = HashMap::new();
        let mut tech_stats: HashMap<String, (usize, DateTime<Utc>)> = HashMap::new();
        for s in self.sessions() {
            if s.user_id != user_id || s.state != SessionState::Completed {
                continue;
            }
            let (Some(inputs), Some(at)) = (&s.inputs, s.completed_at()) else { continue };
            for (map, key) in [(&mut goal_stats, inputs.goal.clone()), (&mut tech_stats, inputs.technique.clone())] {
                let e = map.entry(key).or_insert((0, at));
                e.0 += 1;
                e.1 = e.1.max(at);
            }
        }
        let rank = |keys: Vec<(String, String)>, stats: &HashMap<String, (usize, DateTime<Utc>)>| {
            let mut indexed: Vec<(usize, (String, String))> = keys.into_iter().enumerate().collect();
            indexed.sort_by(|(ia, (ka, _)), (ib, (kb, _))| {
                let a = stats.get(ka);
                let b = stats.get(kb);
                let fa = a.map_or(0, |x| x.0);
                let fb = b.map_or(0, |x| x.0);
                fb.cmp(&fa).then_with(|| b.map(|x| x.1).cmp(&a.map(|x| x.1))).then(ia.cmp(ib))
            });
            indexed.into_iter().map(|(_, (_, label))| label).collect::<Vec<_>>()
        };
        let goals = self.parts.kb.goals().iter().map(|g| (g.goal.clone(), g.goal.clone())).collect();
        let techniques = self.parts.kb.concepts().iter().map(|c| (c.id.clone(), c.name.clone())).collect();
        MenuOrder { goals: rank(goals, &goal_stats), techniques: rank(techniques, &tech_stats) }
    }

    /// Insert or replace the user's check-in for `date`.
    pub fn record_checkin(
        &self,
        user_id: &str,
        date: NaiveDate,
        sleep: u8,
        mood: u8,
        focus: u8,
    ) -> Result<CheckIn, ServiceError> {
        self.user(user_id)?;
        for (name, v) in [("sleep", sleep), ("mood", mood), ("focus", focus)] {
            if !(1..=5).contains(&v) {
                return Err(ServiceError::InvalidInput(format!("{name} must be 1-5, got {v}")));
            }
        }
        let checkin = CheckIn { user_id: user_id.to_string(), date, sleep, mood, focus };
        self.commit(None, Change::CheckinRecorded { checkin: checkin.clone() })?;
        Ok(checkin)
    }

    pub fn checkins(&self, user_id: &str) -> Vec<CheckIn> {
        self.checkins
            .read()
            .range((user_id.to_string(), NaiveDate::MIN)..=(user_id.to_string(), NaiveDate::MAX))
            .map(|(_, c)| c.clone())
            .collect()
    }

    /// Next reminder strictly after `now`, in the user's local offset.
    pub fn next_reminder(&self, user_id: &str, now: DateTime<Utc>) -> Result<DateTime<Utc>, ServiceError> {
        let user = self.user(user_id)?;
        Ok(next_reminder_at(user.reminder_time, user.utc_offset_minutes, now))
    }

    pub fn completions(&self) -> Vec<Completion> {
        self.sessions()
            .into_iter()
            .filter_map(|s| {
                s.completed_at().map(|at| Completion {
                    user_id: s.user_id.clone(),
                    condition: s.condition.to_string(),
                    completed_at: at,
                })
            })
            .collect()
    }

    /// Engagement per user and mean daily sessions per condition. A user
    /// belongs to every condition they have a session in.
    pub fn engagement(&self, window: DateWindow, condition: Option<Condition>) -> Result<EngagementReport, ServiceError> {
        let sessions = self.sessions();
        let completions = self.completions();
        let members = |c: Condition| {
            let mut v: Vec<String> = sessions.iter().filter(|s| s.condition == c).map(|s| s.user_id.clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        let conditions: Vec<Condition> = condition.map_or(Condition::ALL.to_vec(), |c| vec![c]);
        let mut users: Vec<String> = match condition {
            Some(c) => members(c),
            None => self.users().into_iter().map(|u| u.user_id).collect(),
        };
        users.sort();
        let per_user = condition_engagement(&users, &completions, &window)
            .map_err(|e| ServiceError::InvalidInput(e.to_string()))?;
        let daily = conditions
            .into_iter()
            .map(|c| (c, daily_series(c.as_str(), &members(c), &completions, &window)))
            .collect();
        Ok(EngagementReport { window, per_user, daily })
    }
}

pub(crate) fn next_reminder_at(time: NaiveTime, offset_minutes: i32, now: DateTime<Utc>) -> DateTime<Utc> {
    let tz = FixedOffset::east_opt(offset_minutes * 60).expect("offset validated at user creation");
    let local = now.with_timezone(&tz);
    let mut date = local.date_naive();
    loop {
        let candidate = tz
            .from_local_datetime(&date.and_time(time))
            .single()
            .expect("fixed offsets are unambiguous")
            .with_timezone(&Utc);
        if candidate > now {
            return candidate;
        }
        date = date.succ_opt().expect("date in range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, h, m, 0).unwrap()
    }

    #[test]
    fn reminder_same_day_rollover_and_strictness() {
        let nine = NaiveTime::from_hms_opt(9, 0, 0).unwrap();
        assert_eq!(next_reminder_at(nine, 0, at(8, 0)), at(9, 0));
        assert_eq!(next_reminder_at(nine, 0, at(10, 0)), at(9, 0) + Duration::days(1));
        assert_eq!(next_reminder_at(nine, 0, at(9, 0)), at(9, 0) + Duration::days(1));
    }

    #[test]
    fn reminder_respects_local_offset() {
        let nine = NaiveTime::from_hms_opt(9, 0, 0).unwrap();
        // 09:00 at UTC-5 is 14:00 UTC.
        assert_eq!(next_reminder_at(nine, -300, at(13, 0)), at(14, 0));
        assert_eq!(next_reminder_at(nine, -300, at(15, 0)), at(14, 0) + Duration::days(1));
    }

    #[test]
    fn change_round_trips_through_event() {
        let c = Change::StateChanged { from: SessionState::Created, to: SessionState::InputsSet };
        let e = c.into_event(at(1, 0), Some("s"));
        assert_eq!(e.event, "state_changed");
        assert_eq!(e.payload["to"], "InputsSet");
        assert!(matches!(Change::from_event(&e), Ok(Change::StateChanged { .. })));
    }

    #[test]
    fn config_from_lookup() {
        let c = ServiceConfig::from_lookup(|k| match k {
            "CONDITION_DEFAULT" => Some("static".into()),
            "REMINDER_DEFAULT" => Some("07:30".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.default_condition, Condition::Static);
        assert_eq!(c.default_reminder, NaiveTime::from_hms_opt(7, 30, 0).unwrap());
        assert!(ServiceConfig::from_lookup(|_| Some("bogus".into())).is_err());
    }
}
