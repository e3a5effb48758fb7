//! Prompt assembly for script personalization and the checked generation
//! loop with its template fallback.
//!
//! Prompt configurations form a ladder: A and B carry profile and template
//! only (B on the finetuned model), C adds the technique refresher, D adds
//! reflection content and E adds recent check-ins and summaries. D is the
//! service default.

use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_kb::KnowledgeBase;
use crate::forge::{
    check_script_with, CheckReport, CheckerConfig, Corrector, DefinitionJudge, GuidanceLevel, SafetyTemplate,
    SUPPORTED_DURATIONS,
};
use crate::providers::{ChatGateway, ChatMessage, ChatRequest};
use crate::reflection::ReflectionTranscript;
use crate::script::GuidanceScript;
use crate::session::{CheckIn, Condition};

#[derive(Debug, Error)]
pub enum PersonalizeError {
    #[error("invalid session inputs: {0}")]
    InvalidInputs(String),
    #[error("template `{0}` is not approved")]
    UnapprovedTemplate(String),
    #[error("reflection transcript is still open")]
    OpenTranscript,
    #[error("unknown technique `{0}`")]
    UnknownTechnique(String),
    #[error("generation failed after {attempts} attempts and the template fallback does not pass")]
    GenerationFailed { attempts: usize, report: CheckReport },
    #[error("pseudo delay only applies to the static condition")]
    NotStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mood {
    Positive,
    Neutral,
    Negative,
}

impl Mood {
    pub const ALL: [Mood; 3] = [Mood::Positive, Mood::Neutral, Mood::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Mood::Positive => "positive",
            Mood::Neutral => "neutral",
            Mood::Negative => "negative",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mood::Positive => "Feeling good",
            Mood::Neutral => "Okay",
            Mood::Negative => "Not feeling well",
        }
    }
}

impl fmt::Display for Mood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInputs {
    pub user_id: String,
    pub mood: Mood,
    pub goal: String,
    pub duration_min: u32,
    /// Concept id, name or alias; normalized to the id by [`SessionInputs::validated`].
    pub technique: String,
    pub guidance_level: GuidanceLevel,
}

impl SessionInputs {
    /// Check every field against the KB and normalize goal and technique.
    pub fn validated(mut self, kb: &KnowledgeBase) -> Result<Self, PersonalizeError> {
        if !SUPPORTED_DURATIONS.contains(&self.duration_min) {
            return Err(PersonalizeError::InvalidInputs(format!(
                "duration must be 5, 10 or 15 minutes, got {}",
                self.duration_min
            )));
        }
        let goal = kb
            .goal(&self.goal)
            .ok_or_else(|| PersonalizeError::InvalidInputs(format!("unknown goal `{}`", self.goal)))?;
        self.goal = goal.goal.clone();
        let technique = kb
            .resolve_technique(&self.technique)
            .ok_or_else(|| PersonalizeError::UnknownTechnique(self.technique.clone()))?;
        self.technique = technique.id.clone();
        if self.user_id.trim().is_empty() {
            return Err(PersonalizeError::InvalidInputs("empty user id".into()));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum PromptConfig {
    A,
    B,
    C,
    #[default]
    D,
    E,
}

impl PromptConfig {
    pub const ALL: [PromptConfig; 5] = [PromptConfig::A, PromptConfig::B, PromptConfig::C, PromptConfig::D, PromptConfig::E];

    pub fn has_refresher(self) -> bool {
        self >= PromptConfig::C
    }

    pub fn has_reflection(self) -> bool {
        self >= PromptConfig::D
    }

    pub fn has_recent(self) -> bool {
        self == PromptConfig::E
    }

    /// Every configuration except A runs on the finetuned model.
    pub fn uses_finetuned(self) -> bool {
        self != PromptConfig::A
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIds {
    pub base: String,
    pub finetuned: String,
}

impl ModelIds {
    pub fn same(model: &str) -> Self {
        Self { base: model.to_string(), finetuned: model.to_string() }
    }

    pub fn for_config(&self, config: PromptConfig) -> &str {
        if config.uses_finetuned() {
            &self.finetuned
        } else {
            &self.base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub display_name: String,
    pub prior_session_count: usize,
}

/// What the service remembers of a user's earlier sessions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PracticeHistory {
    /// Summaries of the sessions most related to this one (at most 3).
    pub related: Vec<String>,
    /// Summaries of the most recent sessions, newest first (at most 3).
    pub recent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionBlock {
    /// `None` when no reflection took place or it was skipped.
    pub transcript: Option<String>,
    pub related: Vec<String>,
}

impl ReflectionBlock {
    pub fn is_empty(&self) -> bool {
        self.transcript.is_none() && self.related.is_empty()
    }

    fn render(&self) -> String {
        if self.is_empty() {
            return "(empty: no reflection or related sessions)".into();
        }
        let mut out = String::new();
        if let Some(t) = &self.transcript {
            out.push_str("Conversation before this session:\n");
            out.push_str(t);
            out.push('\n');
        }
        if !self.related.is_empty() {
            out.push_str("Related past sessions:\n");
            for s in &self.related {
                out.push_str(&format!("- {s}\n"));
            }
        }
        out.trim_end().to_string()
    }
}

pub const PERSONALIZER_SYSTEM: &str = "You adapt an expert-approved meditation template to one user. \
Keep the sentinel line format, every [PAUSE], [ASK] and [BRANCH] structure, the overall length and \
the closing lines. Change only wording, to reflect the user's profile and context. Never change the \
definition of a mindfulness technique. Reply with the full script only.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub config: PromptConfig,
    pub model_id: String,
    pub template_id: String,
    pub system_prompt: String,
    pub profile_block: String,
    pub template_block: String,
    pub refresher_block: Option<String>,
    pub reflection_block: Option<ReflectionBlock>,
    pub recent_block: Option<String>,
}

impl PromptBundle {
    /// User message: the blocks under `## ` headers, in ladder order.
    pub fn user_message(&self) -> String {
        let mut parts = vec![
            format!("## PROFILE\n{}", self.profile_block),
            format!("## TEMPLATE\n{}", self.template_block.trim_end()),
        ];
        if let Some(r) = &self.refresher_block {
            parts.push(format!("## TECHNIQUE REFRESHER\n{r}"));
        }
        if let Some(r) = &self.reflection_block {
            parts.push(format!("## REFLECTION\n{}", r.render()));
        }
        if let Some(r) = &self.recent_block {
            parts.push(format!("## RECENT\n{r}"));
        }
        parts.join("\n\n")
    }

    pub fn to_request(&self) -> ChatRequest {
        ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::system(self.system_prompt.clone()), ChatMessage::user(self.user_message())],
        )
        .tagged("personalize")
    }
}

/// Pure assembly of the personalization prompt.
///
/// `transcript` is `None` when the condition has no reflection stage.
#[allow(clippy::too_many_arguments)]
pub fn assemble_prompt(
    inputs: &SessionInputs,
    profile: &UserProfile,
    template: &SafetyTemplate,
    transcript: Option<&ReflectionTranscript>,
    history: &PracticeHistory,
    checkins: &[CheckIn],
    config: PromptConfig,
    kb: &KnowledgeBase,
    models: &ModelIds,
) -> Result<PromptBundle, PersonalizeError> {
    if !template.is_approved() {
        return Err(PersonalizeError::UnapprovedTemplate(template.template_id.clone()));
    }
    if let Some(t) = transcript {
        if !t.closed && !t.skipped {
            return Err(PersonalizeError::OpenTranscript);
        }
    }
    let technique = kb
        .resolve_technique(&inputs.technique)
        .ok_or_else(|| PersonalizeError::UnknownTechnique(inputs.technique.clone()))?;
    let goal_line = match kb.goal(&inputs.goal) {
        Some(g) => format!("{} ({})", g.goal, g.category),
        None => inputs.goal.clone(),
    };
    let profile_block = format!(
        "Name: {}\nPrior sessions: {}\nGuidance: {}\nMood: {}\nGoal: {}\nDuration: {} minutes\nTechnique: {}",
        profile.display_name,
        profile.prior_session_count,
        inputs.guidance_level,
        inputs.mood,
        goal_line,
        inputs.duration_min,
        technique.name,
    );
    let refresher_block = config
        .has_refresher()
        .then(|| kb.technique_refresher(&technique.id).map(|r| r.0))
        .transpose()
        .map_err(|_| PersonalizeError::UnknownTechnique(technique.id.clone()))?;
    let reflection_block = config.has_reflection().then(|| ReflectionBlock {
        transcript: transcript.filter(|t| !t.skipped).map(ReflectionTranscript::text).filter(|t| !t.is_empty()),
        related: history.related.iter().take(3).cloned().collect(),
    });
    let recent_block = config.has_recent().then(|| recent_text(inputs, history, checkins));
    Ok(PromptBundle {
        config,
        model_id: models.for_config(config).to_string(),
        template_id: template.template_id.clone(),
        system_prompt: PERSONALIZER_SYSTEM.to_string(),
        profile_block,
        template_block: template.script.to_text(),
        refresher_block,
        reflection_block,
        recent_block,
    })
}

fn recent_text(inputs: &SessionInputs, history: &PracticeHistory, checkins: &[CheckIn]) -> String {
    let mut mine: Vec<&CheckIn> = checkins.iter().filter(|c| c.user_id == inputs.user_id).collect();
    mine.sort_by_key(|c| std::cmp::Reverse(c.date));
    let mut out = String::from("Daily check-ins (1-5):\n");
    if mine.is_empty() {
        out.push_str("- none recorded\n");
    }
    for c in mine.iter().take(7) {
        out.push_str(&format!("- {}: sleep {}, mood {}, focus {}\n", c.date, c.sleep, c.mood, c.focus));
    }
    out.push_str("Recent sessions:\n");
    if history.recent.is_empty() {
        out.push_str("- none yet\n");
    }
    for s in history.recent.iter().take(3) {
        out.push_str(&format!("- {s}\n"));
    }
    out.trim_end().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedScript {
    pub session_id: String,
    pub script: GuidanceScript,
    pub source_template_id: String,
    pub prompt_config: PromptConfig,
    pub model_id: String,
    pub check_report: CheckReport,
    /// True when the delivered script is the source template rather than model output.
    pub fallback: bool,
    /// Generation attempts made (0 when the fallback needed no model call).
    pub attempts: usize,
}

pub const MAX_GENERATION_ATTEMPTS: usize = 3;

/// Checker, judge and chat model used by [`generate_personalized`].
pub struct Generation<'a> {
    pub kb: &'a KnowledgeBase,
    pub config: &'a CheckerConfig,
    pub judge: &'a dyn DefinitionJudge,
    pub chat: &'a dyn ChatGateway,
}

impl Generation<'_> {
    fn check(&self, s: &GuidanceScript, duration_min: u32) -> CheckReport {
        check_script_with(s, duration_min, self.kb, self.config, self.judge)
    }
}

/// Ask the model for an adapted script, parse it, check it and correct it,
/// up to [`MAX_GENERATION_ATTEMPTS`] times. When every attempt fails the
/// source template is delivered instead, as-is when it passes for the
/// requested duration and otherwise with rule-only corrections.
pub fn generate_personalized(
    session_id: &str,
    inputs: &SessionInputs,
    bundle: &PromptBundle,
    template: &SafetyTemplate,
    g: &Generation<'_>,
) -> Result<PersonalizedScript, PersonalizeError> {
    let request = bundle.to_request();
    let corrector = Corrector {
        kb: g.kb,
        config: g.config,
        judge: g.judge,
        chat: g.chat,
        model_id: &bundle.model_id,
    };
    let d = inputs.duration_min;
    let done = |script: GuidanceScript, report: CheckReport, fallback: bool, attempts: usize| PersonalizedScript {
        session_id: session_id.to_string(),
        script,
        source_template_id: template.template_id.clone(),
        prompt_config: bundle.config,
        model_id: bundle.model_id.clone(),
        check_report: report,
        fallback,
        attempts,
    };
    for attempt in 1..=MAX_GENERATION_ATTEMPTS {
        let reply = match g.chat.chat(&request) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(session_id, attempt, error = %e, "personalization call failed");
                continue;
            }
        };
        let script = match GuidanceScript::parse(&reply.content) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(session_id, attempt, error = %e, "unparseable personalized script");
                continue;
            }
        };
        let report = g.check(&script, d);
        if report.passed {
            return Ok(done(script, report, false, attempt));
        }
        match corrector.correct(&script, &report, d) {
            Ok(c) => return Ok(done(c.script, c.report, false, attempt)),
            Err(e) => tracing::warn!(session_id, attempt, error = %e, "personalized script not correctable"),
        }
    }
    let report = g.check(&template.script, d);
    if report.passed {
        return Ok(done(template.script.clone(), report, true, MAX_GENERATION_ATTEMPTS));
    }
    // The source may be the general template at another duration; adapt it
    // with rule fixes only.
    let mut adapted = template.script.clone();
    crate::forge::fit_structure_and_budget(&mut adapted, d, g.config);
    let report = g.check(&adapted, d);
    if report.passed {
        return Ok(done(adapted, report, true, MAX_GENERATION_ATTEMPTS));
    }
    Err(PersonalizeError::GenerationFailed { attempts: MAX_GENERATION_ATTEMPTS, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub min_s: f64,
    pub max_s: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self { min_s: 8.0, max_s: 15.0 }
    }
}

/// Waiting time shown in the static condition in place of real generation.
pub fn pseudo_delay(condition: Condition, seed: u64, cfg: &DelayConfig) -> Result<Duration, PersonalizeError> {
    if condition != Condition::Static {
        return Err(PersonalizeError::NotStatic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secs = if cfg.max_s > cfg.min_s { rng.random_range(cfg.min_s..=cfg.max_s) } else { cfg.min_s };
    Ok(Duration::from_secs_f64(secs.max(0.0)))
}
