use std::collections::HashMap;

use chrono::NaiveDate;
use sati_core::concept_kb::KnowledgeBase;
use sati_core::forge::{
    check_script, CheckerConfig, Corpus, GuidanceLevel, RarestTokenJudge, SafetyTemplate, TemplateStatus,
};
use sati_core::personalization::{
    assemble_prompt, generate_personalized, pseudo_delay, DelayConfig, Generation, ModelIds, Mood,
    PersonalizeError, PracticeHistory, PromptConfig, SessionInputs, UserProfile,
};
use sati_core::providers::{ChatGateway, ChatMessage, ChatRequest, MockChat, ProviderError};
use sati_core::reflection::ReflectionTranscript;
use sati_core::session::{CheckIn, Condition};

struct Down;

impl ChatGateway for Down {
    fn chat(&self, _: &ChatRequest) -> Result<ChatMessage, ProviderError> {
        Err(ProviderError::Unreachable("connection refused".into()))
    }
}

fn kb() -> KnowledgeBase {
    KnowledgeBase::default_fixture()
}

fn template(id: &str) -> SafetyTemplate {
    Corpus::default_fixture().templates.into_iter().find(|t| t.template_id == id).unwrap()
}

fn inputs(d: u32) -> SessionInputs {
    SessionInputs {
        user_id: "u".into(),
        mood: Mood::Negative,
        goal: "Sleep".into(),
        duration_min: d,
        technique: "noting".into(),
        guidance_level: GuidanceLevel::More,
    }
}

fn profile() -> UserProfile {
    UserProfile { display_name: "Ana".into(), prior_session_count: 2 }
}

fn closed_transcript() -> ReflectionTranscript {
    let mut t = ReflectionTranscript::new("s");
    t.close().unwrap();
    t
}

fn models() -> ModelIds {
    ModelIds { base: "base".into(), finetuned: "tuned".into() }
}

#[test]
fn prompt_ladder_adds_one_block_per_rung() {
    let kb = kb();
    let t = template("sleep-10-more");
    let history = PracticeHistory { related: vec!["Past: slept well.".into()], recent: vec!["Recent one.".into()] };
    let checkins = vec![CheckIn {
        user_id: "u".into(),
        date: NaiveDate::from_ymd_opt(2024, 4, 1).unwrap(),
        sleep: 2,
        mood: 3,
        focus: 4,
    }];
    let tr = closed_transcript();
    let bundle = |c| assemble_prompt(&inputs(10), &profile(), &t, Some(&tr), &history, &checkins, c, &kb, &models()).unwrap();

    let a = bundle(PromptConfig::A);
    assert_eq!(a.model_id, "base");
    assert!(a.refresher_block.is_none() && a.reflection_block.is_none() && a.recent_block.is_none());
    let b = bundle(PromptConfig::B);
    assert_eq!(b.model_id, "tuned");
    assert_eq!(b.user_message(), a.user_message());
    let c = bundle(PromptConfig::C);
    assert!(c.refresher_block.as_ref().unwrap().contains("Noting"));
    assert!(c.reflection_block.is_none());
    let d = bundle(PromptConfig::D);
    assert_eq!(d.reflection_block.as_ref().unwrap().related, history.related);
    assert!(d.recent_block.is_none());
    let e = bundle(PromptConfig::E);
    let recent = e.recent_block.clone().unwrap();
    assert!(recent.contains("sleep 2, mood 3, focus 4") && recent.contains("Recent one."));

    let msg = e.user_message();
    let order: Vec<usize> = ["## PROFILE", "## TEMPLATE", "## TECHNIQUE REFRESHER", "## REFLECTION", "## RECENT"]
        .iter()
        .map(|h| msg.find(h).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
    assert!(msg.contains(&t.script.to_text().trim_end().to_string()));
}

#[test]
fn assembly_is_pure() {
    let kb = kb();
    let t = template("sleep-10-more");
    let h = PracticeHistory::default();
    let a = assemble_prompt(&inputs(10), &profile(), &t, None, &h, &[], PromptConfig::D, &kb, &models()).unwrap();
    let b = assemble_prompt(&inputs(10), &profile(), &t, None, &h, &[], PromptConfig::D, &kb, &models()).unwrap();
    assert_eq!(a, b);
    assert!(a.reflection_block.unwrap().is_empty());
}

#[test]
fn assembly_rejects_open_transcripts_and_drafts() {
    let kb = kb();
    let h = PracticeHistory::default();
    let open = ReflectionTranscript::new("s");
    let t = template("sleep-10-more");
    assert!(matches!(
        assemble_prompt(&inputs(10), &profile(), &t, Some(&open), &h, &[], PromptConfig::D, &kb, &models()),
        Err(PersonalizeError::OpenTranscript)
    ));
    let mut skipped = ReflectionTranscript::new("s");
    skipped.skip();
    assert!(assemble_prompt(&inputs(10), &profile(), &t, Some(&skipped), &h, &[], PromptConfig::D, &kb, &models()).is_ok());
    let mut draft = t.clone();
    draft.status = TemplateStatus::Draft;
    assert!(matches!(
        assemble_prompt(&inputs(10), &profile(), &draft, None, &h, &[], PromptConfig::D, &kb, &models()),
        Err(PersonalizeError::UnapprovedTemplate(_))
    ));
}

#[test]
fn invalid_inputs_are_rejected() {
    let kb = kb();
    assert!(matches!(inputs(7).validated(&kb), Err(PersonalizeError::InvalidInputs(_))));
    let mut i = inputs(10);
    i.technique = "juggling".into();
    assert!(matches!(i.validated(&kb), Err(PersonalizeError::UnknownTechnique(_))));
    let mut i = inputs(10);
    i.technique = "SHF".into();
    assert_eq!(i.validated(&kb).unwrap().technique, "see-hear-feel");
}

fn run(chat: &dyn ChatGateway, t: &SafetyTemplate, d: u32) -> Result<sati_core::personalization::PersonalizedScript, PersonalizeError> {
    let kb = kb();
    let cfg = CheckerConfig::default();
    let bundle = assemble_prompt(&inputs(d), &profile(), t, None, &PracticeHistory::default(), &[], PromptConfig::D, &kb, &models()).unwrap();
    let g = Generation { kb: &kb, config: &cfg, judge: &RarestTokenJudge, chat };
    generate_personalized("s", &inputs(d), &bundle, t, &g)
}

#[test]
fn mock_generation_passes_on_first_attempt() {
    let chat = MockChat::with_default_table();
    let out = run(&chat, &template("sleep-10-more"), 10).unwrap();
    assert!(out.check_report.passed && !out.fallback);
    assert_eq!(out.attempts, 1);
    assert_eq!(out.model_id, "tuned");
}

#[test]
fn wrong_definition_is_corrected() {
    let t = template("sleep-10-more");
    let bad = t.script.to_text().replacen(
        "Restful States means",
        "Restful States means pushing every sensation away. Earlier we said it",
        1,
    );
    assert_ne!(bad, t.script.to_text());
    let mut table = HashMap::new();
    table.insert("personalize".to_string(), bad);
    let chat = MockChat::new(table);
    let out = run(&chat, &t, 10).unwrap();
    assert!(out.check_report.passed);
    assert!(!out.fallback);
    assert!(check_script(&out.script, 10, &kb()).passed);
}

#[test]
fn endpoint_down_falls_back_to_the_template() {
    let t = template("sleep-10-more");
    let out = run(&Down, &t, 10).unwrap();
    assert!(out.fallback);
    assert_eq!(out.attempts, 3);
    assert_eq!(out.script, t.script);
}

#[test]
fn general_template_at_another_duration_is_adapted() {
    let t = template("general-10");
    for d in [5, 15] {
        let out = run(&Down, &t, d).unwrap();
        assert!(out.fallback);
        assert!(check_script(&out.script, d, &kb()).passed, "{d} min");
    }
}

#[test]
fn unparseable_output_counts_as_a_failed_attempt() {
    let mut table = HashMap::new();
    table.insert("personalize".to_string(), "[PAUSE".to_string());
    let chat = MockChat::new(table);
    let out = run(&chat, &template("sleep-10-more"), 10).unwrap();
    assert!(out.fallback);
    assert_eq!(chat.calls(), 3);
}

#[test]
fn pseudo_delay_is_bounded_seeded_and_static_only() {
    let cfg = DelayConfig::default();
    for seed in 0..200 {
        let d = pseudo_delay(Condition::Static, seed, &cfg).unwrap().as_secs_f64();
        assert!((8.0..=15.0).contains(&d));
    }
    assert_eq!(pseudo_delay(Condition::Static, 7, &cfg).unwrap(), pseudo_delay(Condition::Static, 7, &cfg).unwrap());
    assert!(matches!(pseudo_delay(Condition::Mindful, 7, &cfg), Err(PersonalizeError::NotStatic)));
}
