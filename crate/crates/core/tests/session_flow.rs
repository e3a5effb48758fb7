mod common;

use chrono::{Duration, NaiveDate};
use common::{choices, harness, harness_with_log, Harness};
use sati_core::forge::Corpus;
use sati_core::personalization::{Mood, PromptConfig};
use sati_core::reflection::ReflectionMode;
use sati_core::session::{CardKind, Condition, EventLog, ScriptKind, ServiceError, SessionState};

fn completed(h: &Harness, user: &str, condition: Condition, goal: &str, technique: &str) -> String {
    let s = h.svc.create_session(user, Some(condition)).unwrap();
    let mut c = choices(goal, 10);
    c.technique = technique.into();
    h.svc.set_inputs(&s.session_id, c).unwrap();
    if condition == Condition::Mindful {
        h.svc.skip_reflection(&s.session_id).unwrap();
    }
    h.svc.generate(&s.session_id).unwrap();
    h.svc.audio(&s.session_id).unwrap();
    h.svc.submit_feedback(&s.session_id, 4, "Felt settled. More silence next time.").unwrap();
    s.session_id
}

#[test]
fn create_session_requires_known_user_and_gives_distinct_ids() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let a = h.svc.create_session(&u.user_id, None).unwrap();
    let b = h.svc.create_session(&u.user_id, None).unwrap();
    assert_eq!(a.state, SessionState::Created);
    assert_ne!(a.session_id, b.session_id);
    assert!(matches!(h.svc.create_session("nobody", None), Err(ServiceError::UnknownUser(_))));
}

#[test]
fn inputs_are_validated_and_immutable() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, None).unwrap();
    assert!(h.svc.set_inputs(&s.session_id, choices("Sleep", 7)).is_err());
    assert_eq!(h.svc.session(&s.session_id).unwrap().state, SessionState::Created);
    let r = h.svc.set_inputs(&s.session_id, choices("sleep", 10)).unwrap();
    assert_eq!(r.state, SessionState::InputsSet);
    assert_eq!(r.inputs.unwrap().goal, "Sleep");
    assert!(matches!(
        h.svc.set_inputs(&s.session_id, choices("Sleep", 10)),
        Err(ServiceError::BadState { .. })
    ));
}

#[test]
fn static_condition_delivers_the_template_without_model_calls() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, Some(Condition::Static)).unwrap();
    // Duration and guidance chosen here are ignored in the static arm.
    let mut c = choices("Sleep", 5);
    c.guidance_level = sati_core::forge::GuidanceLevel::Less;
    h.svc.set_inputs(&s.session_id, c).unwrap();
    assert!(matches!(h.svc.open_reflection(&s.session_id), Err(ServiceError::ReflectionUnavailable(_))));
    let before = h.chat.count();
    let out = h.svc.generate(&s.session_id).unwrap();
    assert_eq!(h.chat.count(), before);
    assert_eq!(out.delivered.kind, ScriptKind::Template);
    assert_eq!(out.delivered.source_template_id, "sleep-10-more");
    let corpus = Corpus::default_fixture();
    let t = corpus.templates.iter().find(|t| t.template_id == "sleep-10-more").unwrap();
    assert!(t.is_approved());
    assert_eq!(out.delivered.script.to_text(), t.script.to_text());
    let delay = out.delivered.pseudo_delay_ms.unwrap();
    assert!((8_000..=15_000).contains(&delay));
    assert!(!out.deck.cards.is_empty());
    assert_eq!(out.script_ref, "template:sleep-10-more");
}

#[test]
fn mindful_skip_uses_config_d_with_empty_reflection() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, Some(Condition::Mindful)).unwrap();
    h.svc.set_inputs(&s.session_id, choices("Improve Focus", 10)).unwrap();
    let t = h.svc.skip_reflection(&s.session_id).unwrap();
    assert!(t.skipped && t.mode_segments.is_empty());
    let out = h.svc.generate(&s.session_id).unwrap();
    assert_eq!(out.delivered.kind, ScriptKind::Personalized);
    assert_eq!(out.delivered.prompt_config, Some(PromptConfig::D));
    assert!(out.delivered.check_report.passed);
    let req = h.chat.tagged("personalize");
    assert_eq!(req.len(), 1);
    let user = req[0].last_user().unwrap();
    assert!(user.contains("## REFLECTION\n(empty"));
    assert!(user.contains("## TECHNIQUE REFRESHER"));
}

#[test]
fn personal_condition_has_no_reflection_transcript() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, Some(Condition::Personal)).unwrap();
    h.svc.set_inputs(&s.session_id, choices("Improve Focus", 10)).unwrap();
    assert!(matches!(h.svc.skip_reflection(&s.session_id), Err(ServiceError::ReflectionUnavailable(_))));
    h.svc.generate(&s.session_id).unwrap();
    let user = h.chat.tagged("personalize")[0].last_user().unwrap().to_string();
    assert!(!user.contains("Conversation before this session"));
    assert!(h.svc.session(&s.session_id).unwrap().transcript.is_none());
}

#[test]
fn reflection_flows_into_the_prompt() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, Some(Condition::Mindful)).unwrap();
    let mut c = choices("Sleep", 10);
    c.mood = Mood::Negative;
    h.svc.set_inputs(&s.session_id, c).unwrap();
    let (opener, _) = h.svc.open_reflection(&s.session_id).unwrap();
    assert!(opener.content.starts_with("I'm really sorry to hear you're not feeling well"));
    assert!(matches!(h.svc.generate(&s.session_id), Err(ServiceError::ReflectionOpen)));
    h.svc.reflect_turn(&s.session_id, "My mind races at night", ReflectionMode::Present).unwrap();
    h.svc.close_reflection(&s.session_id).unwrap();
    assert!(h.svc.close_reflection(&s.session_id).is_err());
    h.svc.generate(&s.session_id).unwrap();
    let user = h.chat.tagged("personalize")[0].last_user().unwrap().to_string();
    assert!(user.contains("My mind races at night"));
}

#[test]
fn full_flow_stores_feedback_and_summary() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, Some(Condition::Mindful)).unwrap();
    assert!(matches!(h.svc.submit_feedback(&s.session_id, 4, "x"), Err(ServiceError::BadState { .. })));
    h.svc.set_inputs(&s.session_id, choices("Sleep", 10)).unwrap();
    h.svc.skip_reflection(&s.session_id).unwrap();
    h.svc.generate(&s.session_id).unwrap();
    let clip = h.svc.audio(&s.session_id).unwrap();
    assert!(clip.duration_s > 0.0);
    assert_eq!(h.svc.session(&s.session_id).unwrap().state, SessionState::Playing);
    assert!(matches!(h.svc.submit_feedback(&s.session_id, 6, "x"), Err(ServiceError::InvalidInput(_))));
    let r = h.svc.submit_feedback(&s.session_id, 4, "Calmer now. Thanks.").unwrap();
    assert_eq!(r.state, SessionState::Completed);
    assert_eq!(r.feedback.as_ref().unwrap().rating, 4);
    let summary = r.summary.unwrap();
    assert!(summary.summary_text.contains("Sleep") && summary.summary_text.contains("Noting"));
    assert!(summary.summary_text.chars().count() <= 500);
    let states: Vec<SessionState> = r.transitions.iter().map(|t| t.state).collect();
    assert_eq!(
        states,
        [
            SessionState::Created,
            SessionState::InputsSet,
            SessionState::Generating,
            SessionState::Ready,
            SessionState::Playing,
            SessionState::Feedback,
            SessionState::Completed
        ]
    );
}

#[test]
fn cards_show_only_the_requesting_users_summaries() {
    let h = harness();
    let a = h.svc.create_user("Ana", None, 0).unwrap();
    let b = h.svc.create_user("Ben", None, 0).unwrap();
    let sa = completed(&h, &a.user_id, Condition::Mindful, "Sleep", "noting");
    let sb = completed(&h, &b.user_id, Condition::Mindful, "Improve Focus", "equanimity");
    let next = h.svc.create_session(&a.user_id, Some(Condition::Mindful)).unwrap();
    h.svc.set_inputs(&next.session_id, choices("Sleep", 10)).unwrap();
    let deck = h.svc.cards(&next.session_id).unwrap();
    let mine = h.svc.session(&sa).unwrap().summary.unwrap().summary_text;
    let theirs = h.svc.session(&sb).unwrap().summary.unwrap().summary_text;
    let summaries: Vec<&str> = deck
        .cards
        .iter()
        .filter(|c| c.kind == CardKind::PersonalSummary)
        .map(|c| c.text.as_str())
        .collect();
    assert_eq!(summaries, vec![mine.as_str()]);
    assert!(!summaries.contains(&theirs.as_str()));
    assert!(deck.cards.iter().any(|c| c.kind == CardKind::Tip));
}

#[test]
fn checkins_upsert_and_validate() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let d = NaiveDate::from_ymd_opt(2024, 4, 2).unwrap();
    h.svc.record_checkin(&u.user_id, d, 3, 4, 2).unwrap();
    h.svc.record_checkin(&u.user_id, d, 5, 5, 5).unwrap();
    let all = h.svc.checkins(&u.user_id);
    assert_eq!(all.len(), 1);
    assert_eq!((all[0].sleep, all[0].mood, all[0].focus), (5, 5, 5));
    assert!(matches!(h.svc.record_checkin(&u.user_id, d, 0, 3, 3), Err(ServiceError::InvalidInput(_))));
}

#[test]
fn menu_order_cold_start_frequency_and_recency() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let fixture: Vec<String> = h.svc.kb().goals().iter().map(|g| g.goal.clone()).collect();
    assert_eq!(h.svc.menu_order(&u.user_id).goals, fixture);

    for _ in 0..3 {
        completed(&h, &u.user_id, Condition::Static, "Sleep", "noting");
        h.clock.advance(Duration::minutes(5));
    }
    assert_eq!(h.svc.menu_order(&u.user_id).goals[0], "Sleep");

    // Two goals once each: the more recently completed one ranks higher.
    let v = h.svc.create_user("Ben", None, 0).unwrap();
    completed(&h, &v.user_id, Condition::Static, "Improve Focus", "noting");
    h.clock.advance(Duration::minutes(5));
    completed(&h, &v.user_id, Condition::Static, "Work Break", "see-hear-feel");
    let order = h.svc.menu_order(&v.user_id);
    assert_eq!(&order.goals[..2], ["Work Break", "Improve Focus"]);
    assert_eq!(&order.techniques[..2], ["See-Hear-Feel", "Noting"]);
}

#[test]
fn idle_sessions_are_abandoned_after_an_hour() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    let s = h.svc.create_session(&u.user_id, None).unwrap();
    let done = completed(&h, &u.user_id, Condition::Static, "Sleep", "noting");
    h.clock.advance(Duration::minutes(59));
    assert!(h.svc.sweep_idle().unwrap().is_empty());
    h.clock.advance(Duration::minutes(1));
    assert_eq!(h.svc.sweep_idle().unwrap(), vec![s.session_id.clone()]);
    assert_eq!(h.svc.session(&s.session_id).unwrap().state, SessionState::Abandoned);
    assert_eq!(h.svc.session(&done).unwrap().state, SessionState::Completed);
}

#[test]
fn replaying_the_log_rebuilds_every_projection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let h = harness_with_log(EventLog::open(&path).unwrap());
    let u = h.svc.create_user("Ana", None, 60).unwrap();
    completed(&h, &u.user_id, Condition::Mindful, "Sleep", "noting");
    let open = h.svc.create_session(&u.user_id, Some(Condition::Mindful)).unwrap();
    h.svc.set_inputs(&open.session_id, choices("Improve Focus", 15)).unwrap();
    h.svc.open_reflection(&open.session_id).unwrap();
    h.svc.reflect_turn(&open.session_id, "what is equanimity?", ReflectionMode::Terms).unwrap();
    h.svc.record_checkin(&u.user_id, NaiveDate::from_ymd_opt(2024, 4, 1).unwrap(), 2, 3, 4).unwrap();

    let again = harness_with_log(EventLog::open(&path).unwrap());
    assert_eq!(again.svc.sessions(), h.svc.sessions());
    assert_eq!(again.svc.users(), h.svc.users());
    assert_eq!(again.svc.checkins(&u.user_id), h.svc.checkins(&u.user_id));
    assert_eq!(again.svc.menu_order(&u.user_id), h.svc.menu_order(&u.user_id));
    // Summaries are re-indexed, so the next deck still shows them.
    assert_eq!(again.svc.cards(&open.session_id).unwrap(), h.svc.cards(&open.session_id).unwrap());
}

#[test]
fn every_logged_transition_is_an_edge() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 0).unwrap();
    completed(&h, &u.user_id, Condition::Mindful, "Sleep", "noting");
    completed(&h, &u.user_id, Condition::Personal, "Improve Focus", "noting");
    let s = h.svc.create_session(&u.user_id, None).unwrap();
    h.svc.abandon(&s.session_id).unwrap();
    let mut n = 0;
    for e in h.svc.log().events().iter().filter(|e| e.event == "state_changed") {
        let from: SessionState = serde_json::from_value(e.payload["from"].clone()).unwrap();
        let to: SessionState = serde_json::from_value(e.payload["to"].clone()).unwrap();
        assert!(from.can_transition(to), "{from} -> {to}");
        n += 1;
    }
    assert!(n >= 13);
    for line in h.svc.log().events() {
        let v = serde_json::to_value(&line).unwrap();
        for key in ["ts", "session_id", "event", "payload"] {
            assert!(v.get(key).is_some());
        }
    }
}

#[test]
fn reminders_use_the_user_offset() {
    let h = harness();
    let u = h.svc.create_user("Ana", None, 120).unwrap();
    // 12:00 UTC is 14:00 at +02:00; next 09:00 local is 07:00 UTC tomorrow.
    let next = h.svc.next_reminder(&u.user_id, common::t0()).unwrap();
    assert_eq!(next, common::t0() + Duration::hours(19));
}

#[test]
fn engagement_counts_completed_sessions_per_condition() {
    let h = harness();
    let a = h.svc.create_user("Ana", None, 0).unwrap();
    let b = h.svc.create_user("Ben", None, 0).unwrap();
    completed(&h, &a.user_id, Condition::Mindful, "Sleep", "noting");
    completed(&h, &a.user_id, Condition::Mindful, "Sleep", "noting");
    completed(&h, &b.user_id, Condition::Static, "Sleep", "noting");
    let day = common::t0().date_naive();
    let window = sati_core::analytics::DateWindow::new(day, day + Duration::days(2)).unwrap();
    let report = h.svc.engagement(window, None).unwrap();
    let ana = report.per_user.iter().find(|e| e.user_id == a.user_id).unwrap();
    assert_eq!(ana.sessions_count, 2);
    assert_eq!(ana.rate, 1.0);
    let mindful = &report.daily[&Condition::Mindful];
    assert_eq!(mindful[0].sessions, 2);
    assert_eq!(mindful[0].users, 1);
    assert_eq!(mindful[1].sessions, 0);
}
