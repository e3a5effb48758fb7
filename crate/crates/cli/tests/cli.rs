use std::path::Path;
use std::process::{Command, Output};

use chrono::{Days, Utc};
use sati_core::concept_kb::KnowledgeBase;
use sati_core::forge::{check_text, Corpus, GuidanceLevel, TemplateStatus};
use sati_core::personalization::Mood;
use sati_core::session::{Condition, EventLog, InputChoices, ServiceConfig, ServiceParts, SessionService};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).env_remove("TEMPLATE_CORPUS").output().unwrap()
}

fn analytics(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_analytics")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn template_text(id: &str) -> String {
    Corpus::default_fixture().templates.into_iter().find(|t| t.template_id == id).unwrap().script.to_text()
}

fn without_ending(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    lines.join("\n") + "\n"
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = p(dir.path(), "good.txt");
    std::fs::write(&good, template_text("sleep-10-more")).unwrap();
    let o = forge(&["check", &good, "--duration", "10"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("\"passed\": true"));

    let bad = p(dir.path(), "bad.txt");
    std::fs::write(&bad, without_ending(&template_text("sleep-10-more"))).unwrap();
    let o = forge(&["check", &bad, "--duration", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("\"ending\""));
}

#[test]
fn correct_repairs_a_missing_ending() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.txt");
    std::fs::write(&bad, without_ending(&template_text("focus-05-more"))).unwrap();
    let fixed = p(dir.path(), "fixed.txt");
    let o = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["correct", &bad, "--duration", "5", "--out", &fixed])
        .env("PROVIDER_MODE", "mock")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, report) = check_text(&std::fs::read_to_string(&fixed).unwrap(), 5, &KnowledgeBase::default_fixture());
    assert!(report.passed, "{report:?}");
}

#[test]
fn emit_sft_and_dpo() {
    let dir = tempfile::tempdir().unwrap();
    let sft = p(dir.path(), "sft.jsonl");
    assert!(forge(&["emit-sft", "--out", &sft]).status.success());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&sft)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 45);
    assert!(lines.iter().all(|l| l["messages"].is_array()));

    let edit = p(dir.path(), "edit.txt");
    let draft = p(dir.path(), "draft.txt");
    std::fs::write(&edit, template_text("break-10-less")).unwrap();
    std::fs::write(&draft, without_ending(&template_text("break-10-less"))).unwrap();
    let dpo = p(dir.path(), "dpo.jsonl");
    let o = forge(&["emit-dpo", "--draft", &draft, "--edit", &edit, "--out", &dpo, "--goal", "Work Break", "--guidance", "less"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kb = KnowledgeBase::default_fixture();
    let pairs: Vec<serde_json::Value> =
        std::fs::read_to_string(&dpo).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(pairs.len(), 4);
    assert_eq!(pairs[0]["rejection_source"], "draft");
    for pair in &pairs[1..] {
        assert_eq!(pair["rejection_source"], "malformed_aug");
        assert!(!check_text(pair["rejected"].as_str().unwrap(), 10, &kb).1.passed);
    }
}

#[test]
fn approve_rewrites_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = Corpus::default_fixture();
    let mut draft = corpus.templates[0].clone();
    draft.template_id = "sleep-05-more-v2".into();
    draft.status = TemplateStatus::ExpertEdited;
    draft.approval = None;
    corpus.templates.push(draft);
    let path = p(dir.path(), "corpus.json");
    std::fs::write(&path, corpus.to_json()).unwrap();

    let o = forge(&["--corpus", &path, "approve", "sleep-05-more-v2", "--by", "lead-teacher"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after = Corpus::load(&path).unwrap();
    let t = after.templates.iter().find(|t| t.template_id == "sleep-05-more-v2").unwrap();
    assert!(t.is_approved());
    assert_eq!(t.approval.as_ref().unwrap().approver, "lead-teacher");

    let again = forge(&["--corpus", &path, "approve", "sleep-05-more-v2", "--by", "x"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already approved"));
}

#[test]
fn analytics_holm_and_tests() {
    let dir = tempfile::tempdir().unwrap();
    let ps = p(dir.path(), "p.csv");
    std::fs::write(&ps, "p\n0.01\n0.04\n0.03\n").unwrap();
    let o = analytics(&["holm", "--in", &ps]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "p,adjusted\n0.01,0.03\n0.04,0.06\n0.03,0.06\n");

    let groups = p(dir.path(), "g.csv");
    std::fs::write(&groups, "a,b\n1,1\n2,2\n3,3\n,4\n").unwrap();
    let o = analytics(&["test", "--method", "mwu", "--in", &groups]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["method"], "mann_whitney_u");
    assert_eq!(r["exact"], true);

    let grid = p(dir.path(), "f.csv");
    std::fs::write(&grid, "x,y,z\n1,2,3\n1,2,3\n1,2,3\n1,2,3\n").unwrap();
    let o = analytics(&["test", "--method", "friedman", "--in", &grid]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["statistic"], 8.0);

    let o = analytics(&["test", "--method", "mwu", "--in", &grid]);
    assert!(!o.status.success());
}

#[test]
fn analytics_engagement_reads_the_service_log() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.jsonl");
    {
        let svc = SessionService::new(ServiceParts::mock(), ServiceConfig::default(), EventLog::open(&events).unwrap())
            .unwrap();
        let u = svc.create_user("Ana", None, 0).unwrap();
        for _ in 0..2 {
            let s = svc.create_session(&u.user_id, Some(Condition::Static)).unwrap();
            let choices = InputChoices {
                mood: Mood::Positive,
                goal: "Sleep".into(),
                duration_min: 10,
                technique: "Noting".into(),
                guidance_level: GuidanceLevel::More,
            };
            svc.set_inputs(&s.session_id, choices).unwrap();
            svc.generate(&s.session_id).unwrap();
            svc.audio(&s.session_id).unwrap();
            svc.submit_feedback(&s.session_id, 5, "").unwrap();
        }
        svc.create_user("Ben", None, 0).unwrap();
    }
    let today = Utc::now().date_naive();
    let (from, to) = (today.to_string(), (today + Days::new(2)).to_string());
    let ev = events.to_str().unwrap();
    let o = analytics(&["engagement", "--from", &from, "--to", &to, "--events", ev]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("user_id,sessions,days,rate\n"));
    assert!(out.contains(",2,2,1\n") && out.contains(",0,2,0\n"), "{out}");

    let o = analytics(&["engagement", "--from", &from, "--to", &to, "--events", ev, "--by-condition"]);
    let out = stdout(&o);
    assert!(out.contains("static,1,\"Mean=1.00, SD=0.00\""), "{out}");
    assert!(out.contains("mindful,0,"), "{out}");
}
