//! SFT and DPO dataset records in JSON Lines form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::checker::{check_script_with, CheckerConfig, RarestTokenJudge};
use super::library::SafetyTemplate;
use super::malform::malformed_variants;
use super::{ForgeError, GuidanceLevel};
use crate::concept_kb::{ConceptEntry, KnowledgeBase};
use crate::providers::ChatMessage;
use crate::script::{Block, GuidanceScript};

pub const DEFAULT_AUGMENTATIONS: usize = 3;

pub const GENERATOR_SYSTEM: &str = "You are a meditation guide trained in Unified Mindfulness. \
Write guidance scripts in the sentinel line format: narration lines, [PAUSE <seconds>], \
[ASK <prompt> | <option> | <option>] followed by one [BRANCH <option>]...[/BRANCH] section per option.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionSource {
    Draft,
    MalformedAug,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt: Vec<ChatMessage>,
    pub chosen: String,
    pub rejected: String,
    pub rejection_source: RejectionSource,
}

fn request_text(goal: &str, duration_min: u32, guidance: GuidanceLevel) -> String {
    format!("Guide a {duration_min}-minute {goal} meditation ({guidance} guidance).")
}

/// System and user messages asking for a script.
pub fn generation_prompt(goal: &str, duration_min: u32, guidance: GuidanceLevel) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(GENERATOR_SYSTEM),
        ChatMessage::user(request_text(goal, duration_min, guidance)),
    ]
}

fn blocks_text(blocks: &[Block]) -> String {
    GuidanceScript::new(blocks.to_vec()).to_text()
}

/// One single-turn record per concept, then one record per listening path
/// of each template: the assistant speaks up to the question, the user picks
/// an option, the assistant continues with that branch and the rest.
pub fn build_sft_records(corpus: &[SafetyTemplate], concepts: &[ConceptEntry]) -> Vec<SftRecord> {
    let mut out = Vec::new();
    for c in concepts {
        out.push(SftRecord {
            messages: vec![
                ChatMessage::user(format!("What is {}?", c.name)),
                ChatMessage::assistant(c.definition.clone()),
            ],
        });
    }
    for t in corpus {
        let mut head = generation_prompt(&t.goal, t.duration_min, t.guidance_level);
        let blocks = &t.script.blocks;
        let Some(at) = blocks.iter().position(|b| matches!(b, Block::Interaction(_))) else {
            head.push(ChatMessage::assistant(t.script.to_text()));
            out.push(SftRecord { messages: head });
            continue;
        };
        let Block::Interaction(it) = &blocks[at] else { unreachable!() };
        let mut opening = blocks_text(&blocks[..at]);
        opening.push_str(&format!("[ASK {} | {}]\n", it.prompt, it.options.join(" | ")));
        for (opt, branch) in it.options.iter().zip(&it.branches) {
            let mut rest: Vec<Block> = branch.clone();
            rest.extend(blocks[at + 1..].iter().cloned());
            let mut messages = head.clone();
            messages.push(ChatMessage::assistant(opening.clone()));
            messages.push(ChatMessage::user(opt.clone()));
            messages.push(ChatMessage::assistant(blocks_text(&rest)));
            out.push(SftRecord { messages });
        }
    }
    out
}

/// One draft-rejected pair plus `k` pairs whose rejected side is a malformed
/// variant of the expert edit. The edit must pass the checkers.
pub fn build_dpo_pairs(
    draft: &GuidanceScript,
    expert_edit: &GuidanceScript,
    prompt: &[ChatMessage],
    duration_min: u32,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<Vec<DpoPair>, ForgeError> {
    let chosen = expert_edit.to_text();
    let rejected = draft.to_text();
    if chosen == rejected {
        return Err(ForgeError::IdenticalDraft);
    }
    let cfg = CheckerConfig::default();
    let report = check_script_with(expert_edit, duration_min, kb, &cfg, &RarestTokenJudge);
    if !report.passed {
        return Err(ForgeError::EditFails(report));
    }
    let mut pairs = vec![DpoPair {
        prompt: prompt.to_vec(),
        chosen: chosen.clone(),
        rejected,
        rejection_source: RejectionSource::Draft,
    }];
    let variants = malformed_variants(expert_edit, k, duration_min, kb, &cfg);
    if variants.len() < k {
        return Err(ForgeError::AugmentationExhausted { wanted: k, got: variants.len() });
    }
    pairs.extend(variants.into_iter().map(|v| DpoPair {
        prompt: prompt.to_vec(),
        chosen: chosen.clone(),
        rejected: v.text,
        rejection_source: RejectionSource::MalformedAug,
    }));
    Ok(pairs)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::check_text;
    use crate::forge::library::TemplateStatus;
    use crate::providers::Role;
    use crate::script::Interaction;

    fn template(script: GuidanceScript, duration_min: u32) -> SafetyTemplate {
        SafetyTemplate {
            template_id: "t".into(),
            goal: "Sleep".into(),
            duration_min,
            guidance_level: GuidanceLevel::More,
            script,
            status: TemplateStatus::Approved,
            is_general: false,
            approval: None,
        }
    }

    fn branchy(options: usize) -> GuidanceScript {
        let opts: Vec<String> = (0..options).map(|i| format!("Option {i}")).collect();
        GuidanceScript::new(vec![
            Block::narration("Settle in."),
            Block::Interaction(Interaction {
                prompt: "Where to rest?".into(),
                branches: opts.iter().map(|o| vec![Block::narration(format!("Rest with {o}."))]).collect(),
                options: opts,
            }),
            Block::narration("Gently open your eyes."),
        ])
    }

    #[test]
    fn one_concept_no_templates() {
        let kb = KnowledgeBase::default_fixture();
        let r = build_sft_records(&[], &kb.concepts()[..1]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].messages.last().unwrap().role, Role::Assistant);
    }

    #[test]
    fn two_option_template_gives_two_multi_turn_records() {
        let r = build_sft_records(&[template(branchy(2), 10)], &[]);
        assert_eq!(r.len(), 2);
        for (i, rec) in r.iter().enumerate() {
            let roles: Vec<Role> = rec.messages.iter().map(|m| m.role).collect();
            assert_eq!(roles, [Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant]);
            assert!(rec.messages[2].content.contains("[ASK Where to rest?"));
            assert_eq!(rec.messages[3].content, format!("Option {i}"));
            assert!(rec.messages[4].content.starts_with(&format!("Rest with Option {i}.")));
            assert!(rec.messages[4].content.ends_with("Gently open your eyes.\n"));
        }
    }

    #[test]
    fn eight_concepts_two_short_templates() {
        let kb = KnowledgeBase::default_fixture();
        let short = GuidanceScript::new(vec![Block::narration("Breathe."), Block::narration("Gently open your eyes.")]);
        let t = template(short, 5);
        let r = build_sft_records(&[t.clone(), t], kb.concepts());
        assert_eq!(r.len(), 8 + 2);
    }

    fn edit() -> GuidanceScript {
        let words = vec!["rest"; 396].join(" ");
        GuidanceScript::new(vec![
            Block::narration(words),
            Block::pause(60.0),
            Block::narration("Gently open your eyes."),
        ])
    }

    #[test]
    fn dpo_pairs_lead_with_the_draft() {
        let kb = KnowledgeBase::default_fixture();
        let mut draft = edit();
        draft.blocks.pop();
        let prompt = generation_prompt("Sleep", 5, GuidanceLevel::Less);
        let pairs = build_dpo_pairs(&draft, &edit(), &prompt, 5, &kb, 3).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0].rejection_source, RejectionSource::Draft);
        for p in &pairs[1..] {
            assert_eq!(p.rejection_source, RejectionSource::MalformedAug);
            assert_ne!(p.chosen, p.rejected);
            assert!(!check_text(&p.rejected, 5, &kb).1.passed);
        }
        let line = serde_json::to_value(&pairs[1]).unwrap();
        assert_eq!(line["rejection_source"], "malformed_aug");
        assert_eq!(line["prompt"][0]["role"], "system");
    }

    #[test]
    fn identical_draft_rejected() {
        let kb = KnowledgeBase::default_fixture();
        assert!(matches!(
            build_dpo_pairs(&edit(), &edit(), &[], 5, &kb, 3),
            Err(ForgeError::IdenticalDraft)
        ));
    }

    #[test]
    fn jsonl_one_object_per_line() {
        let mut buf = Vec::new();
        let recs = build_sft_records(&[], KnowledgeBase::default_fixture().concepts());
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["messages"][0]["role"], "user");
    }
}
