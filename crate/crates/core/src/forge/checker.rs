//! Format, ending and definition checks over guidance scripts.

use std::collections::HashSet;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::concept_kb::{ConceptEntry, KnowledgeBase};
use crate::providers::{ChatGateway, ChatMessage, ChatRequest};
use crate::script::{Block, GuidanceScript};
use crate::text;

pub const SUPPORTED_DURATIONS: [u32; 3] = [5, 10, 15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    Format,
    Ending,
    Definition,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Format => "format",
            ViolationKind::Ending => "ending",
            ViolationKind::Definition => "definition",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, location: impl Into<String>, message: impl Into<String>) -> Self {
        Self { kind, location: location.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self { passed: violations.is_empty(), violations }
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn kinds(&self) -> Vec<ViolationKind> {
        let mut seen = Vec::new();
        for v in &self.violations {
            if !seen.contains(&v.kind) {
                seen.push(v.kind);
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerConfig {
    /// Case-insensitive phrases of which the final block must contain one.
    pub closing_phrases: Vec<String>,
    /// Allowed relative deviation of every path's predicted duration.
    pub tolerance: f64,
    /// Longest single pause accepted, in seconds.
    pub max_pause_s: f64,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        Self {
            closing_phrases: vec!["gently open your eyes".into(), "this completes your practice".into()],
            tolerance: 0.2,
            max_pause_s: 180.0,
        }
    }
}

impl CheckerConfig {
    /// Inclusive (low, high) bounds in seconds for a duration in minutes.
    pub fn budget(&self, duration_min: u32) -> (f64, f64) {
        let target = f64::from(duration_min) * 60.0;
        (target * (1.0 - self.tolerance), target * (1.0 + self.tolerance))
    }

    pub fn is_closing(&self, narration: &str) -> bool {
        let lower = narration.to_lowercase();
        self.closing_phrases.iter().any(|p| lower.contains(&p.to_lowercase()))
    }
}

const BUDGET_EPS: f64 = 1e-9;

/// Decides whether a sentence asserting something about a concept agrees
/// with its canonical definition.
pub trait DefinitionJudge: Send + Sync {
    fn consistent(&self, kb: &KnowledgeBase, concept: &ConceptEntry, sentence: &str) -> bool;
}

/// Deterministic judge: the sentence must contain every signature token of
/// the canonical definition.
#[derive(Debug, Clone, Copy, Default)]
pub struct RarestTokenJudge;

impl DefinitionJudge for RarestTokenJudge {
    fn consistent(&self, kb: &KnowledgeBase, concept: &ConceptEntry, sentence: &str) -> bool {
        kb.agrees_with_definition(&concept.id, sentence)
    }
}

/// Judge backed by a chat model answering CONSISTENT or INCONSISTENT.
/// Gateway failures count as inconsistent.
pub struct LlmJudge<C> {
    pub chat: C,
    pub model_id: String,
}

const JUDGE_SYSTEM: &str = "You compare a sentence from a meditation script with the canonical \
definition of a mindfulness term. Reply with exactly one word: CONSISTENT if the sentence \
agrees with the definition, INCONSISTENT otherwise.";

impl<C: ChatGateway> DefinitionJudge for LlmJudge<C> {
    fn consistent(&self, _kb: &KnowledgeBase, concept: &ConceptEntry, sentence: &str) -> bool {
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![
                ChatMessage::system(JUDGE_SYSTEM),
                ChatMessage::user(format!(
                    "TERM: {}\nDEFINITION: {}\nSENTENCE: {}",
                    concept.name, concept.definition, sentence
                )),
            ],
        )
        .tagged("judge-definition");
        match self.chat.chat(&req) {
            Ok(reply) => {
                let upper = reply.content.to_uppercase();
                !upper.contains("INCONSISTENT") && upper.contains("CONSISTENT")
            }
            Err(e) => {
                tracing::warn!(error = %e, "definition judge unavailable");
                false
            }
        }
    }
}

/// A sentence asserting "<term> means/is ..." about a KB concept.
#[derive(Debug, Clone, PartialEq)]
pub struct DefinitionClaim<'a> {
    pub concept_id: String,
    pub sentence: &'a str,
}

/// Finds definitional assertions about KB terms.
pub struct ClaimScanner<'k> {
    kb: &'k KnowledgeBase,
    re: Regex,
}

impl<'k> ClaimScanner<'k> {
    pub fn new(kb: &'k KnowledgeBase) -> Self {
        let mut terms: Vec<&str> = kb.terms().map(|(t, _)| t).collect();
        // longest first so multi-word names win over their prefixes
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let alts: Vec<String> = terms
            .iter()
            .map(|t| t.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"[\s\-]+"))
            .collect();
        let re = Regex::new(&format!(r"(?i)\b({})\s+(?:means|is)\b", alts.join("|")))
            .expect("term pattern compiles");
        Self { kb, re }
    }

    pub fn claims<'t>(&self, narration: &'t str) -> Vec<DefinitionClaim<'t>> {
        let mut out = Vec::new();
        for sentence in text::sentences(narration) {
            let mut seen = HashSet::new();
            for cap in self.re.captures_iter(sentence) {
                if let Some(c) = self.kb.lookup_concept(&cap[1]) {
                    if seen.insert(c.id.clone()) {
                        out.push(DefinitionClaim { concept_id: c.id.clone(), sentence });
                    }
                }
            }
        }
        out
    }
}

/// Checks with the default configuration and the rarest-token judge.
pub fn check_script(script: &GuidanceScript, duration_min: u32, kb: &KnowledgeBase) -> CheckReport {
    check_script_with(script, duration_min, kb, &CheckerConfig::default(), &RarestTokenJudge)
}

/// Parses and checks script text; parse errors are format violations.
pub fn check_text(
    src: &str,
    duration_min: u32,
    kb: &KnowledgeBase,
) -> (Option<GuidanceScript>, CheckReport) {
    check_text_with(src, duration_min, kb, &CheckerConfig::default(), &RarestTokenJudge)
}

pub fn check_text_with(
    src: &str,
    duration_min: u32,
    kb: &KnowledgeBase,
    cfg: &CheckerConfig,
    judge: &dyn DefinitionJudge,
) -> (Option<GuidanceScript>, CheckReport) {
    match GuidanceScript::parse(src) {
        Ok(s) => {
            let r = check_script_with(&s, duration_min, kb, cfg, judge);
            (Some(s), r)
        }
        Err(e) => (
            None,
            CheckReport::from_violations(vec![Violation::new(
                ViolationKind::Format,
                format!("line {}", e.line),
                e.message,
            )]),
        ),
    }
}

pub fn check_script_with(
    script: &GuidanceScript,
    duration_min: u32,
    kb: &KnowledgeBase,
    cfg: &CheckerConfig,
    judge: &dyn DefinitionJudge,
) -> CheckReport {
    let mut v = Vec::new();
    check_format(script, duration_min, cfg, &mut v);
    check_ending(script, cfg, &mut v);
    check_definitions(script, kb, judge, &mut v);
    CheckReport::from_violations(v)
}

fn check_blocks(blocks: &[Block], prefix: &str, nested: bool, cfg: &CheckerConfig, v: &mut Vec<Violation>) {
    use ViolationKind::Format;
    for (i, b) in blocks.iter().enumerate() {
        let loc = format!("{prefix}block {}", i + 1);
        match b {
            Block::Narration { text } => {
                if text.trim().is_empty() {
                    v.push(Violation::new(Format, loc, "empty narration"));
                } else if text.contains('\n') {
                    v.push(Violation::new(Format, loc, "narration spans several lines"));
                }
            }
            Block::Pause { seconds } => {
                if !seconds.is_finite() || *seconds <= 0.0 {
                    v.push(Violation::new(Format, loc, "pause must be positive"));
                } else if *seconds > cfg.max_pause_s {
                    v.push(Violation::new(
                        Format,
                        loc,
                        format!("pause of {seconds}s exceeds the {}s limit", cfg.max_pause_s),
                    ));
                }
            }
            Block::Interaction(it) => {
                if nested {
                    v.push(Violation::new(Format, loc.clone(), "interaction nested inside a branch"));
                }
                if it.prompt.trim().is_empty() {
                    v.push(Violation::new(Format, loc.clone(), "empty interaction prompt"));
                }
                if !(2..=3).contains(&it.options.len()) {
                    v.push(Violation::new(
                        Format,
                        loc.clone(),
                        format!("interaction offers {} options, expected 2 or 3", it.options.len()),
                    ));
                }
                let distinct: HashSet<&String> = it.options.iter().collect();
                if distinct.len() != it.options.len() {
                    v.push(Violation::new(Format, loc.clone(), "duplicate interaction option"));
                }
                if it.branches.len() != it.options.len() {
                    v.push(Violation::new(Format, loc.clone(), "branches do not align with options"));
                }
                for (opt, branch) in it.options.iter().zip(&it.branches) {
                    if branch.is_empty() {
                        v.push(Violation::new(Format, loc.clone(), format!("option `{opt}` has no branch")));
                    }
                    check_blocks(branch, &format!("{loc}/branch {opt}/"), true, cfg, v);
                }
            }
        }
    }
}

fn check_format(script: &GuidanceScript, duration_min: u32, cfg: &CheckerConfig, v: &mut Vec<Violation>) {
    use ViolationKind::Format;
    if !script.blocks.iter().any(Block::is_narration) {
        v.push(Violation::new(Format, "script", "script has no narration"));
    }
    check_blocks(&script.blocks, "", false, cfg, v);

    if !SUPPORTED_DURATIONS.contains(&duration_min) {
        v.push(Violation::new(Format, "script", format!("unsupported duration {duration_min} min")));
        return;
    }
    let interactions = script.interactions().count();
    let expected = if duration_min == 5 { 0 } else { 1 };
    if interactions != expected {
        v.push(Violation::new(
            Format,
            "script",
            format!("{duration_min}-min script has {interactions} interactions, expected {expected}"),
        ));
    }
    let (lo, hi) = cfg.budget(duration_min);
    let counts: Vec<usize> = script.interactions().map(|i| i.options.len().max(1)).collect();
    for (n, d) in script.path_durations().into_iter().enumerate() {
        if d < lo - BUDGET_EPS || d > hi + BUDGET_EPS {
            let loc = if counts.is_empty() { "script".to_string() } else { format!("path {}", n + 1) };
            v.push(Violation::new(
                Format,
                loc,
                format!("predicted {d:.1}s outside budget [{lo:.0}s, {hi:.0}s]"),
            ));
        }
    }
}

fn check_ending(script: &GuidanceScript, cfg: &CheckerConfig, v: &mut Vec<Violation>) {
    let msg = match script.blocks.last() {
        Some(Block::Narration { text }) if cfg.is_closing(text) => return,
        Some(Block::Narration { .. }) => "final narration lacks a closing phrase",
        Some(_) => "script does not end with a closing narration",
        None => "script is empty",
    };
    v.push(Violation::new(ViolationKind::Ending, "end", msg));
}

fn check_definitions(
    script: &GuidanceScript,
    kb: &KnowledgeBase,
    judge: &dyn DefinitionJudge,
    v: &mut Vec<Violation>,
) {
    let scanner = ClaimScanner::new(kb);
    for narration in script.narration_texts() {
        for claim in scanner.claims(narration) {
            let concept = kb.concept(&claim.concept_id).expect("claim ids come from the kb");
            if !judge.consistent(kb, concept, claim.sentence) {
                v.push(Violation::new(
                    ViolationKind::Definition,
                    format!("term {}", concept.name),
                    format!("`{}` contradicts the definition of {}", claim.sentence.trim(), concept.name),
                ));
            }
        }
    }
}
