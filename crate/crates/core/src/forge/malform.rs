//! Deliberately broken copies of a passing script, used as rejected samples.
//!
//! Every variant is run through the checker before it is returned and is
//! kept only when the checker reports the violation kind it was built to
//! trigger.

use serde::Serialize;

use super::checker::{check_text_with, CheckReport, CheckerConfig, ClaimScanner, RarestTokenJudge, ViolationKind};
use crate::concept_kb::KnowledgeBase;
use crate::script::{Block, GuidanceScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformKind {
    StripEnding,
    CorruptPause,
    SwapDefinition,
    BreakBudget,
}

impl MalformKind {
    /// Rotation used when emitting several variants of one script.
    pub const CYCLE: [MalformKind; 4] = [
        MalformKind::StripEnding,
        MalformKind::CorruptPause,
        MalformKind::SwapDefinition,
        MalformKind::BreakBudget,
    ];

    pub fn expected_violation(self) -> ViolationKind {
        match self {
            MalformKind::StripEnding => ViolationKind::Ending,
            MalformKind::SwapDefinition => ViolationKind::Definition,
            MalformKind::CorruptPause | MalformKind::BreakBudget => ViolationKind::Format,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalformedVariant {
    pub kind: MalformKind,
    pub text: String,
    pub report: CheckReport,
}

/// Text of variant number `ordinal` of `kind`, unchecked. `None` when the
/// script offers nothing for this ordinal (no claim to swap, and so on).
pub fn malform_text(
    chosen: &GuidanceScript,
    kind: MalformKind,
    ordinal: usize,
    duration_min: u32,
    kb: &KnowledgeBase,
    cfg: &CheckerConfig,
) -> Option<String> {
    Some(match kind {
        MalformKind::StripEnding => strip_ending(chosen, ordinal, cfg)?.to_text(),
        MalformKind::CorruptPause => corrupt_pause(chosen, ordinal),
        MalformKind::SwapDefinition => swap_definition(chosen, ordinal, kb)?.to_text(),
        MalformKind::BreakBudget => break_budget(chosen, ordinal, duration_min, cfg)?.to_text(),
    })
}

/// Build variant number `ordinal` of `kind`. Returns `None` when this
/// ordinal cannot produce a variant the checker flags with the expected kind.
pub fn malformed_variant(
    chosen: &GuidanceScript,
    kind: MalformKind,
    ordinal: usize,
    duration_min: u32,
    kb: &KnowledgeBase,
    cfg: &CheckerConfig,
) -> Option<MalformedVariant> {
    let text = malform_text(chosen, kind, ordinal, duration_min, kb, cfg)?;
    let (_, report) = check_text_with(&text, duration_min, kb, cfg, &RarestTokenJudge);
    report
        .has(kind.expected_violation())
        .then_some(MalformedVariant { kind, text, report })
}

/// `k` distinct variants cycling through the kinds. Kinds that cannot be
/// applied to this script are skipped in favour of the next one.
pub fn malformed_variants(
    chosen: &GuidanceScript,
    k: usize,
    duration_min: u32,
    kb: &KnowledgeBase,
    cfg: &CheckerConfig,
) -> Vec<MalformedVariant> {
    const TRIES: usize = 12;
    let mut out: Vec<MalformedVariant> = Vec::with_capacity(k);
    let mut next_ordinal = [0usize; 4];
    let mut slot = 0;
    let mut stalled = 0;
    while out.len() < k && stalled < MalformKind::CYCLE.len() {
        let ki = slot % MalformKind::CYCLE.len();
        slot += 1;
        let kind = MalformKind::CYCLE[ki];
        let mut found = None;
        for _ in 0..TRIES {
            let ord = next_ordinal[ki];
            next_ordinal[ki] += 1;
            if let Some(v) = malformed_variant(chosen, kind, ord, duration_min, kb, cfg) {
                if !out.iter().any(|o| o.text == v.text) {
                    found = Some(v);
                    break;
                }
            }
        }
        match found {
            Some(v) => {
                out.push(v);
                stalled = 0;
            }
            None => stalled += 1,
        }
    }
    out
}

fn strip_ending(s: &GuidanceScript, ordinal: usize, cfg: &CheckerConfig) -> Option<GuidanceScript> {
    let mut out = s.clone();
    match ordinal {
        0 => {
            out.blocks.pop()?;
        }
        1 => {
            let Some(Block::Narration { text }) = out.blocks.last_mut() else { return None };
            let mut lower = text.to_lowercase();
            for p in &cfg.closing_phrases {
                lower = lower.replace(&p.to_lowercase(), "");
            }
            let kept: Vec<&str> = lower.split_whitespace().collect();
            *text = if kept.is_empty() { "Rest here a little longer.".into() } else { kept.join(" ") };
        }
        2 => {
            out.blocks.pop()?;
            out.blocks.push(Block::pause(5.0));
        }
        _ => return None,
    }
    Some(out)
}

const PAUSE_FORMS: [&str; 4] = ["[PAUSE {}", "[PAUSE {} seconds]", "[PAUSE -{}]", "[PAUS {}]"];

fn corrupt_pause(s: &GuidanceScript, ordinal: usize) -> String {
    let text = s.to_text();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let pauses: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.starts_with("[PAUSE "))
        .map(|(i, _)| i)
        .collect();
    let form = PAUSE_FORMS[ordinal % PAUSE_FORMS.len()];
    if pauses.is_empty() {
        lines.insert(1.min(lines.len()), form.replace("{}", "10"));
    } else {
        let at = pauses[(ordinal / PAUSE_FORMS.len()) % pauses.len()];
        let secs = lines[at]
            .trim_start_matches("[PAUSE ")
            .trim_end_matches(']')
            .to_string();
        lines[at] = form.replace("{}", &secs);
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn swap_definition(s: &GuidanceScript, ordinal: usize, kb: &KnowledgeBase) -> Option<GuidanceScript> {
    let concepts = kb.concepts();
    let n = concepts.len();
    if n < 2 {
        return None;
    }
    let scanner = ClaimScanner::new(kb);
    // (path to narration, sentence, concept index)
    let mut sites: Vec<(Vec<usize>, String, usize)> = Vec::new();
    collect_claims(&s.blocks, &mut Vec::new(), &scanner, kb, &mut sites);

    let mut out = s.clone();
    if sites.is_empty() {
        let x = ordinal % n;
        let y = (x + 1 + (ordinal / n) % (n - 1)) % n;
        let sentence = format!("{} means {}", concepts[x].name, lower_first(&concepts[y].definition));
        let at = out.blocks.len().saturating_sub(1);
        out.blocks.insert(at, Block::narration(sentence));
        return Some(out);
    }
    let (path, sentence, x) = &sites[ordinal % sites.len()];
    let shift = 1 + (ordinal / sites.len()) % (n - 1);
    let y = (x + shift) % n;
    let swapped = format!("{} means {}", concepts[*x].name, lower_first(&concepts[y].definition));
    let text = narration_at(&mut out.blocks, path)?;
    *text = text.replacen(sentence.as_str(), &swapped, 1);
    Some(out)
}

fn collect_claims(
    blocks: &[Block],
    path: &mut Vec<usize>,
    scanner: &ClaimScanner<'_>,
    kb: &KnowledgeBase,
    out: &mut Vec<(Vec<usize>, String, usize)>,
) {
    for (i, b) in blocks.iter().enumerate() {
        path.push(i);
        match b {
            Block::Narration { text } => {
                for c in scanner.claims(text) {
                    let idx = kb.concepts().iter().position(|e| e.id == c.concept_id).expect("kb concept");
                    out.push((path.clone(), c.sentence.to_string(), idx));
                }
            }
            Block::Interaction(it) => {
                for (bi, br) in it.branches.iter().enumerate() {
                    path.push(bi);
                    collect_claims(br, path, scanner, kb, out);
                    path.pop();
                }
            }
            Block::Pause { .. } => {}
        }
        path.pop();
    }
}

/// Path is [top] or [top, branch, idx].
fn narration_at<'a>(blocks: &'a mut [Block], path: &[usize]) -> Option<&'a mut String> {
    match (blocks.get_mut(path[0])?, path.len()) {
        (Block::Narration { text }, 1) => Some(text),
        (Block::Interaction(i), 3) => match i.branches.get_mut(path[1])?.get_mut(path[2])? {
            Block::Narration { text } => Some(text),
            _ => None,
        },
        _ => None,
    }
}

fn break_budget(
    s: &GuidanceScript,
    ordinal: usize,
    duration_min: u32,
    cfg: &CheckerConfig,
) -> Option<GuidanceScript> {
    let (_, hi) = cfg.budget(duration_min);
    let shortest = s.path_durations().into_iter().fold(f64::MAX, f64::min);
    let mut extra = (hi - shortest).max(0.0) + 30.0 * (ordinal as f64 + 1.0);
    let mut out = s.clone();
    let at = out.blocks.len().saturating_sub(1);
    let chunk = cfg.max_pause_s.min(120.0);
    while extra > 0.0 {
        let p = extra.min(chunk);
        out.blocks.insert(at, Block::pause(p));
        extra -= p;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::checker::check_script;

    fn words(n: usize) -> String {
        vec!["settle"; n].join(" ")
    }

    fn passing() -> GuidanceScript {
        let kb = KnowledgeBase::default_fixture();
        let eq = kb.concept("equanimity").unwrap();
        let claim = format!("Equanimity means {}", lower_first(&eq.definition));
        let s = GuidanceScript::new(vec![
            Block::narration(claim),
            Block::narration(words(360)),
            Block::pause(60.0),
            Block::narration("Gently open your eyes."),
        ]);
        assert!(check_script(&s, 5, &kb).passed, "{:?}", check_script(&s, 5, &kb));
        s
    }

    #[test]
    fn every_kind_produces_its_violation() {
        let kb = KnowledgeBase::default_fixture();
        let cfg = CheckerConfig::default();
        let s = passing();
        for kind in MalformKind::CYCLE {
            for ord in 0..3 {
                let v = malformed_variant(&s, kind, ord, 5, &kb, &cfg)
                    .unwrap_or_else(|| panic!("{kind:?} {ord}"));
                assert!(v.report.has(kind.expected_violation()), "{kind:?}");
            }
        }
    }

    #[test]
    fn swap_without_existing_claim_inserts_one() {
        let kb = KnowledgeBase::default_fixture();
        let s = GuidanceScript::new(vec![
            Block::narration(words(440)),
            Block::pause(30.0),
            Block::narration("Gently open your eyes."),
        ]);
        let v = malformed_variant(&s, MalformKind::SwapDefinition, 0, 5, &kb, &CheckerConfig::default()).unwrap();
        assert!(v.text.contains(" means "));
    }

    #[test]
    fn default_three_are_distinct_kinds() {
        let kb = KnowledgeBase::default_fixture();
        let v = malformed_variants(&passing(), 3, 5, &kb, &CheckerConfig::default());
        let kinds: Vec<_> = v.iter().map(|v| v.kind).collect();
        assert_eq!(kinds, vec![MalformKind::StripEnding, MalformKind::CorruptPause, MalformKind::SwapDefinition]);
    }

    #[test]
    fn many_variants_stay_distinct() {
        let kb = KnowledgeBase::default_fixture();
        let v = malformed_variants(&passing(), 12, 5, &kb, &CheckerConfig::default());
        assert_eq!(v.len(), 12);
        for (i, a) in v.iter().enumerate() {
            for b in &v[i + 1..] {
                assert_ne!(a.text, b.text);
            }
        }
    }
}
