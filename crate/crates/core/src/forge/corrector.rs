//! Bounded repair loop for scripts that fail the checkers.
//!
//! Each round applies rule fixes (structure, closing block, pause budget) and
//! asks the chat gateway to rewrite sentences that misstate a definition,
//! then checks again.

use thiserror::Error;

use super::checker::{
    check_script_with, CheckReport, CheckerConfig, ClaimScanner, DefinitionJudge, ViolationKind,
};
use crate::concept_kb::KnowledgeBase;
use crate::providers::{ChatGateway, ChatMessage, ChatRequest, ProviderError};
use crate::script::{Block, GuidanceScript};

pub const MAX_ROUNDS: usize = 3;

/// Narration appended when a script lacks a closing block.
pub const CLOSING_NARRATION: &str =
    "When you are ready, gently open your eyes. This completes your practice.";

const REWRITE_SYSTEM: &str = "You repair one sentence of a meditation script so that it states \
the given mindfulness term's canonical definition. Reply with the corrected sentence only.";

#[derive(Debug, Error)]
pub enum CorrectError {
    /// The script is quarantined here together with its last report.
    #[error("script still fails after {rounds} correction rounds ({} violations)", report.violations.len())]
    Uncorrectable { script: GuidanceScript, report: CheckReport, rounds: usize },
    #[error("definition rewrite failed: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub script: GuidanceScript,
    pub report: CheckReport,
    /// Rounds spent; zero when the script already passed.
    pub rounds: usize,
}

pub struct Corrector<'a> {
    pub kb: &'a KnowledgeBase,
    pub config: &'a CheckerConfig,
    pub judge: &'a dyn DefinitionJudge,
    pub chat: &'a dyn ChatGateway,
    pub model_id: &'a str,
}

impl Corrector<'_> {
    fn check(&self, s: &GuidanceScript, duration_min: u32) -> CheckReport {
        check_script_with(s, duration_min, self.kb, self.config, self.judge)
    }

    pub fn correct(
        &self,
        script: &GuidanceScript,
        report: &CheckReport,
        duration_min: u32,
    ) -> Result<Correction, CorrectError> {
        let mut report = if report.passed { self.check(script, duration_min) } else { report.clone() };
        if report.passed {
            return Ok(Correction { script: script.clone(), report, rounds: 0 });
        }
        let mut current = script.clone();
        for round in 1..=MAX_ROUNDS {
            self.apply_round(&mut current, &report, duration_min)?;
            report = self.check(&current, duration_min);
            if report.passed {
                return Ok(Correction { script: current, report, rounds: round });
            }
        }
        tracing::warn!(violations = report.violations.len(), "script quarantined");
        Err(CorrectError::Uncorrectable { script: current, report, rounds: MAX_ROUNDS })
    }

    fn apply_round(
        &self,
        s: &mut GuidanceScript,
        report: &CheckReport,
        duration_min: u32,
    ) -> Result<(), CorrectError> {
        if report.has(ViolationKind::Format) {
            fix_structure(s, duration_min, self.config);
        }
        if report.has(ViolationKind::Ending) {
            fix_ending(s, self.config);
        }
        if report.has(ViolationKind::Definition) {
            self.rewrite_definitions(s)?;
        }
        fit_budget(s, duration_min, self.config);
        Ok(())
    }

    fn rewrite_definitions(&self, s: &mut GuidanceScript) -> Result<(), CorrectError> {
        let scanner = ClaimScanner::new(self.kb);
        let mut failure = None;
        for_each_text(&mut s.blocks, &mut |text| {
            if failure.is_some() {
                return;
            }
            let bad: Vec<(String, String)> = scanner
                .claims(text)
                .into_iter()
                .filter_map(|c| {
                    let concept = self.kb.concept(&c.concept_id)?;
                    (!self.judge.consistent(self.kb, concept, c.sentence))
                        .then(|| (c.concept_id.clone(), c.sentence.to_string()))
                })
                .collect();
            for (id, sentence) in bad {
                let concept = self.kb.concept(&id).expect("claim ids come from the kb");
                let req = ChatRequest::new(
                    self.model_id,
                    vec![
                        ChatMessage::system(REWRITE_SYSTEM),
                        ChatMessage::user(format!(
                            "TERM: {}\nDEFINITION: {}\nSENTENCE: {}",
                            concept.name, concept.definition, sentence
                        )),
                    ],
                )
                .tagged("correct-definition");
                match self.chat.chat(&req) {
                    Ok(reply) => {
                        let fixed = one_sentence(&reply.content);
                        *text = text.replacen(&sentence, &fixed, 1);
                    }
                    Err(e) => {
                        failure = Some(e);
                        return;
                    }
                }
            }
        });
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

/// Corrects with the default configuration, rarest-token judge and the given model.
pub fn correct_script(
    script: &GuidanceScript,
    report: &CheckReport,
    duration_min: u32,
    kb: &KnowledgeBase,
    chat: &dyn ChatGateway,
    model_id: &str,
) -> Result<Correction, CorrectError> {
    let config = CheckerConfig::default();
    Corrector { kb, config: &config, judge: &super::checker::RarestTokenJudge, chat, model_id }
        .correct(script, report, duration_min)
}

fn one_sentence(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string();
    if line.ends_with(['.', '!', '?']) {
        line
    } else {
        format!("{line}.")
    }
}

fn for_each_text(blocks: &mut [Block], f: &mut dyn FnMut(&mut String)) {
    for b in blocks {
        match b {
            Block::Narration { text } => f(text),
            Block::Pause { .. } => {}
            Block::Interaction(i) => {
                f(&mut i.prompt);
                for br in &mut i.branches {
                    for_each_text(br, f);
                }
            }
        }
    }
}

fn scrub(blocks: &mut Vec<Block>, cfg: &CheckerConfig) {
    blocks.retain(|b| match b {
        Block::Narration { text } => !text.trim().is_empty(),
        Block::Pause { seconds } => seconds.is_finite() && *seconds > 0.0,
        Block::Interaction(_) => true,
    });
    for b in blocks.iter_mut() {
        match b {
            Block::Narration { text } if text.contains('\n') => {
                *text = text.split_whitespace().collect::<Vec<_>>().join(" ");
            }
            Block::Pause { seconds } if *seconds > cfg.max_pause_s => *seconds = cfg.max_pause_s,
            Block::Interaction(i) => {
                for br in &mut i.branches {
                    scrub(br, cfg);
                }
            }
            _ => {}
        }
    }
}

/// Replace an interaction by its first branch, keeping the rest of the script.
fn inline_interaction(blocks: &mut Vec<Block>, at: usize) {
    if let Block::Interaction(i) = blocks.remove(at) {
        let first = i.branches.into_iter().next().unwrap_or_default();
        for (k, b) in first.into_iter().enumerate() {
            blocks.insert(at + k, flatten(b));
        }
    }
}

fn flatten(b: Block) -> Block {
    match b {
        // nested interactions cannot be kept; speak the prompt instead
        Block::Interaction(i) => Block::narration(i.prompt),
        other => other,
    }
}

fn fix_structure(s: &mut GuidanceScript, duration_min: u32, cfg: &CheckerConfig) {
    scrub(&mut s.blocks, cfg);
    for b in s.blocks.iter_mut() {
        if let Block::Interaction(i) = b {
            for br in &mut i.branches {
                for inner in br.iter_mut() {
                    if matches!(inner, Block::Interaction(_)) {
                        *inner = flatten(inner.clone());
                    }
                }
            }
        }
    }
    let keep = if duration_min == 5 { 0 } else { 1 };
    let mut seen = 0;
    let mut i = 0;
    while i < s.blocks.len() {
        if matches!(s.blocks[i], Block::Interaction(_)) {
            seen += 1;
            if seen > keep {
                inline_interaction(&mut s.blocks, i);
                continue;
            }
        }
        i += 1;
    }
}

fn fix_ending(s: &mut GuidanceScript, cfg: &CheckerConfig) {
    match s.blocks.last() {
        Some(Block::Narration { text }) if cfg.is_closing(text) => {}
        _ => s.blocks.push(Block::narration(closing_narration(cfg))),
    }
}

fn closing_narration(cfg: &CheckerConfig) -> String {
    if cfg.is_closing(CLOSING_NARRATION) {
        return CLOSING_NARRATION.to_string();
    }
    let phrase = cfg.closing_phrases.first().map(String::as_str).unwrap_or("");
    let mut chars = phrase.chars();
    match chars.next() {
        Some(c) => format!("{}{}.", c.to_uppercase(), chars.as_str()),
        None => CLOSING_NARRATION.to_string(),
    }
}

#[derive(Debug, Clone, Copy)]
enum PauseRef {
    Top(usize),
    Branch { top: usize, branch: usize, idx: usize },
}

fn pause_mut(s: &mut GuidanceScript, r: PauseRef) -> &mut f64 {
    let b = match r {
        PauseRef::Top(i) => &mut s.blocks[i],
        PauseRef::Branch { top, branch, idx } => match &mut s.blocks[top] {
            Block::Interaction(i) => &mut i.branches[branch][idx],
            _ => unreachable!("branch ref points at an interaction"),
        },
    };
    match b {
        Block::Pause { seconds } => seconds,
        _ => unreachable!("pause ref points at a pause"),
    }
}

/// Option choices for path number `n`, in the order `path_durations` uses.
fn path_choices(s: &GuidanceScript, mut n: usize) -> Vec<usize> {
    s.interactions()
        .map(|i| {
            let c = i.options.len().max(1);
            let pick = n % c;
            n /= c;
            pick
        })
        .collect()
}

/// Longest pause heard on a path that satisfies `ok`; first one wins ties.
fn longest_pause(s: &GuidanceScript, choices: &[usize], ok: impl Fn(f64) -> bool) -> Option<PauseRef> {
    let mut best: Option<(f64, PauseRef)> = None;
    let mut consider = |secs: f64, r: PauseRef| {
        if ok(secs) && best.is_none_or(|(b, _)| secs > b) {
            best = Some((secs, r));
        }
    };
    let mut k = 0;
    for (top, b) in s.blocks.iter().enumerate() {
        match b {
            Block::Pause { seconds } => consider(*seconds, PauseRef::Top(top)),
            Block::Interaction(i) => {
                let branch = choices.get(k).copied().unwrap_or(0);
                if let Some(br) = i.branches.get(branch) {
                    for (idx, inner) in br.iter().enumerate() {
                        if let Block::Pause { seconds } = inner {
                            consider(*seconds, PauseRef::Branch { top, branch, idx });
                        }
                    }
                }
                k += 1;
            }
            Block::Narration { .. } => {}
        }
    }
    best.map(|(_, r)| r)
}

const EPS: f64 = 1e-9;
const MIN_PAUSE_S: f64 = 1.0;

/// Rule-only repair: structure for the duration, then the pause budget.
pub(crate) fn fit_structure_and_budget(s: &mut GuidanceScript, duration_min: u32, cfg: &CheckerConfig) {
    fix_structure(s, duration_min, cfg);
    fix_ending(s, cfg);
    fit_budget(s, duration_min, cfg);
}

/// Move every path into the duration window by adjusting pauses: shorten the
/// longest pause on an over-long path, lengthen the longest pause (or insert
/// one before the final block) on a short path.
fn fit_budget(s: &mut GuidanceScript, duration_min: u32, cfg: &CheckerConfig) {
    if !super::checker::SUPPORTED_DURATIONS.contains(&duration_min) {
        return;
    }
    let (lo, hi) = cfg.budget(duration_min);
    for _ in 0..256 {
        let durs = s.path_durations();
        let (imax, max) = durs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
        let (imin, min) = durs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::MAX), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
        if max > hi + EPS {
            let excess = (max - hi - EPS).ceil();
            let choices = path_choices(s, imax);
            let Some(r) = longest_pause(s, &choices, |p| p > MIN_PAUSE_S) else { return };
            let p = pause_mut(s, r);
            *p -= excess.min(*p - MIN_PAUSE_S);
        } else if min < lo - EPS {
            let deficit = (lo - min - EPS).ceil();
            let choices = path_choices(s, imin);
            match longest_pause(s, &choices, |p| p < cfg.max_pause_s) {
                Some(r) => {
                    let p = pause_mut(s, r);
                    *p += deficit.min(cfg.max_pause_s - *p);
                }
                None => {
                    let at = s.blocks.len().saturating_sub(1);
                    s.blocks.insert(at, Block::pause(deficit.min(cfg.max_pause_s)));
                }
            }
        } else {
            return;
        }
    }
}
