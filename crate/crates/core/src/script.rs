//! Block-structured guidance scripts and their line-oriented text form.
//!
//! Text form, one block per line:
//!
//! ```text
//! Settle into a comfortable position.
//! [PAUSE 10]
//! [ASK Where is your attention? | Body | Sounds]
//! [BRANCH Body]
//! Feel the weight of your body.
//! [/BRANCH]
//! [BRANCH Sounds]
//! Listen to the room.
//! [/BRANCH]
//! Gently open your eyes.
//! ```
//!
//! Any line that starts with `[` must be a well-formed sentinel. Branch
//! sections follow their `[ASK ...]` line and may not contain another `[ASK`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text;

/// Speaking rate used by every duration estimate (words per minute).
pub const SPEAKING_RATE_WPM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Narration { text: String },
    Pause { seconds: f64 },
    Interaction(Interaction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub prompt: String,
    pub options: Vec<String>,
    /// One block list per option, aligned with `options`.
    pub branches: Vec<Vec<Block>>,
}

impl Block {
    pub fn narration(text: impl Into<String>) -> Self {
        Block::Narration { text: text.into() }
    }

    pub fn pause(seconds: f64) -> Self {
        Block::Pause { seconds }
    }

    pub fn is_narration(&self) -> bool {
        matches!(self, Block::Narration { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidanceScript {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

impl GuidanceScript {
    pub fn new(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn parse(src: &str) -> Result<Self, ParseError> {
        Parser::default().run(src)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            write_block(&mut out, b);
        }
        out
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Interaction(i) => Some(i),
            _ => None,
        })
    }

    /// Every narration string, including interaction prompts and branch narration.
    pub fn narration_texts(&self) -> Vec<&str> {
        fn walk<'a>(blocks: &'a [Block], out: &mut Vec<&'a str>) {
            for b in blocks {
                match b {
                    Block::Narration { text } => out.push(text),
                    Block::Pause { .. } => {}
                    Block::Interaction(i) => {
                        out.push(&i.prompt);
                        for br in &i.branches {
                            walk(br, out);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.blocks, &mut out);
        out
    }

    /// Number of distinct listening paths: the product of option counts,
    /// or 1 for a script without interactions.
    pub fn path_count(&self) -> usize {
        self.interactions().map(|i| i.options.len().max(1)).product()
    }

    /// The linear block sequence heard when each interaction resolves to the
    /// option index in `choices` (missing entries default to the first option).
    pub fn linearize(&self, choices: &[usize]) -> Vec<Block> {
        let mut out = Vec::new();
        let mut k = 0;
        for b in &self.blocks {
            match b {
                Block::Interaction(i) => {
                    out.push(Block::Narration { text: spoken_prompt(i) });
                    let pick = choices.get(k).copied().unwrap_or(0);
                    if let Some(branch) = i.branches.get(pick) {
                        out.extend(branch.iter().cloned());
                    }
                    k += 1;
                }
                other => out.push(other.clone()),
            }
        }
        out
    }

    /// Predicted duration in seconds of every listening path, in option order.
    pub fn path_durations(&self) -> Vec<f64> {
        let counts: Vec<usize> = self.interactions().map(|i| i.options.len().max(1)).collect();
        let total: usize = counts.iter().product();
        (0..total)
            .map(|mut n| {
                let choices: Vec<usize> = counts
                    .iter()
                    .map(|&c| {
                        let pick = n % c;
                        n /= c;
                        pick
                    })
                    .collect();
                linear_duration(&self.linearize(&choices))
            })
            .collect()
    }

    /// Predicted duration of the path that always takes the first option.
    pub fn predicted_duration(&self) -> f64 {
        linear_duration(&self.linearize(&[]))
    }

    pub fn word_count(&self) -> usize {
        self.narration_texts().iter().map(|t| text::word_count(t)).sum()
    }
}

/// Interaction prompt as it is spoken: the question followed by the options.
pub fn spoken_prompt(i: &Interaction) -> String {
    format!("{} {}", i.prompt, i.options.join(", or "))
}

/// Σ pauses + words / rate × 60 over a linear block sequence.
pub fn linear_duration(blocks: &[Block]) -> f64 {
    let mut pauses = 0.0;
    let mut words = 0usize;
    for b in blocks {
        match b {
            Block::Narration { text } => words += text::word_count(text),
            Block::Pause { seconds } => pauses += seconds,
            Block::Interaction(i) => {
                words += text::word_count(&spoken_prompt(i));
            }
        }
    }
    pauses + words as f64 / SPEAKING_RATE_WPM * 60.0
}

fn fmt_seconds(s: f64) -> String {
    format!("{s}")
}

fn write_block(out: &mut String, b: &Block) {
    match b {
        Block::Narration { text } => {
            out.push_str(text);
            out.push('\n');
        }
        Block::Pause { seconds } => {
            out.push_str(&format!("[PAUSE {}]\n", fmt_seconds(*seconds)));
        }
        Block::Interaction(i) => {
            out.push_str(&format!("[ASK {} | {}]\n", i.prompt, i.options.join(" | ")));
            for (opt, branch) in i.options.iter().zip(&i.branches) {
                out.push_str(&format!("[BRANCH {opt}]\n"));
                for inner in branch {
                    write_block(out, inner);
                }
                out.push_str("[/BRANCH]\n");
            }
        }
    }
}

#[derive(Default)]
struct Parser {
    blocks: Vec<Block>,
    /// Open branch: (option index, collected blocks, line it opened on).
    open_branch: Option<(usize, Vec<Block>, usize)>,
}

impl Parser {
    fn run(mut self, src: &str) -> Result<GuidanceScript, ParseError> {
        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if !line.starts_with('[') {
                self.push(Block::narration(line));
                continue;
            }
            if !line.ends_with(']') {
                return Err(ParseError::at(line_no, "unterminated sentinel"));
            }
            let inner = &line[1..line.len() - 1];
            let (head, rest) = match inner.split_once(' ') {
                Some((h, r)) => (h, r.trim()),
                None => (inner, ""),
            };
            match head {
                "PAUSE" => {
                    let secs: f64 = rest
                        .parse()
                        .map_err(|_| ParseError::at(line_no, format!("bad pause length `{rest}`")))?;
                    if !secs.is_finite() || secs <= 0.0 {
                        return Err(ParseError::at(line_no, "pause length must be positive"));
                    }
                    self.push(Block::pause(secs));
                }
                "ASK" => {
                    if self.open_branch.is_some() {
                        return Err(ParseError::at(line_no, "nested interaction inside a branch"));
                    }
                    let mut parts = rest.split('|').map(str::trim);
                    let prompt = parts.next().unwrap_or_default().to_string();
                    let options: Vec<String> = parts.map(str::to_string).collect();
                    if prompt.is_empty() || options.is_empty() || options.iter().any(String::is_empty) {
                        return Err(ParseError::at(line_no, "malformed ASK sentinel"));
                    }
                    let branches = vec![Vec::new(); options.len()];
                    self.blocks.push(Block::Interaction(Interaction { prompt, options, branches }));
                }
                "BRANCH" => {
                    if self.open_branch.is_some() {
                        return Err(ParseError::at(line_no, "branch opened before previous closed"));
                    }
                    let Some(Block::Interaction(i)) = self.blocks.last() else {
                        return Err(ParseError::at(line_no, "BRANCH without a preceding ASK"));
                    };
                    let pos = i
                        .options
                        .iter()
                        .position(|o| o == rest)
                        .ok_or_else(|| ParseError::at(line_no, format!("unknown branch option `{rest}`")))?;
                    if !i.branches[pos].is_empty() {
                        return Err(ParseError::at(line_no, format!("duplicate branch `{rest}`")));
                    }
                    self.open_branch = Some((pos, Vec::new(), line_no));
                }
                "/BRANCH" => {
                    let Some((pos, blocks, _)) = self.open_branch.take() else {
                        return Err(ParseError::at(line_no, "unmatched [/BRANCH]"));
                    };
                    if let Some(Block::Interaction(i)) = self.blocks.last_mut() {
                        i.branches[pos] = blocks;
                    }
                }
                other => {
                    return Err(ParseError::at(line_no, format!("unknown sentinel `{other}`")));
                }
            }
        }
        if let Some((_, _, opened)) = self.open_branch {
            return Err(ParseError::at(opened, "branch never closed"));
        }
        Ok(GuidanceScript { blocks: self.blocks })
    }

    fn push(&mut self, b: Block) {
        match &mut self.open_branch {
            Some((_, blocks, _)) => blocks.push(b),
            None => self.blocks.push(b),
        }
    }
}

impl fmt::Display for GuidanceScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Serialize for GuidanceScript {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for GuidanceScript {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        GuidanceScript::parse(&raw).map_err(serde::de::Error::custom)
    }
}
