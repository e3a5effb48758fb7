//! Knowledge base of mindfulness techniques and the goal catalog.
//!
//! The KB is immutable once loaded. It answers exact and alias lookups,
//! renders technique refreshers, and precomputes each concept's
//! *signature tokens*: the three rarest content tokens of its canonical
//! definition. The definition checker and the terminology reflection mode
//! both use those signatures to decide whether a statement agrees with the KB.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

const DEFAULT_KB: &str = include_str!("../fixtures/kb.json");

/// Number of signature tokens kept per concept.
pub const SIGNATURE_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("failed to read knowledge base: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse knowledge base: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate concept id `{0}`")]
    DuplicateId(String),
    #[error("duplicate goal `{category} / {goal}`")]
    DuplicateGoal { category: String, goal: String },
    #[error("concept `{0}` has an empty definition")]
    EmptyDefinition(String),
    #[error("term `{term}` maps to both `{first}` and `{second}`")]
    AmbiguousTerm { term: String, first: String, second: String },
    #[error("expected exactly one random-proxy goal, found {0}")]
    RandomProxyCount(usize),
    #[error("unknown technique `{0}`")]
    UnknownTechnique(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub id: String,
    pub name: String,
    pub definition: String,
    pub key_steps: Vec<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoalCategory {
    #[serde(rename = "Starting Day")]
    StartingDay,
    #[serde(rename = "Ready to Work")]
    ReadyToWork,
    #[serde(rename = "Taking a Break")]
    TakingABreak,
    #[serde(rename = "SOS")]
    Sos,
    #[serde(rename = "Socializing")]
    Socializing,
    #[serde(rename = "Big Event")]
    BigEvent,
    #[serde(rename = "Ending the Day")]
    EndingTheDay,
    #[serde(rename = "General")]
    General,
}

impl GoalCategory {
    pub fn label(self) -> &'static str {
        match self {
            GoalCategory::StartingDay => "Starting Day",
            GoalCategory::ReadyToWork => "Ready to Work",
            GoalCategory::TakingABreak => "Taking a Break",
            GoalCategory::Sos => "SOS",
            GoalCategory::Socializing => "Socializing",
            GoalCategory::BigEvent => "Big Event",
            GoalCategory::EndingTheDay => "Ending the Day",
            GoalCategory::General => "General",
        }
    }
}

impl fmt::Display for GoalCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalEntry {
    pub category: GoalCategory,
    pub goal: String,
    #[serde(default)]
    pub is_random_proxy: bool,
}

/// On-disk shape of the KB document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDocument {
    pub concepts: Vec<ConceptEntry>,
    pub goals: Vec<GoalEntry>,
}

/// Technique refresher prompt block: canonical definition plus numbered key steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefresherText(pub String);

impl RefresherText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RefresherText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    doc: KbDocument,
    by_term: HashMap<String, usize>,
    signatures: Vec<Vec<String>>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.doc == other.doc
    }
}

/// Lowercase, punctuation collapsed to single spaces: "See-Hear-Feel" -> "see hear feel".
pub fn normalize_term(term: &str) -> String {
    text::tokens(term).join(" ")
}

impl KnowledgeBase {
    /// The shipped fixture: eight techniques and the full goal catalog.
    pub fn default_fixture() -> Self {
        Self::from_json(DEFAULT_KB).expect("shipped KB fixture is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn from_json(raw: &str) -> Result<Self, KbError> {
        let doc: KbDocument = serde_json::from_str(raw)?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: KbDocument) -> Result<Self, KbError> {
        let mut ids = HashSet::new();
        let mut by_term: HashMap<String, usize> = HashMap::new();
        for (idx, c) in doc.concepts.iter().enumerate() {
            if !ids.insert(c.id.as_str()) {
                return Err(KbError::DuplicateId(c.id.clone()));
            }
            if c.definition.trim().is_empty() {
                return Err(KbError::EmptyDefinition(c.id.clone()));
            }
            for term in std::iter::once(&c.name).chain(c.aliases.iter()) {
                let key = normalize_term(term);
                if key.is_empty() {
                    continue;
                }
                if let Some(&prev) = by_term.get(&key) {
                    if prev != idx {
                        return Err(KbError::AmbiguousTerm {
                            term: term.clone(),
                            first: doc.concepts[prev].id.clone(),
                            second: c.id.clone(),
                        });
                    }
                }
                by_term.insert(key, idx);
            }
        }

        let mut seen = HashSet::new();
        for g in &doc.goals {
            if !seen.insert((g.category, g.goal.as_str())) {
                return Err(KbError::DuplicateGoal {
                    category: g.category.to_string(),
                    goal: g.goal.clone(),
                });
            }
        }
        let proxies = doc.goals.iter().filter(|g| g.is_random_proxy).count();
        if proxies != 1 {
            return Err(KbError::RandomProxyCount(proxies));
        }

        let signatures = compute_signatures(&doc.concepts);
        Ok(Self { doc, by_term, signatures })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("KB document serializes")
    }

    pub fn document(&self) -> &KbDocument {
        &self.doc
    }

    pub fn concepts(&self) -> &[ConceptEntry] {
        &self.doc.concepts
    }

    pub fn goals(&self) -> &[GoalEntry] {
        &self.doc.goals
    }

    pub fn concept(&self, id: &str) -> Option<&ConceptEntry> {
        self.doc.concepts.iter().find(|c| c.id == id)
    }

    /// Case-insensitive exact or alias match.
    pub fn lookup_concept(&self, term: &str) -> Option<&ConceptEntry> {
        let key = normalize_term(term);
        self.by_term.get(&key).map(|&i| &self.doc.concepts[i])
    }

    /// Every (normalized term, concept) pair, names and aliases alike.
    pub fn terms(&self) -> impl Iterator<Item = (&str, &ConceptEntry)> {
        self.by_term
            .iter()
            .map(|(t, &i)| (t.as_str(), &self.doc.concepts[i]))
    }

    /// Resolve a technique by id, name or alias.
    pub fn resolve_technique(&self, key: &str) -> Option<&ConceptEntry> {
        self.concept(key).or_else(|| self.lookup_concept(key))
    }

    pub fn goal(&self, name: &str) -> Option<&GoalEntry> {
        let key = normalize_term(name);
        self.doc.goals.iter().find(|g| normalize_term(&g.goal) == key)
    }

    pub fn random_proxy_goal(&self) -> &GoalEntry {
        self.doc
            .goals
            .iter()
            .find(|g| g.is_random_proxy)
            .expect("validated at load")
    }

    pub fn non_proxy_goals(&self) -> impl Iterator<Item = &GoalEntry> {
        self.doc.goals.iter().filter(|g| !g.is_random_proxy)
    }

    /// Signature tokens of a concept's canonical definition (rarest first).
    pub fn signature_tokens(&self, id: &str) -> Option<&[String]> {
        self.doc
            .concepts
            .iter()
            .position(|c| c.id == id)
            .map(|i| self.signatures[i].as_slice())
    }

    /// True when `statement` contains every signature token of concept `id`.
    pub fn agrees_with_definition(&self, id: &str, statement: &str) -> bool {
        let Some(sig) = self.signature_tokens(id) else {
            return false;
        };
        let present: HashSet<String> = text::tokens(statement).into_iter().collect();
        sig.iter().all(|t| present.contains(t))
    }

    pub fn technique_refresher(&self, technique_id: &str) -> Result<RefresherText, KbError> {
        let c = self
            .resolve_technique(technique_id)
            .ok_or_else(|| KbError::UnknownTechnique(technique_id.to_string()))?;
        let mut out = format!("Technique: {}\nDefinition: {}\nKey steps:", c.name, c.definition);
        for (i, step) in c.key_steps.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", i + 1, step));
        }
        Ok(RefresherText(out))
    }
}

/// Rank each definition's content tokens by (document frequency across all
/// definitions ascending, length descending, first occurrence ascending).
fn compute_signatures(concepts: &[ConceptEntry]) -> Vec<Vec<String>> {
    let per_doc: Vec<Vec<String>> = concepts
        .iter()
        .map(|c| {
            let mut seen = HashSet::new();
            text::content_tokens(&c.definition)
                .into_iter()
                .filter(|t| seen.insert(t.clone()))
                .collect()
        })
        .collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &per_doc {
        for t in doc {
            *df.entry(t.as_str()).or_default() += 1;
        }
    }
    per_doc
        .iter()
        .map(|doc| {
            let mut ranked: Vec<(usize, &String)> = doc.iter().enumerate().collect();
            ranked.sort_by(|(ia, a), (ib, b)| {
                df[a.as_str()]
                    .cmp(&df[b.as_str()])
                    .then(b.chars().count().cmp(&a.chars().count()))
                    .then(ia.cmp(ib))
            });
            ranked
                .into_iter()
                .take(SIGNATURE_LEN)
                .map(|(_, t)| t.clone())
                .collect()
        })
        .collect()
}
