//! Template corpus: loading, approval and selection.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checker::{check_script_with, CheckReport, CheckerConfig, RarestTokenJudge, SUPPORTED_DURATIONS};
use super::{ForgeError, GuidanceLevel};
use crate::concept_kb::{normalize_term, KnowledgeBase};
use crate::providers::{Embedder, ProviderError};
use crate::script::GuidanceScript;
use crate::vector_index::{MetadataFilter, Namespace, VectorRecord};
use crate::VectorIndex;

pub const DEFAULT_SIMILARITY_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStatus {
    Draft,
    ExpertEdited,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub approver: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyTemplate {
    pub template_id: String,
    pub goal: String,
    pub duration_min: u32,
    pub guidance_level: GuidanceLevel,
    pub script: GuidanceScript,
    pub status: TemplateStatus,
    #[serde(default)]
    pub is_general: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approval: Option<Approval>,
}

impl SafetyTemplate {
    pub fn is_approved(&self) -> bool {
        self.status == TemplateStatus::Approved
    }
}

/// On-disk corpus document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub templates: Vec<SafetyTemplate>,
}

impl Corpus {
    pub fn default_fixture() -> Self {
        serde_json::from_str(include_str!("../../fixtures/templates.json")).expect("bundled corpus parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForgeError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corpus serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum SelectionRoute {
    Exact,
    Semantic { similarity: f64 },
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub template: SafetyTemplate,
    pub route: SelectionRoute,
    /// Concrete goal drawn when the request used the random proxy goal.
    pub drawn_goal: Option<String>,
}

/// Approved templates are indexed in the templates namespace under
/// "{goal} {category}" so that unseen goals can borrow the nearest one.
pub struct TemplateLibrary {
    kb: Arc<KnowledgeBase>,
    embedder: Arc<dyn Embedder>,
    index: Arc<VectorIndex>,
    config: CheckerConfig,
    similarity_floor: f64,
    templates: RwLock<Vec<SafetyTemplate>>,
}

impl std::fmt::Debug for TemplateLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemplateLibrary")
            .field("templates", &self.templates.read().len())
            .field("similarity_floor", &self.similarity_floor)
            .finish()
    }
}

impl TemplateLibrary {
    /// Validates the corpus and indexes its approved templates.
    pub fn new(
        corpus: Corpus,
        kb: Arc<KnowledgeBase>,
        embedder: Arc<dyn Embedder>,
        index: Arc<VectorIndex>,
    ) -> Result<Self, ForgeError> {
        let lib = Self {
            kb,
            embedder,
            index,
            config: CheckerConfig::default(),
            similarity_floor: DEFAULT_SIMILARITY_FLOOR,
            templates: RwLock::new(Vec::new()),
        };
        let mut ids = HashSet::new();
        for t in &corpus.templates {
            if !ids.insert(t.template_id.clone()) {
                return Err(ForgeError::DuplicateTemplate(t.template_id.clone()));
            }
            if !SUPPORTED_DURATIONS.contains(&t.duration_min) {
                return Err(ForgeError::InvalidTemplate {
                    id: t.template_id.clone(),
                    reason: format!("duration {} min is not offered", t.duration_min),
                });
            }
            if t.is_approved() {
                let report = lib.check(t);
                if !report.passed {
                    return Err(ForgeError::FailingChecks { id: t.template_id.clone(), report });
                }
            }
        }
        let generals = corpus.templates.iter().filter(|t| t.is_approved() && t.is_general).count();
        match generals {
            0 => return Err(ForgeError::NoGeneralTemplate),
            1 => {}
            n => return Err(ForgeError::MultipleGeneral(n)),
        }
        for t in corpus.templates.iter().filter(|t| t.is_approved()) {
            lib.index_template(t)?;
        }
        *lib.templates.write() = corpus.templates;
        Ok(lib)
    }

    pub fn default_fixture(
        kb: Arc<KnowledgeBase>,
        embedder: Arc<dyn Embedder>,
        index: Arc<VectorIndex>,
    ) -> Result<Self, ForgeError> {
        Self::new(Corpus::default_fixture(), kb, embedder, index)
    }

    pub fn with_similarity_floor(mut self, floor: f64) -> Self {
        self.similarity_floor = floor;
        self
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn config(&self) -> &CheckerConfig {
        &self.config
    }

    pub fn check(&self, t: &SafetyTemplate) -> CheckReport {
        check_script_with(&t.script, t.duration_min, &self.kb, &self.config, &RarestTokenJudge)
    }

    pub fn corpus(&self) -> Corpus {
        Corpus { templates: self.templates.read().clone() }
    }

    pub fn get(&self, id: &str) -> Option<SafetyTemplate> {
        self.templates.read().iter().find(|t| t.template_id == id).cloned()
    }

    pub fn approved(&self) -> Vec<SafetyTemplate> {
        self.templates.read().iter().filter(|t| t.is_approved()).cloned().collect()
    }

    pub fn general(&self) -> Result<SafetyTemplate, ForgeError> {
        self.templates
            .read()
            .iter()
            .find(|t| t.is_approved() && t.is_general)
            .cloned()
            .ok_or(ForgeError::NoGeneralTemplate)
    }

    /// Add a draft or expert-edited template.
    pub fn insert(&self, t: SafetyTemplate) -> Result<(), ForgeError> {
        if t.is_approved() {
            return Err(ForgeError::InvalidTemplate {
                id: t.template_id,
                reason: "new templates enter as draft or expert_edited".into(),
            });
        }
        let mut all = self.templates.write();
        if all.iter().any(|o| o.template_id == t.template_id) {
            return Err(ForgeError::DuplicateTemplate(t.template_id));
        }
        all.push(t);
        Ok(())
    }

    pub fn approve(&self, id: &str, approver: &str, at: DateTime<Utc>) -> Result<SafetyTemplate, ForgeError> {
        let mut all = self.templates.write();
        let t = all
            .iter_mut()
            .find(|t| t.template_id == id)
            .ok_or_else(|| ForgeError::UnknownTemplate(id.to_string()))?;
        if t.is_approved() {
            return Err(ForgeError::AlreadyApproved(id.to_string()));
        }
        let report = check_script_with(&t.script, t.duration_min, &self.kb, &self.config, &RarestTokenJudge);
        if !report.passed {
            return Err(ForgeError::FailingChecks { id: id.to_string(), report });
        }
        let has_general = t.is_general;
        let mut approved = t.clone();
        approved.status = TemplateStatus::Approved;
        approved.approval = Some(Approval { approver: approver.to_string(), at });
        if has_general {
            // keep a single approved general template
            return Err(ForgeError::MultipleGeneral(2));
        }
        self.index_template(&approved)?;
        *t = approved.clone();
        tracing::info!(template = id, approver, "template approved");
        Ok(approved)
    }

    fn goal_text(&self, goal: &str) -> String {
        match self.kb.goal(goal) {
            Some(g) => format!("{} {}", g.goal, g.category.label()),
            None => goal.to_string(),
        }
    }

    fn index_template(&self, t: &SafetyTemplate) -> Result<(), ForgeError> {
        let vector = self.embedder.embed(&self.goal_text(&t.goal))?;
        let metadata: BTreeMap<String, String> = [
            ("duration".to_string(), t.duration_min.to_string()),
            ("guidance".to_string(), t.guidance_level.to_string()),
            ("general".to_string(), t.is_general.to_string()),
        ]
        .into();
        self.index.upsert(VectorRecord {
            id: t.template_id.clone(),
            namespace: Namespace::Templates,
            vector,
            metadata,
            payload: t.goal.clone(),
        })?;
        Ok(())
    }

    /// Draw a concrete goal uniformly for the random proxy.
    pub fn draw_goal(&self, seed: u64) -> String {
        let goals: Vec<&str> = self.kb.non_proxy_goals().map(|g| g.goal.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        goals.choose(&mut rng).expect("kb has goals").to_string()
    }

    /// Exact (goal, duration, guidance) match, else the nearest approved
    /// template of the same duration above the similarity floor (same
    /// guidance level preferred), else the general template.
    pub fn select(
        &self,
        goal: &str,
        duration_min: u32,
        guidance: GuidanceLevel,
        seed: u64,
    ) -> Result<Selection, ForgeError> {
        let general = self.general()?;
        let proxy = self.kb.random_proxy_goal();
        let drawn_goal = (normalize_term(goal) == normalize_term(&proxy.goal)).then(|| self.draw_goal(seed));
        let goal = drawn_goal.as_deref().unwrap_or(goal);
        let key = normalize_term(goal);

        let exact = self
            .templates
            .read()
            .iter()
            .find(|t| {
                t.is_approved()
                    && !t.is_general
                    && t.duration_min == duration_min
                    && t.guidance_level == guidance
                    && normalize_term(&t.goal) == key
            })
            .cloned();
        if let Some(template) = exact {
            return Ok(Selection { template, route: SelectionRoute::Exact, drawn_goal });
        }

        let query = match self.embedder.embed(&self.goal_text(goal)) {
            Ok(q) => Some(q),
            Err(ProviderError::EmptyText) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(q) = query {
            let base = MetadataFilter::any()
                .eq("duration", duration_min.to_string())
                .eq("general", "false");
            for filter in [base.clone().eq("guidance", guidance.to_string()), base] {
                let hits = self.index.query(Namespace::Templates, &q, 1, &filter)?;
                if let Some(hit) = hits.into_iter().find(|h| h.similarity >= self.similarity_floor) {
                    if let Some(template) = self.get(&hit.record_id).filter(SafetyTemplate::is_approved) {
                        return Ok(Selection {
                            template,
                            route: SelectionRoute::Semantic { similarity: hit.similarity },
                            drawn_goal,
                        });
                    }
                }
            }
        }
        Ok(Selection { template: general, route: SelectionRoute::General, drawn_goal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::HashEmbedder;

    fn library() -> TemplateLibrary {
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
        let index = Arc::new(VectorIndex::new(embedder.dim()));
        TemplateLibrary::default_fixture(Arc::new(KnowledgeBase::default_fixture()), embedder, index).unwrap()
    }

    #[test]
    fn fixture_corpus_shape() {
        let lib = library();
        let approved = lib.approved();
        assert_eq!(approved.len(), 19);
        assert_eq!(approved.iter().filter(|t| t.is_general).count(), 1);
        for t in &approved {
            let n = t.script.interactions().count();
            assert_eq!(n, usize::from(t.duration_min != 5), "{}", t.template_id);
            assert!(lib.check(t).passed, "{}: {:?}", t.template_id, lib.check(t));
        }
    }

    #[test]
    fn exact_match_wins() {
        let s = library().select("Sleep", 15, GuidanceLevel::Less, 0).unwrap();
        assert_eq!(s.route, SelectionRoute::Exact);
        assert_eq!(s.template.template_id, "sleep-15-less");
    }

    #[test]
    fn related_goal_falls_back_semantically() {
        let s = library().select("Deep Relaxation", 10, GuidanceLevel::More, 0).unwrap();
        assert!(matches!(s.route, SelectionRoute::Semantic { similarity } if similarity >= 0.3));
        assert_eq!(s.template.template_id, "sleep-10-more");
    }

    #[test]
    fn unrelated_goal_gets_general() {
        let s = library().select("Quantum taxes", 5, GuidanceLevel::More, 0).unwrap();
        assert_eq!(s.route, SelectionRoute::General);
        assert!(s.template.is_general);
    }

    #[test]
    fn surprise_me_draws_a_concrete_goal() {
        let lib = library();
        let a = lib.select("Surprise Me", 10, GuidanceLevel::More, 7).unwrap();
        let b = lib.select("Surprise Me", 10, GuidanceLevel::More, 7).unwrap();
        assert_eq!(a, b);
        let g = a.drawn_goal.unwrap();
        assert!(lib.kb().non_proxy_goals().any(|e| e.goal == g));
    }

    #[test]
    fn approval_gate() {
        let lib = library();
        let mut t = lib.get("sleep-05-more").unwrap();
        t.template_id = "draft-1".into();
        t.status = TemplateStatus::Draft;
        t.approval = None;
        lib.insert(t.clone()).unwrap();
        let now = Utc::now();
        let a = lib.approve("draft-1", "expert", now).unwrap();
        assert_eq!(a.status, TemplateStatus::Approved);
        assert_eq!(a.approval.unwrap().approver, "expert");
        assert!(matches!(lib.approve("draft-1", "expert", now), Err(ForgeError::AlreadyApproved(_))));
        assert!(matches!(lib.approve("nope", "expert", now), Err(ForgeError::UnknownTemplate(_))));

        let mut bad = t;
        bad.template_id = "draft-2".into();
        bad.script.blocks.pop();
        lib.insert(bad).unwrap();
        assert!(matches!(lib.approve("draft-2", "expert", now), Err(ForgeError::FailingChecks { .. })));
    }

    #[test]
    fn corpus_without_general_rejected() {
        let mut c = Corpus::default_fixture();
        c.templates.retain(|t| !t.is_general);
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
        let index = Arc::new(VectorIndex::new(embedder.dim()));
        let r = TemplateLibrary::new(c, Arc::new(KnowledgeBase::default_fixture()), embedder, index);
        assert!(matches!(r, Err(ForgeError::NoGeneralTemplate)));
    }
}
