//! Study fixtures: the ablation personas and the single-item lab measures.

use serde::{Deserialize, Serialize};

use crate::personalization::UserProfile;

const PERSONAS: &str = include_str!("../fixtures/personas.json");
const MEASURES: &str = include_str!("../fixtures/formative_measures.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: u32,
    pub name: String,
    pub age: u32,
    pub occupation: String,
    /// Goal used in each of the four ablation studies, in order.
    pub study_goals: Vec<String>,
}

impl Persona {
    /// Profile for a simulated first-time user.
    pub fn profile(&self) -> UserProfile {
        UserProfile { display_name: self.name.clone(), prior_session_count: 0 }
    }
}

#[derive(Deserialize)]
struct PersonaDoc {
    personas: Vec<Persona>,
}

pub fn personas() -> Vec<Persona> {
    serde_json::from_str::<PersonaDoc>(PERSONAS).expect("bundled personas parse").personas
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertScale {
    pub min: u8,
    pub max: u8,
}

impl LikertScale {
    pub fn contains(&self, rating: u8) -> bool {
        (self.min..=self.max).contains(&rating)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormativeMeasure {
    pub id: String,
    pub metric: String,
    pub item: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureSet {
    pub scale: LikertScale,
    pub measures: Vec<FormativeMeasure>,
}

pub fn formative_measures() -> MeasureSet {
    serde_json::from_str(MEASURES).expect("bundled measures parse")
}
