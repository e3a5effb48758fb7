//! Safety-template corpus, script checkers and correctors, training-data
//! emission, approval and template selection.

mod checker;
mod corrector;
mod dataset;
mod library;
mod malform;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checker::{
    check_script, check_script_with, check_text, check_text_with, CheckReport, CheckerConfig,
    ClaimScanner, DefinitionClaim, DefinitionJudge, LlmJudge, RarestTokenJudge, Violation,
    ViolationKind, SUPPORTED_DURATIONS,
};
pub use corrector::{correct_script, CorrectError, Correction, Corrector, CLOSING_NARRATION, MAX_ROUNDS};
pub use dataset::{
    build_dpo_pairs, build_sft_records, generation_prompt, write_jsonl, DpoPair, RejectionSource,
    SftRecord, DEFAULT_AUGMENTATIONS, GENERATOR_SYSTEM,
};
pub use library::{
    Approval, Corpus, SafetyTemplate, Selection, SelectionRoute, TemplateLibrary, TemplateStatus,
    DEFAULT_SIMILARITY_FLOOR,
};
pub use malform::{malform_text, malformed_variant, malformed_variants, MalformKind, MalformedVariant};

pub(crate) use corrector::fit_structure_and_budget;

use crate::providers::ProviderError;
use crate::vector_index::IndexError;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{0}` is already approved")]
    AlreadyApproved(String),
    #[error("template `{id}` fails its checks ({} violations)", report.violations.len())]
    FailingChecks { id: String, report: CheckReport },
    #[error("corpus has no approved general template")]
    NoGeneralTemplate,
    #[error("corpus has {0} approved general templates, expected exactly one")]
    MultipleGeneral(usize),
    #[error("duplicate template id `{0}`")]
    DuplicateTemplate(String),
    #[error("template `{id}` is invalid: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("draft and expert edit are identical")]
    IdenticalDraft,
    #[error("expert edit fails its checks ({} violations)", .0.violations.len())]
    EditFails(CheckReport),
    #[error("could only build {got} of {wanted} malformed variants")]
    AugmentationExhausted { wanted: usize, got: usize },
    #[error("corpus document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceLevel {
    More,
    Less,
}

impl GuidanceLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceLevel::More => "more",
            GuidanceLevel::Less => "less",
        }
    }
}

impl fmt::Display for GuidanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "more" => Ok(GuidanceLevel::More),
            "less" => Ok(GuidanceLevel::Less),
            other => Err(format!("guidance level must be `more` or `less`, got `{other}`")),
        }
    }
}
