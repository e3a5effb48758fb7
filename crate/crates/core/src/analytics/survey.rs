//! Pre/post survey score deltas with within- and between-condition tests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{mann_whitney_u, wilcoxon_signed_rank, StatsError, TestResult};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Instrument {
    Psqi,
    PanasSf,
    Gad7,
    FfmqSf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SurveyScore<S: Scalar> {
    pub user_id: String,
    pub condition: String,
    pub instrument: Instrument,
    pub score: S,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct SurveyDelta<S: Scalar> {
    pub user_id: String,
    pub condition: String,
    pub instrument: Instrument,
    pub pre: S,
    pub post: S,
}

impl<S: Scalar> SurveyDelta<S> {
    pub fn delta(&self) -> S {
        self.post - self.pre
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case", bound = "")]
pub enum WithinOutcome<S: Scalar> {
    Tested(TestResult<S>),
    /// Every delta was zero.
    NoChange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct SurveyReport<S: Scalar> {
    pub deltas: Vec<SurveyDelta<S>>,
    /// (instrument, condition) → signed-rank test of deltas against zero
    pub within: Vec<(Instrument, String, WithinOutcome<S>)>,
    /// (instrument, condition a, condition b) → rank-sum test of deltas
    pub between: Vec<(Instrument, String, String, TestResult<S>)>,
}

type Key = (String, Instrument);

/// Match pre and post scores by (user, instrument) and test the deltas.
pub fn survey_deltas<S: Scalar>(
    pre: &[SurveyScore<S>],
    post: &[SurveyScore<S>],
) -> Result<SurveyReport<S>, StatsError> {
    let index = |xs: &[SurveyScore<S>]| -> BTreeMap<Key, SurveyScore<S>> {
        xs.iter().map(|s| ((s.user_id.clone(), s.instrument), s.clone())).collect()
    };
    let (pre_ix, post_ix) = (index(pre), index(post));
    for key in pre_ix.keys().chain(post_ix.keys()) {
        if !(pre_ix.contains_key(key) && post_ix.contains_key(key)) {
            return Err(StatsError::Unmatched(key.0.clone()));
        }
    }
    let deltas: Vec<SurveyDelta<S>> = pre_ix
        .iter()
        .map(|(key, p)| SurveyDelta {
            user_id: key.0.clone(),
            condition: p.condition.clone(),
            instrument: key.1,
            pre: p.score,
            post: post_ix[key].score,
        })
        .collect();

    let mut groups: BTreeMap<(Instrument, String), Vec<S>> = BTreeMap::new();
    for d in &deltas {
        groups.entry((d.instrument, d.condition.clone())).or_default().push(d.delta());
    }
    let mut within = Vec::new();
    for ((inst, cond), values) in &groups {
        let outcome = match wilcoxon_signed_rank(values) {
            Ok(r) => WithinOutcome::Tested(r),
            Err(StatsError::AllZero) => WithinOutcome::NoChange,
            Err(e) => return Err(e),
        };
        within.push((*inst, cond.clone(), outcome));
    }
    let mut between = Vec::new();
    let instruments: BTreeSet<Instrument> = groups.keys().map(|(i, _)| *i).collect();
    for inst in instruments {
        let conds: Vec<&String> = groups.keys().filter(|(i, _)| *i == inst).map(|(_, c)| c).collect();
        for (x, a) in conds.iter().enumerate() {
            for b in &conds[x + 1..] {
                let r = mann_whitney_u(&groups[&(inst, (*a).clone())], &groups[&(inst, (*b).clone())])?;
                between.push((inst, (*a).clone(), (*b).clone(), r));
            }
        }
    }
    Ok(SurveyReport { deltas, within, between })
}
