//! Sessions completed per day, per user and per condition.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::scalar::Scalar;

/// Half-open calendar window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, StatsError> {
        if end <= start {
            return Err(StatsError::EmptyWindow);
        }
        Ok(Self { start, end })
    }

    pub fn days(&self) -> u32 {
        (self.end - self.start).num_days() as u32
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d < self.end
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        let (start, days) = (self.start, self.days());
        (0..days).map(move |i| start + chrono::Days::new(u64::from(i)))
    }
}

/// A session that reached Completed. Dates are taken in UTC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub user_id: String,
    pub condition: String,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct EngagementSummary<S: Scalar> {
    pub user_id: String,
    pub sessions_count: u32,
    pub days: u32,
    pub rate: S,
}

/// Sessions completed by `user_id` inside the window divided by its length in days.
pub fn engagement<S: Scalar>(
    user_id: &str,
    completions: &[Completion],
    window: &DateWindow,
) -> Result<EngagementSummary<S>, StatsError> {
    if window.end <= window.start {
        return Err(StatsError::EmptyWindow);
    }
    let sessions_count = completions
        .iter()
        .filter(|c| c.user_id == user_id && window.contains(c.completed_at.date_naive()))
        .count() as u32;
    let days = window.days();
    Ok(EngagementSummary {
        user_id: user_id.to_string(),
        sessions_count,
        days,
        rate: S::from_f64_lossy(f64::from(sessions_count) / f64::from(days)),
    })
}

/// Engagement of every listed user.
pub fn condition_engagement<S: Scalar>(
    users: &[String],
    completions: &[Completion],
    window: &DateWindow,
) -> Result<Vec<EngagementSummary<S>>, StatsError> {
    users.iter().map(|u| engagement(u, completions, window)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct DailyPoint<S: Scalar> {
    pub date: NaiveDate,
    pub sessions: u32,
    pub users: u32,
    /// sessions / users
    pub mean: S,
}

/// Mean sessions per user for each day of the window, over the given users
/// of one condition. No users gives an empty series.
pub fn daily_series<S: Scalar>(
    condition: &str,
    users: &[String],
    completions: &[Completion],
    window: &DateWindow,
) -> Vec<DailyPoint<S>> {
    let members: HashSet<&str> = users.iter().map(String::as_str).collect();
    if members.is_empty() {
        return Vec::new();
    }
    let mut per_day: BTreeMap<NaiveDate, u32> = window.dates().map(|d| (d, 0)).collect();
    for c in completions {
        if c.condition != condition || !members.contains(c.user_id.as_str()) {
            continue;
        }
        if let Some(n) = per_day.get_mut(&c.completed_at.date_naive()) {
            *n += 1;
        }
    }
    let n_users = members.len() as u32;
    per_day
        .into_iter()
        .map(|(date, sessions)| DailyPoint {
            date,
            sessions,
            users: n_users,
            mean: S::from_f64_lossy(f64::from(sessions) / f64::from(n_users)),
        })
        .collect()
}
