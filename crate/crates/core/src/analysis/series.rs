//! Per-user daily and accumulated expenditure, and per-day group tests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ttest::{welch_ttest, TestResult};
use crate::calendar::{days, SECONDS_PER_DAY};
use crate::events::{EventKind, EventRecord, Timestamp};
use crate::index::EventIndex;
use crate::orchestrator::{DecisionRecord, Group};
use crate::util::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesMode {
    Daily,
    Accumulated,
}

/// Cohort users with their fixed group and pharmacy, taken from decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub user_id: String,
    pub pharmacy_id: String,
    pub group: Group,
}

pub fn participants(decisions: &[DecisionRecord]) -> Vec<Participant> {
    let mut seen = BTreeMap::new();
    for r in decisions {
        seen.entry(r.user_id.as_str()).or_insert_with(|| Participant {
            user_id: r.user_id.clone(),
            pharmacy_id: r.pharmacy_id.clone(),
            group: r.group,
        });
    }
    seen.into_values().collect()
}

/// Experiment span implied by the decisions: first decision instant and
/// number of days (7 per week up to the last week).
pub fn experiment_span(decisions: &[DecisionRecord]) -> Option<(Timestamp, usize)> {
    let start = decisions.iter().map(|r| r.decided_at).min()?;
    let first_week = decisions.iter().map(|r| r.week).min()?;
    let last_week = decisions.iter().map(|r| r.week).max()?;
    Some((start, 7 * (last_week - first_week + 1) as usize))
}

/// Per-user expenditure matrix. Day `d` covers `[start + d, start + d + 1)`
/// days; a user's value is their pharmacy's order total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpenditureSeries {
    pub mode: SeriesMode,
    pub start: Timestamp,
    pub days: usize,
    pub participants: Vec<Participant>,
    /// `values[user][day]`.
    pub values: Vec<Vec<f64>>,
}

impl ExpenditureSeries {
    pub fn day_values(&self, day: usize, group: Group, members: Option<&BTreeSet<usize>>) -> Vec<f64> {
        self.participants
            .iter()
            .enumerate()
            .filter(|(i, p)| p.group == group && members.is_none_or(|m| m.contains(i)))
            .map(|(i, _)| self.values[i][day])
            .collect()
    }
}

pub fn expenditure_series(decisions: &[DecisionRecord], events: &[EventRecord], mode: SeriesMode) -> ExpenditureSeries {
    let people = participants(decisions);
    let (start, n_days) = experiment_span(decisions).unwrap_or((Timestamp::default(), 0));
    let mut by_pharmacy: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in people.iter().enumerate() {
        by_pharmacy.entry(p.pharmacy_id.as_str()).or_default().push(i);
    }
    let mut values = vec![vec![0.0; n_days]; people.len()];
    let end = start + days(n_days as i64);
    for event in events.iter().filter(|e| e.kind == EventKind::Order && e.timestamp >= start && e.timestamp < end) {
        let Some(users) = by_pharmacy.get(event.pharmacy_id.as_str()) else { continue };
        let day = ((event.timestamp - start).num_seconds() / SECONDS_PER_DAY) as usize;
        let spend = event.expenditure();
        for &u in users {
            values[u][day] += spend;
        }
    }
    if mode == SeriesMode::Accumulated {
        for row in &mut values {
            for d in 1..row.len() {
                row[d] += row[d - 1];
            }
        }
    }
    ExpenditureSeries { mode, start, days: n_days, participants: people, values }
}

/// Daily tests of adaptive against pure control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evolution {
    pub mode: SeriesMode,
    pub alpha: f64,
    pub tests: Vec<TestResult>,
    /// Days whose samples were degenerate and therefore not tested.
    pub skipped_days: Vec<usize>,
}

impl Evolution {
    /// Share of tested days with a significant difference.
    pub fn significant_fraction(&self) -> f64 {
        if self.tests.is_empty() {
            return 0.0;
        }
        self.tests.iter().filter(|t| t.significant).count() as f64 / self.tests.len() as f64
    }

    /// Longest streak of consecutive days that were tested and significant.
    pub fn longest_significant_run(&self) -> usize {
        let (mut best, mut run, mut prev) = (0usize, 0usize, None::<usize>);
        for t in &self.tests {
            if t.significant {
                run = if prev.is_some_and(|p| p + 1 == t.day) { run + 1 } else { 1 };
                prev = Some(t.day);
                best = best.max(run);
            } else {
                run = 0;
                prev = None;
            }
        }
        best
    }
}

pub fn evolution_tests(series: &ExpenditureSeries, alpha: f64, members: Option<&BTreeSet<usize>>) -> Evolution {
    let mut tests = Vec::new();
    let mut skipped_days = Vec::new();
    for day in 0..series.days {
        let a = series.day_values(day, Group::Adaptive, members);
        let b = series.day_values(day, Group::PureControl, members);
        match welch_ttest(&a, &b, alpha) {
            Ok(mut r) => {
                r.day = day;
                tests.push(r);
            }
            Err(_) => skipped_days.push(day),
        }
    }
    Evolution { mode: series.mode, alpha, tests, skipped_days }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKind {
    Region,
    BaselineSpendTercile,
    PurchaseFrequencyTercile,
}

impl std::str::FromStr for StratumKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "region" => Ok(Self::Region),
            "baseline_spend" | "baseline_spend_tercile" => Ok(Self::BaselineSpendTercile),
            "purchase_frequency" | "purchase_frequency_tercile" => Ok(Self::PurchaseFrequencyTercile),
            other => Err(format!("unknown stratum `{other}` (expected region, baseline_spend, purchase_frequency)")),
        }
    }
}

pub const BASELINE_DAYS: i64 = 90;

/// Pre-experiment pharmacy spend over the `BASELINE_DAYS` before `start`.
pub fn baseline_spend(index: &EventIndex<'_>, pharmacy: &str, start: Timestamp) -> f64 {
    index.pharmacy_spend(pharmacy, Some(start - days(BASELINE_DAYS)), start)
}

fn order_days(index: &EventIndex<'_>, pharmacy: &str, start: Timestamp) -> f64 {
    index
        .pharmacy_events(pharmacy, Some(start - days(BASELINE_DAYS)), start)
        .iter()
        .filter(|e| e.kind == EventKind::Order)
        .map(|e| (e.timestamp - start).num_seconds().div_euclid(SECONDS_PER_DAY))
        .collect::<BTreeSet<_>>()
        .len() as f64
}

fn tercile_labels(values: &[f64]) -> Vec<String> {
    let q1 = quantile(values, 1.0 / 3.0).unwrap_or(0.0);
    let q2 = quantile(values, 2.0 / 3.0).unwrap_or(0.0);
    values
        .iter()
        .map(|v| {
            if *v <= q1 {
                "low"
            } else if *v <= q2 {
                "mid"
            } else {
                "high"
            }
            .to_string()
        })
        .collect()
}

/// Participant indices grouped by stratum label.
pub fn strata(
    series: &ExpenditureSeries,
    index: &EventIndex<'_>,
    kind: StratumKind,
) -> BTreeMap<String, BTreeSet<usize>> {
    let start = series.start;
    let labels: Vec<String> = match kind {
        StratumKind::Region => series
            .participants
            .iter()
            .map(|p| index.region_of(&p.user_id, start).unwrap_or("unknown").to_string())
            .collect(),
        StratumKind::BaselineSpendTercile => tercile_labels(
            &series.participants.iter().map(|p| baseline_spend(index, &p.pharmacy_id, start)).collect::<Vec<_>>(),
        ),
        StratumKind::PurchaseFrequencyTercile => tercile_labels(
            &series.participants.iter().map(|p| order_days(index, &p.pharmacy_id, start)).collect::<Vec<_>>(),
        ),
    };
    let mut out: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (i, label) in labels.into_iter().enumerate() {
        out.entry(label).or_default().insert(i);
    }
    out
}
