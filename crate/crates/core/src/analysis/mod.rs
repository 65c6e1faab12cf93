//! Impact analysis over decision records and the event log: group
//! comparisons (t-tests, logit, LMM), bandit behaviour (allocation,
//! sensitivity, embedding) and recommendation success.

pub mod lmm;
pub mod logit;
pub mod report;
pub mod series;
pub mod tsne;
pub mod ttest;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::Arm;
use crate::events::{EventKind, EventRecord, Timestamp};
use crate::index::EventIndex;
use crate::orchestrator::{DecisionRecord, Group, Reaction};

pub use lmm::{fit_lmm, LmmEstimate, LongitudinalTable, RemlProblem};
pub use logit::{fit_logit, Coefficient, LogitFit};
pub use report::{analyze, AnalysisOptions, AnalysisReport};
pub use series::{evolution_tests, expenditure_series, Evolution, ExpenditureSeries, SeriesMode, StratumKind};
pub use tsne::{silhouette_score, tsne_embed, TsneOptions, TsneResult};
pub use ttest::{power_two_sided, sample_size_per_group, welch_ttest, TestResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("sample too small or without variance")]
    DegenerateSample,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("a covariate perfectly separates the outcome; coefficients diverge")]
    SeparationDetected,
    #[error("the outcome has a single class")]
    MissingOutcomeClass,
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("inconsistent input dimensions or non-finite values")]
    ShapeMismatch,
    #[error("no decision records")]
    NoDecisions,
    #[error("bandit: {0}")]
    Bandit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyAllocation {
    pub week: u32,
    pub treat_fraction: f64,
    pub adaptive_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSeries {
    pub weeks: Vec<WeeklyAllocation>,
    /// Weeks in which more than half of the adaptive group got the treat arm.
    pub majority_nudged_weeks: usize,
    pub mean_treat_fraction: f64,
}

pub fn bandit_allocation_series(decisions: &[DecisionRecord]) -> AllocationSeries {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in decisions.iter().filter(|r| r.group == Group::Adaptive) {
        let e = counts.entry(r.week).or_insert((0, 0));
        e.1 += 1;
        if r.arm == Some(Arm::Treat) {
            e.0 += 1;
        }
    }
    let weeks: Vec<WeeklyAllocation> = counts
        .into_iter()
        .map(|(week, (t, n))| WeeklyAllocation { week, treat_fraction: t as f64 / n as f64, adaptive_users: n })
        .collect();
    let majority_nudged_weeks = weeks.iter().filter(|w| w.treat_fraction > 0.5).count();
    let mean_treat_fraction = if weeks.is_empty() {
        0.0
    } else {
        weeks.iter().map(|w| w.treat_fraction).sum::<f64>() / weeks.len() as f64
    };
    AllocationSeries { weeks, majority_nudged_weeks, mean_treat_fraction }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessFlag {
    pub decision_id: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationSuccess {
    pub sent: usize,
    pub successful: usize,
    pub fraction: f64,
    pub flags: Vec<SuccessFlag>,
}

/// A sent nudge succeeds when its target sku is ordered by the user's
/// pharmacy strictly after the send and strictly before `horizon`.
pub fn recommendation_success(decisions: &[DecisionRecord], events: &[EventRecord], horizon: Timestamp) -> RecommendationSuccess {
    let index = EventIndex::new(events);
    let flags: Vec<SuccessFlag> = decisions
        .iter()
        .filter_map(|r| r.recommendation.as_ref().map(|rec| (r, rec)))
        .map(|(r, rec)| {
            let success = index
                .pharmacy_events_after(&r.pharmacy_id, r.decided_at, horizon)
                .iter()
                .filter(|e| e.kind == EventKind::Order && e.timestamp < horizon)
                .filter_map(|e| e.as_order())
                .any(|o| o.contains(&rec.target_sku));
            SuccessFlag { decision_id: r.decision_id.clone(), success }
        })
        .collect();
    let successful = flags.iter().filter(|f| f.success).count();
    let sent = flags.len();
    RecommendationSuccess { sent, successful, fraction: if sent == 0 { 0.0 } else { successful as f64 / sent as f64 }, flags }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionBreakdown {
    pub sent: usize,
    pub opened: f64,
    pub closed: f64,
    pub ignored: f64,
}

pub fn reaction_breakdown(decisions: &[DecisionRecord]) -> ReactionBreakdown {
    let sent: Vec<&DecisionRecord> = decisions.iter().filter(|r| r.nudge_sent()).collect();
    let n = sent.len();
    let share = |reaction: Reaction| {
        if n == 0 {
            0.0
        } else {
            sent.iter().filter(|r| r.reaction == reaction).count() as f64 / n as f64
        }
    };
    ReactionBreakdown { sent: n, opened: share(Reaction::Opened), closed: share(Reaction::Closed), ignored: share(Reaction::Ignored) }
}

/// User-level logit table: outcome "accumulated expenditure above the pooled
/// median", covariates intercept, adaptive-group flag and baseline spend (in
/// thousands).
pub fn logit_table(series: &ExpenditureSeries, index: &EventIndex<'_>) -> (Vec<Vec<f64>>, Vec<bool>, Vec<String>) {
    let totals: Vec<f64> = (0..series.participants.len())
        .map(|i| match series.mode {
            SeriesMode::Accumulated => series.values[i].last().copied().unwrap_or(0.0),
            SeriesMode::Daily => series.values[i].iter().sum(),
        })
        .collect();
    let median = crate::util::quantile(&totals, 0.5).unwrap_or(0.0);
    let mut rows = Vec::with_capacity(totals.len());
    for p in &series.participants {
        let adaptive = if p.group == Group::Adaptive { 1.0 } else { 0.0 };
        let baseline = series::baseline_spend(index, &p.pharmacy_id, series.start) / 1000.0;
        rows.push(vec![1.0, adaptive, baseline]);
    }
    let outcome = totals.iter().map(|t| *t > median).collect();
    (rows, outcome, vec!["intercept".into(), "adaptive_arm".into(), "baseline_expenditure".into()])
}

/// Weekly expenditure per user and week, with the fixed effects
/// intercept, adaptive arm, nudged that week and baseline weekly spend.
pub fn longitudinal_table(decisions: &[DecisionRecord], index: &EventIndex<'_>) -> LongitudinalTable {
    let start = decisions.iter().map(|r| r.decided_at).min();
    let mut table = LongitudinalTable {
        names: vec!["intercept".into(), "adaptive_arm".into(), "nudged_that_week".into(), "baseline_expenditure".into()],
        groups: Vec::with_capacity(decisions.len()),
        rows: Vec::with_capacity(decisions.len()),
        y: Vec::with_capacity(decisions.len()),
    };
    let Some(start) = start else { return table };
    let mut baselines: BTreeMap<&str, f64> = BTreeMap::new();
    for r in decisions {
        let baseline = *baselines.entry(r.pharmacy_id.as_str()).or_insert_with(|| {
            series::baseline_spend(index, &r.pharmacy_id, start) / (series::BASELINE_DAYS as f64 / 7.0)
        });
        let week_end = r.decided_at + crate::calendar::days(7);
        let spend: f64 = index.pharmacy_spend(&r.pharmacy_id, Some(r.decided_at), week_end);
        table.groups.push(r.user_id.clone());
        table.rows.push(vec![
            1.0,
            if r.group == Group::Adaptive { 1.0 } else { 0.0 },
            if r.nudge_sent() { 1.0 } else { 0.0 },
            baseline,
        ]);
        table.y.push(spend);
    }
    table
}

/// Indices of adaptive decisions in the final week, for the embedding.
pub fn final_week_adaptive(decisions: &[DecisionRecord]) -> Vec<usize> {
    let last = decisions.iter().map(|r| r.week).max().unwrap_or(0);
    decisions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.week == last && r.group == Group::Adaptive)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::OrderLine;
    use crate::recommender::{RecommendReason, Recommendation};
    use chrono::{TimeZone, Utc};

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 3, 3, 23, 0, 0).unwrap()
    }

    fn rec(week: u32, user: &str, arm: Option<Arm>, reaction: Reaction, target: Option<&str>) -> DecisionRecord {
        DecisionRecord {
            decision_id: format!("x-w{week}-{user}"),
            week,
            decided_at: t0() + crate::calendar::days(7 * (i64::from(week) - 1)),
            user_id: user.into(),
            pharmacy_id: format!("p-{user}"),
            group: if arm.is_some() { Group::Adaptive } else { Group::PureControl },
            arm,
            treat_probability: None,
            context: vec![1.0],
            recommendation: target.map(|t| Recommendation {
                anchor_sku: "A".into(),
                target_sku: t.into(),
                reason: RecommendReason::NeverPurchased,
                rank: 1,
            }),
            skipped: None,
            reward: Some(0.0),
            reaction,
        }
    }

    #[test]
    fn allocation_fractions() {
        let mut d: Vec<_> = (0..10)
            .map(|i| rec(1, &format!("u{i}"), Some(if i < 7 { Arm::Treat } else { Arm::Control }), Reaction::NotApplicable, None))
            .collect();
        d.push(rec(1, "pc", None, Reaction::NotApplicable, None));
        d.extend((0..4).map(|i| rec(2, &format!("u{i}"), Some(Arm::Treat), Reaction::NotApplicable, None)));
        let s = bandit_allocation_series(&d);
        assert!((s.weeks[0].treat_fraction - 0.7).abs() < 1e-12);
        assert_eq!(s.weeks[1].treat_fraction, 1.0);
        assert_eq!(s.majority_nudged_weeks, 2);
    }

    #[test]
    fn success_fraction() {
        let mut d = Vec::new();
        for i in 0..9 {
            d.push(rec(1, &format!("u{i}"), Some(Arm::Treat), Reaction::Ignored, Some("B")));
        }
        let buy = |user: &str, days: i64| {
            EventRecord::order(
                t0() + crate::calendar::days(days),
                user,
                &format!("p-{user}"),
                vec![OrderLine { sku: "B".into(), quantity: 1, unit_price: 1.0 }],
            )
        };
        let mut events = vec![buy("u0", 21), buy("u1", 3), buy("u2", -1), buy("u3", 60)];
        crate::events::sort_events(&mut events);
        let s = recommendation_success(&d, &events, t0() + crate::calendar::days(56));
        assert_eq!(s.successful, 2);
        assert!((s.fraction - 2.0 / 9.0).abs() < 1e-12);
        assert_eq!(recommendation_success(&d, &[], t0() + crate::calendar::days(56)).fraction, 0.0);
    }

    #[test]
    fn reaction_shares_sum_to_one() {
        let d = vec![
            rec(1, "a", Some(Arm::Treat), Reaction::Opened, Some("B")),
            rec(1, "b", Some(Arm::Treat), Reaction::Closed, Some("B")),
            rec(1, "c", Some(Arm::Treat), Reaction::Ignored, Some("B")),
            rec(1, "d", Some(Arm::Treat), Reaction::Ignored, Some("B")),
            rec(1, "e", Some(Arm::Control), Reaction::NotApplicable, None),
        ];
        let b = reaction_breakdown(&d);
        assert_eq!(b.sent, 4);
        assert!((b.opened + b.closed + b.ignored - 1.0).abs() < 1e-12);
        assert_eq!(b.ignored, 0.5);
    }
}
