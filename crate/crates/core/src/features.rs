//! Cohort eligibility and per-user context vectors.
//!
//! Everything here is evaluated on events strictly before the `as_of`
//! instant, so later events can never leak into a decision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{days, days_between, local_date};
use crate::events::{EventKind, EventRecord, Timestamp};
use crate::index::EventIndex;
use crate::util::quantile;

/// Standardized values are clipped to `[-Z_CLIP, Z_CLIP]`.
pub const Z_CLIP: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no events before the evaluation instant")]
    EmptyLog,
    #[error("user {user}: value `{value}` of feature `{feature}` is not a known category")]
    UnknownCategory { user: String, feature: String, value: String },
    #[error("invalid context spec: {0}")]
    InvalidSpec(String),
    #[error("invalid eligibility criteria: {0}")]
    InvalidCriteria(String),
    #[error("standardizer was fitted for {expected} columns, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EligibilityCriteria {
    pub max_users_per_pharmacy: usize,
    /// Trailing window over which regular weekly activity is required.
    pub activity_window_days: i64,
    /// Distinct login days required inside `activity_window_days`.
    pub min_login_days: usize,
    pub require_login_within_days: i64,
    /// Pharmacies spending above this quantile are excluded.
    pub top_spender_exclusion_quantile: f64,
    pub spend_lookback_days: i64,
    /// Required app language; `None` disables the filter.
    pub language: Option<String>,
}

impl Default for EligibilityCriteria {
    fn default() -> Self {
        Self {
            max_users_per_pharmacy: 2,
            activity_window_days: 60,
            min_login_days: 8,
            require_login_within_days: 40,
            top_spender_exclusion_quantile: 0.80,
            spend_lookback_days: 60,
            language: Some("id".to_string()),
        }
    }
}

impl EligibilityCriteria {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let q = self.top_spender_exclusion_quantile;
        if !(0.0..=1.0).contains(&q) {
            return Err(FeatureError::InvalidCriteria(format!("quantile {q} outside [0, 1]")));
        }
        for (name, v) in [
            ("activity_window_days", self.activity_window_days),
            ("require_login_within_days", self.require_login_within_days),
            ("spend_lookback_days", self.spend_lookback_days),
        ] {
            if v <= 0 {
                return Err(FeatureError::InvalidCriteria(format!("{name} must be positive")));
            }
        }
        if self.max_users_per_pharmacy == 0 {
            return Err(FeatureError::InvalidCriteria("max_users_per_pharmacy must be positive".into()));
        }
        Ok(())
    }
}

/// Users that satisfy every eligibility rule on data strictly before `as_of`.
///
/// Spend exclusion is pharmacy-level: the pharmacy's order total over the
/// lookback window is compared against the quantile over all pharmacies
/// present in the log.
pub fn eligible_cohort(
    index: &EventIndex<'_>,
    criteria: &EligibilityCriteria,
    as_of: Timestamp,
    utc_offset_hours: i32,
) -> Result<BTreeSet<String>, FeatureError> {
    criteria.validate()?;
    if index.before(as_of).is_empty() {
        return Err(FeatureError::EmptyLog);
    }

    let spend_from = as_of - days(criteria.spend_lookback_days);
    let mut pharmacy_spend: BTreeMap<&str, f64> = BTreeMap::new();
    for pharmacy in index.pharmacies() {
        if index.pharmacy_events(pharmacy, None, as_of).is_empty() {
            continue;
        }
        pharmacy_spend.insert(pharmacy, index.pharmacy_spend(pharmacy, Some(spend_from), as_of));
    }
    let spends: Vec<f64> = pharmacy_spend.values().copied().collect();
    let spend_cap = quantile(&spends, criteria.top_spender_exclusion_quantile).unwrap_or(f64::INFINITY);

    let activity_from = as_of - days(criteria.activity_window_days);
    let recent_from = as_of - days(criteria.require_login_within_days);
    let mut cohort = BTreeSet::new();
    for user in index.users() {
        let Some(pharmacy) = index.pharmacy_of(user, as_of) else { continue };
        if index.pharmacy_users(pharmacy, as_of).len() > criteria.max_users_per_pharmacy {
            continue;
        }
        if pharmacy_spend.get(pharmacy).copied().unwrap_or(0.0) > spend_cap {
            continue;
        }
        if let Some(lang) = &criteria.language {
            if index.language_of(user, as_of) != Some(lang.as_str()) {
                continue;
            }
        }
        let logins: Vec<&EventRecord> = index
            .user_events(user, Some(activity_from), as_of)
            .into_iter()
            .filter(|e| e.kind == EventKind::Login)
            .collect();
        let login_days: BTreeSet<_> = logins.iter().map(|e| local_date(&e.timestamp, utc_offset_hours)).collect();
        if login_days.len() < criteria.min_login_days {
            continue;
        }
        if !logins.iter().any(|e| e.timestamp >= recent_from) {
            continue;
        }
        cohort.insert(user.to_string());
    }
    Ok(cohort)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    /// Categorical region reported at login; must be one-hot encoded.
    Region,
    /// `min(days / window, 1)`, 1.0 when the user was never nudged.
    DaysSinceLastNudge,
    /// Distinct local days with a pharmacy order in the window.
    OrderDays,
    /// Pharmacy order expenditure in the window.
    Expenditure,
    /// Mean gap in days between distinct login days in the window; the
    /// window length when fewer than two login days exist.
    MeanDaysBetweenLogins,
    DaysSinceFirstLogin,
    NudgesOpened,
    /// Session time reported at login, in hours.
    AppHours,
    LoginDays,
}

impl Extractor {
    fn needs_window(self) -> bool {
        !matches!(self, Extractor::Region | Extractor::DaysSinceFirstLogin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Standardized with cohort statistics frozen at experiment start.
    Zscore,
    /// Scaled to `[0, 1]` by the cohort min and max, values outside capped.
    MinmaxCap,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub extractor: Extractor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_days: Option<i64>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_hot_categories: Option<Vec<String>>,
    /// Route unlisted categories to an extra `other` column instead of failing.
    #[serde(default)]
    pub allow_other: bool,
}

impl FeatureDescriptor {
    pub fn numeric(name: &str, extractor: Extractor, window_days: Option<i64>, normalization: Normalization) -> Self {
        Self {
            name: name.to_string(),
            extractor,
            window_days,
            normalization,
            one_hot_categories: None,
            allow_other: false,
        }
    }

    pub fn one_hot(name: &str, categories: &[&str], allow_other: bool) -> Self {
        Self {
            name: name.to_string(),
            extractor: Extractor::Region,
            window_days: None,
            normalization: Normalization::None,
            one_hot_categories: Some(categories.iter().map(|s| s.to_string()).collect()),
            allow_other,
        }
    }

    fn width(&self) -> usize {
        match &self.one_hot_categories {
            Some(c) => c.len() + usize::from(self.allow_other),
            None => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub features: Vec<FeatureDescriptor>,
}

impl ContextSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if f.name.is_empty() || !seen.insert(f.name.as_str()) {
                return Err(FeatureError::InvalidSpec(format!("duplicate or empty feature name `{}`", f.name)));
            }
            match (&f.one_hot_categories, f.extractor) {
                (Some(c), _) if c.is_empty() => {
                    return Err(FeatureError::InvalidSpec(format!("`{}` has no one-hot categories", f.name)))
                }
                (Some(_), e) if e != Extractor::Region => {
                    return Err(FeatureError::InvalidSpec(format!("`{}`: only region is categorical", f.name)))
                }
                (None, Extractor::Region) => {
                    return Err(FeatureError::InvalidSpec(format!("`{}`: region needs one-hot categories", f.name)))
                }
                _ => {}
            }
            if f.extractor.needs_window() && f.window_days.is_none_or(|w| w <= 0) {
                return Err(FeatureError::InvalidSpec(format!("`{}` needs a positive window_days", f.name)));
            }
        }
        Ok(())
    }

    /// Context dimension including the leading intercept.
    pub fn dimension(&self) -> usize {
        1 + self.features.iter().map(FeatureDescriptor::width).sum::<usize>()
    }

    /// Column names aligned with [`ContextVector::values`].
    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        for f in &self.features {
            match &f.one_hot_categories {
                Some(cats) => {
                    names.extend(cats.iter().map(|c| format!("{}={}", f.name, c)));
                    if f.allow_other {
                        names.push(format!("{}=other", f.name));
                    }
                }
                None => names.push(f.name.clone()),
            }
        }
        names
    }

    /// Context used in the first recorded experiment: region, nudge recency,
    /// 90-day purchase activity.
    pub fn xp1(regions: &[&str]) -> Self {
        Self {
            features: vec![
                FeatureDescriptor::one_hot("region", regions, true),
                FeatureDescriptor::numeric("days_since_last_nudge", Extractor::DaysSinceLastNudge, Some(28), Normalization::None),
                FeatureDescriptor::numeric("order_days_90d", Extractor::OrderDays, Some(90), Normalization::Zscore),
                FeatureDescriptor::numeric("expenditure_90d", Extractor::Expenditure, Some(90), Normalization::Zscore),
            ],
        }
    }

    /// Context used in the second recorded experiment.
    pub fn xp2() -> Self {
        Self {
            features: vec![
                FeatureDescriptor::numeric("mean_days_between_logins_60d", Extractor::MeanDaysBetweenLogins, Some(60), Normalization::Zscore),
                FeatureDescriptor::numeric("days_since_first_login", Extractor::DaysSinceFirstLogin, None, Normalization::Zscore),
                FeatureDescriptor::numeric("expenditure_30d", Extractor::Expenditure, Some(30), Normalization::Zscore),
                FeatureDescriptor::numeric("order_days_30d", Extractor::OrderDays, Some(30), Normalization::Zscore),
                FeatureDescriptor::numeric("days_since_last_nudge", Extractor::DaysSinceLastNudge, Some(28), Normalization::None),
                FeatureDescriptor::numeric("nudges_opened_14d", Extractor::NudgesOpened, Some(14), Normalization::Zscore),
                FeatureDescriptor::numeric("app_hours_30d", Extractor::AppHours, Some(30), Normalization::Zscore),
            ],
        }
    }
}

/// Standardized context at one decision point, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub as_of: Timestamp,
    pub user_id: String,
    pub values: Vec<f64>,
}

fn extract_numeric(
    index: &EventIndex<'_>,
    user: &str,
    feature: &FeatureDescriptor,
    as_of: Timestamp,
    utc_offset_hours: i32,
) -> f64 {
    let window = feature.window_days.unwrap_or(0);
    let from = as_of - days(window);
    let pharmacy = index.pharmacy_of(user, as_of);
    let pharmacy_orders = || -> Vec<&EventRecord> {
        pharmacy
            .map(|p| index.pharmacy_events(p, Some(from), as_of))
            .unwrap_or_default()
            .into_iter()
            .filter(|e| e.kind == EventKind::Order)
            .collect()
    };
    let user_events_of = |kind: EventKind, from: Option<Timestamp>| -> Vec<&EventRecord> {
        index
            .user_events(user, from, as_of)
            .into_iter()
            .filter(|e| e.kind == kind)
            .collect()
    };
    match feature.extractor {
        Extractor::Region => unreachable!("categorical features are one-hot encoded"),
        Extractor::DaysSinceLastNudge => match user_events_of(EventKind::NudgeSent, None).last() {
            Some(e) => (days_between(&e.timestamp, &as_of) / window as f64).min(1.0),
            None => 1.0,
        },
        Extractor::OrderDays => pharmacy_orders()
            .iter()
            .map(|e| local_date(&e.timestamp, utc_offset_hours))
            .collect::<BTreeSet<_>>()
            .len() as f64,
        Extractor::Expenditure => pharmacy_orders().iter().map(|e| e.expenditure()).sum(),
        Extractor::MeanDaysBetweenLogins => {
            let login_days: Vec<_> = user_events_of(EventKind::Login, Some(from))
                .iter()
                .map(|e| local_date(&e.timestamp, utc_offset_hours))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if login_days.len() < 2 {
                window as f64
            } else {
                let span = (login_days[login_days.len() - 1] - login_days[0]).num_days() as f64;
                span / (login_days.len() - 1) as f64
            }
        }
        Extractor::DaysSinceFirstLogin => user_events_of(EventKind::Login, None)
            .first()
            .map_or(0.0, |e| days_between(&e.timestamp, &as_of)),
        Extractor::NudgesOpened => user_events_of(EventKind::NudgeOpened, Some(from)).len() as f64,
        Extractor::AppHours => {
            user_events_of(EventKind::Login, Some(from))
                .iter()
                .filter_map(|e| e.as_login().and_then(|l| l.session_secs))
                .map(f64::from)
                .sum::<f64>()
                / 3600.0
        }
        Extractor::LoginDays => user_events_of(EventKind::Login, Some(from))
            .iter()
            .map(|e| local_date(&e.timestamp, utc_offset_hours))
            .collect::<BTreeSet<_>>()
            .len() as f64,
    }
}

/// Raw (unnormalized) feature columns for a user, excluding the intercept.
pub fn raw_features(
    index: &EventIndex<'_>,
    user: &str,
    spec: &ContextSpec,
    as_of: Timestamp,
    utc_offset_hours: i32,
) -> Result<Vec<f64>, FeatureError> {
    let mut out = Vec::with_capacity(spec.dimension() - 1);
    for feature in &spec.features {
        match &feature.one_hot_categories {
            Some(categories) => {
                let value = index.region_of(user, as_of).unwrap_or("");
                let mut slots = vec![0.0; feature.width()];
                match categories.iter().position(|c| c == value) {
                    Some(i) => slots[i] = 1.0,
                    None if feature.allow_other => slots[categories.len()] = 1.0,
                    None => {
                        return Err(FeatureError::UnknownCategory {
                            user: user.to_string(),
                            feature: feature.name.clone(),
                            value: value.to_string(),
                        })
                    }
                }
                out.extend(slots);
            }
            None => out.push(extract_numeric(index, user, feature, as_of, utc_offset_hours)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnScale {
    Identity,
    /// Raw values are clamped to `clip` (when set) before standardizing;
    /// `mean` and `std` are the statistics of the clamped cohort values.
    Zscore {
        mean: f64,
        std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clip: Option<[f64; 2]>,
    },
    MinmaxCap { min: f64, max: f64 },
}

/// Per-column normalization frozen on the cohort at experiment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<ColumnScale>,
}

fn fit_zscore(values: &[f64]) -> ColumnScale {
    let n = values.len() as f64;
    if values.is_empty() {
        return ColumnScale::Zscore { mean: 0.0, std: 0.0, clip: None };
    }
    // Fixed point of "clip at mean +- 5 std of the clipped data": the
    // cohort then standardizes to mean 0 with every value inside the clip.
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut iterations = 0;
    loop {
        let clipped: Vec<f64> = values.iter().map(|v| v.clamp(lo, hi)).collect();
        let mean = clipped.iter().sum::<f64>() / n;
        let std = (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max_dev = clipped.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        iterations += 1;
        if max_dev <= Z_CLIP * std * (1.0 + 1e-9) || iterations >= 500 {
            let clip = lo.is_finite().then_some([lo, hi]);
            return ColumnScale::Zscore { mean, std, clip };
        }
        lo = mean - Z_CLIP * std;
        hi = mean + Z_CLIP * std;
    }
}

impl Standardizer {
    pub fn fit(spec: &ContextSpec, raw_rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let width = spec.dimension() - 1;
        if let Some(row) = raw_rows.iter().find(|r| r.len() != width) {
            return Err(FeatureError::WidthMismatch { expected: width, actual: row.len() });
        }
        let mut columns = Vec::with_capacity(width);
        let mut col = 0;
        for feature in &spec.features {
            for _ in 0..feature.width() {
                let values: Vec<f64> = raw_rows.iter().map(|r| r[col]).collect();
                columns.push(match (feature.one_hot_categories.is_some(), feature.normalization) {
                    (true, _) | (false, Normalization::None) => ColumnScale::Identity,
                    (false, Normalization::Zscore) => fit_zscore(&values),
                    (false, Normalization::MinmaxCap) => ColumnScale::MinmaxCap {
                        min: values.iter().copied().fold(f64::INFINITY, f64::min),
                        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    },
                });
                col += 1;
            }
        }
        Ok(Self { columns })
    }

    /// Normalizes raw columns and prepends the intercept.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if raw.len() != self.columns.len() {
            return Err(FeatureError::WidthMismatch { expected: self.columns.len(), actual: raw.len() });
        }
        let mut out = Vec::with_capacity(raw.len() + 1);
        out.push(1.0);
        for (v, scale) in raw.iter().zip(&self.columns) {
            out.push(match *scale {
                ColumnScale::Identity => *v,
                ColumnScale::Zscore { mean, std, clip } => {
                    let v = clip.map_or(*v, |[lo, hi]| v.clamp(lo, hi));
                    if std > 1e-12 {
                        ((v - mean) / std).clamp(-Z_CLIP, Z_CLIP)
                    } else {
                        0.0
                    }
                }
                ColumnScale::MinmaxCap { min, max } => {
                    if max - min > 1e-12 {
                        ((v - min) / (max - min)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                }
            });
        }
        Ok(out)
    }
}

/// Builds the standardized context vector for one user.
pub fn build_context(
    index: &EventIndex<'_>,
    user: &str,
    spec: &ContextSpec,
    standardizer: &Standardizer,
    as_of: Timestamp,
    utc_offset_hours: i32,
) -> Result<ContextVector, FeatureError> {
    let raw = raw_features(index, user, spec, as_of, utc_offset_hours)?;
    Ok(ContextVector {
        as_of,
        user_id: user.to_string(),
        values: standardizer.apply(&raw)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{LoginPayload, NudgePayload, OrderLine};
    use chrono::{TimeZone, Utc};

    fn t0() -> Timestamp {
        // Monday 2024-03-04 06:00 Jakarta.
        Utc.with_ymd_and_hms(2024, 3, 3, 23, 0, 0).unwrap()
    }

    fn login(at: Timestamp, user: &str, pharmacy: &str) -> EventRecord {
        EventRecord::login(
            at,
            user,
            pharmacy,
            LoginPayload { region: Some("Jakarta".into()), language: Some("id".into()), session_secs: Some(600) },
        )
    }

    fn order(at: Timestamp, user: &str, pharmacy: &str, amount: f64) -> EventRecord {
        EventRecord::order(at, user, pharmacy, vec![OrderLine { sku: "A".into(), quantity: 1, unit_price: amount }])
    }

    /// Nine weekly Monday logins, one order ten days before `t0`.
    fn regular_user(user: &str, pharmacy: &str, spend: f64) -> Vec<EventRecord> {
        let mut events: Vec<_> = (1..=9).map(|w| login(t0() - days(7 * w) + chrono::Duration::hours(2), user, pharmacy)).collect();
        events.push(order(t0() - days(10), user, pharmacy, spend));
        events
    }

    fn sorted(mut v: Vec<EventRecord>) -> Vec<EventRecord> {
        crate::events::sort_events(&mut v);
        v
    }

    /// Independent filter: evaluates every rule by scanning the raw list.
    fn brute_force_eligible(events: &[EventRecord], c: &EligibilityCriteria, as_of: Timestamp) -> BTreeSet<String> {
        let past: Vec<&EventRecord> = events.iter().filter(|e| e.timestamp < as_of).collect();
        let mut spend: BTreeMap<String, f64> = BTreeMap::new();
        for e in &past {
            let entry = spend.entry(e.pharmacy_id.clone()).or_insert(0.0);
            if e.timestamp >= as_of - days(c.spend_lookback_days) {
                *entry += e.expenditure();
            }
        }
        let mut sorted_spend: Vec<f64> = spend.values().copied().collect();
        sorted_spend.sort_by(f64::total_cmp);
        let pos = c.top_spender_exclusion_quantile * (sorted_spend.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let cap = sorted_spend[lo] + (sorted_spend[hi] - sorted_spend[lo]) * (pos - lo as f64);
        let users: BTreeSet<String> = past.iter().map(|e| e.user_id.clone()).collect();
        users
            .into_iter()
            .filter(|u| {
                let mine: Vec<&&EventRecord> = past.iter().filter(|e| &e.user_id == u).collect();
                let pharmacy = &mine.last().unwrap().pharmacy_id;
                let members: BTreeSet<&String> = past.iter().filter(|e| &e.pharmacy_id == pharmacy).map(|e| &e.user_id).collect();
                let login_days: BTreeSet<_> = mine
                    .iter()
                    .filter(|e| e.kind == EventKind::Login && e.timestamp >= as_of - days(c.activity_window_days))
                    .map(|e| local_date(&e.timestamp, 7))
                    .collect();
                let recent = mine
                    .iter()
                    .any(|e| e.kind == EventKind::Login && e.timestamp >= as_of - days(c.require_login_within_days));
                members.len() <= c.max_users_per_pharmacy && spend[pharmacy] <= cap && login_days.len() >= c.min_login_days && recent
            })
            .collect()
    }

    #[test]
    fn regular_low_spender_is_eligible() {
        let mut events = regular_user("u1", "p1", 20.0);
        for (i, s) in [50.0, 60.0, 70.0, 80.0].iter().enumerate() {
            events.extend(regular_user(&format!("o{i}"), &format!("q{i}"), *s));
        }
        let events = sorted(events);
        let index = EventIndex::new(&events);
        let criteria = EligibilityCriteria::default();
        let cohort = eligible_cohort(&index, &criteria, t0(), 7).unwrap();
        assert!(cohort.contains("u1"));
        assert_eq!(cohort, brute_force_eligible(&events, &criteria, t0()));
    }

    #[test]
    fn single_top_spender_pharmacy_is_excluded() {
        let mut events = regular_user("u1", "p1", 1000.0);
        for (i, s) in [50.0, 60.0, 70.0, 80.0].iter().enumerate() {
            events.extend(regular_user(&format!("o{i}"), &format!("q{i}"), *s));
        }
        let events = sorted(events);
        let index = EventIndex::new(&events);
        let criteria = EligibilityCriteria::default();
        let cohort = eligible_cohort(&index, &criteria, t0(), 7).unwrap();
        assert!(!cohort.contains("u1"));
        assert_eq!(cohort.len(), 4);
        assert_eq!(cohort, brute_force_eligible(&events, &criteria, t0()));
    }

    #[test]
    fn pharmacy_with_three_users_is_excluded() {
        let mut events = Vec::new();
        for u in ["a", "b", "c"] {
            events.extend(regular_user(u, "p1", 10.0));
        }
        events.extend(regular_user("d", "p2", 10.0));
        let events = sorted(events);
        let index = EventIndex::new(&events);
        let cohort = eligible_cohort(&index, &EligibilityCriteria::default(), t0(), 7).unwrap();
        assert_eq!(cohort.into_iter().collect::<Vec<_>>(), vec!["d".to_string()]);
    }

    #[test]
    fn inactive_or_lapsed_users_are_excluded() {
        let mut events = regular_user("steady", "p1", 10.0);
        // Seven login days only.
        events.extend((1..=7).map(|w| login(t0() - days(7 * w) + chrono::Duration::hours(2), "sparse", "p2")));
        // Ten login days, but none within the last 40 days.
        events.extend((6..=15).map(|d| login(t0() - days(41 + d), "lapsed", "p3")));
        // Equal spend everywhere so the spender rule excludes nobody.
        events.push(order(t0() - days(10), "sparse", "p2", 10.0));
        events.push(order(t0() - days(10), "lapsed", "p3", 10.0));
        let events = sorted(events);
        let index = EventIndex::new(&events);
        let criteria = EligibilityCriteria::default();
        let cohort = eligible_cohort(&index, &criteria, t0(), 7).unwrap();
        assert_eq!(cohort, BTreeSet::from(["steady".to_string()]));
        assert_eq!(cohort, brute_force_eligible(&events, &criteria, t0()));
    }

    #[test]
    fn empty_candidate_population_gives_empty_cohort() {
        let events = vec![order(t0() - days(3), "u1", "p1", 5.0)];
        let index = EventIndex::new(&events);
        let cohort = eligible_cohort(&index, &EligibilityCriteria::default(), t0(), 7).unwrap();
        assert!(cohort.is_empty());
    }

    #[test]
    fn no_events_before_as_of_is_empty_log() {
        let events = vec![order(t0() + days(3), "u1", "p1", 5.0)];
        let index = EventIndex::new(&events);
        assert_eq!(eligible_cohort(&index, &EligibilityCriteria::default(), t0(), 7), Err(FeatureError::EmptyLog));
    }

    #[test]
    fn language_filter_requires_matching_login_attribute() {
        let mut events = regular_user("u1", "p1", 10.0);
        let mut english = regular_user("u2", "p2", 10.0);
        for e in &mut english {
            if let crate::events::Payload::Login(l) = &mut e.payload {
                l.language = Some("en".into());
            }
        }
        events.extend(english);
        let events = sorted(events);
        let index = EventIndex::new(&events);
        let cohort = eligible_cohort(&index, &EligibilityCriteria::default(), t0(), 7).unwrap();
        assert_eq!(cohort, BTreeSet::from(["u1".to_string()]));
        let open = EligibilityCriteria { language: None, ..Default::default() };
        assert_eq!(eligible_cohort(&index, &open, t0(), 7).unwrap().len(), 2);
    }

    #[test]
    fn brand_new_user_gets_defaults() {
        let events = vec![order(t0() - days(1), "other", "p9", 5.0)];
        let index = EventIndex::new(&events);
        let spec = ContextSpec::xp2();
        let raw = raw_features(&index, "newbie", &spec, t0(), 7).unwrap();
        // mean gap defaults to the window, nudge recency to 1, counts to 0.
        assert_eq!(raw, vec![60.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let identity = Standardizer { columns: vec![ColumnScale::Identity; raw.len()] };
        let ctx = build_context(&index, "newbie", &spec, &identity, t0(), 7).unwrap();
        assert_eq!(ctx.values[0], 1.0);
        assert_eq!(ctx.values.len(), spec.dimension());
    }

    #[test]
    fn nudge_fourteen_days_ago_is_half() {
        let nudge = EventRecord::nudge(
            t0() - days(14),
            EventKind::NudgeSent,
            "u1",
            "p1",
            NudgePayload { decision_id: "d".into(), anchor_sku: "A".into(), target_sku: "B".into() },
        );
        let events = vec![nudge];
        let index = EventIndex::new(&events);
        let spec = ContextSpec {
            features: vec![FeatureDescriptor::numeric("recency", Extractor::DaysSinceLastNudge, Some(28), Normalization::None)],
        };
        assert_eq!(raw_features(&index, "u1", &spec, t0(), 7).unwrap(), vec![0.5]);
    }

    #[test]
    fn thirty_day_order_window_matches_scan() {
        let events = sorted(vec![
            order(t0() - days(40), "u1", "p1", 999.0),
            order(t0() - days(20), "u1", "p1", 30.0),
            order(t0() - days(12), "u1", "p1", 50.0),
            order(t0() - days(2), "u1", "p1", 40.0),
            order(t0() + days(1), "u1", "p1", 500.0),
        ]);
        let index = EventIndex::new(&events);
        let spec = ContextSpec {
            features: vec![
                FeatureDescriptor::numeric("days", Extractor::OrderDays, Some(30), Normalization::None),
                FeatureDescriptor::numeric("spend", Extractor::Expenditure, Some(30), Normalization::None),
            ],
        };
        let raw = raw_features(&index, "u1", &spec, t0(), 7).unwrap();
        let window: Vec<&EventRecord> = events
            .iter()
            .filter(|e| e.timestamp >= t0() - days(30) && e.timestamp < t0())
            .collect();
        assert_eq!(raw, vec![window.len() as f64, window.iter().map(|e| e.expenditure()).sum::<f64>()]);
        assert_eq!(raw, vec![3.0, 120.0]);
    }

    #[test]
    fn unknown_region_errors_or_routes_to_other() {
        let events = vec![login(t0() - days(1), "u1", "p1")];
        let index = EventIndex::new(&events);
        let strict = ContextSpec { features: vec![FeatureDescriptor::one_hot("region", &["Bali", "Medan"], false)] };
        assert!(matches!(raw_features(&index, "u1", &strict, t0(), 7), Err(FeatureError::UnknownCategory { .. })));
        let lenient = ContextSpec { features: vec![FeatureDescriptor::one_hot("region", &["Bali", "Medan"], true)] };
        assert_eq!(raw_features(&index, "u1", &lenient, t0(), 7).unwrap(), vec![0.0, 0.0, 1.0]);
        let known = ContextSpec { features: vec![FeatureDescriptor::one_hot("region", &["Bali", "Jakarta"], false)] };
        assert_eq!(raw_features(&index, "u1", &known, t0(), 7).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn spec_validation_catches_duplicates_and_empty_categories() {
        let dup = ContextSpec {
            features: vec![
                FeatureDescriptor::numeric("x", Extractor::OrderDays, Some(30), Normalization::None),
                FeatureDescriptor::numeric("x", Extractor::Expenditure, Some(30), Normalization::None),
            ],
        };
        assert!(dup.validate().is_err());
        let empty = ContextSpec { features: vec![FeatureDescriptor::one_hot("region", &[], false)] };
        assert!(empty.validate().is_err());
        assert!(ContextSpec::xp2().validate().is_ok());
        assert!(ContextSpec::xp1(&["Jakarta"]).validate().is_ok());
        assert_eq!(ContextSpec::xp1(&["Jakarta", "Bali"]).dimension(), 1 + 3 + 3);
    }

    #[test]
    fn zscore_fit_centers_and_clips_heavy_tails() {
        let spec = ContextSpec {
            features: vec![FeatureDescriptor::numeric("spend", Extractor::Expenditure, Some(30), Normalization::Zscore)],
        };
        let mut rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 17) as f64]).collect();
        rows.push(vec![1e6]);
        let scaler = Standardizer::fit(&spec, &rows).unwrap();
        let z: Vec<f64> = rows.iter().map(|r| scaler.apply(r).unwrap()[1]).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!(z.iter().all(|v| v.abs() <= Z_CLIP));
    }

    #[test]
    fn minmax_cap_maps_into_unit_interval() {
        let spec = ContextSpec {
            features: vec![FeatureDescriptor::numeric("n", Extractor::LoginDays, Some(30), Normalization::MinmaxCap)],
        };
        let rows = vec![vec![2.0], vec![4.0], vec![6.0]];
        let scaler = Standardizer::fit(&spec, &rows).unwrap();
        assert_eq!(scaler.apply(&[4.0]).unwrap(), vec![1.0, 0.5]);
        assert_eq!(scaler.apply(&[100.0]).unwrap(), vec![1.0, 1.0]);
    }
}
