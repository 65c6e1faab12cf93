//! Experiment lifecycle: cohort and pure-control split at the start, then
//! one decision point per week followed by reward collection, posterior
//! updates and a nudge expiry sweep.
//!
//! The cohort, its pure-control split, the feature standardizer and the
//! reward cap are all frozen when the experiment starts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{Arm, BanditError, BanditState, Prior};
use crate::calendar::{days, WeeklySlot};
use crate::events::{EventKind, EventRecord, NudgePayload, Timestamp};
use crate::features::{build_context, eligible_cohort, raw_features, ContextSpec, EligibilityCriteria, FeatureError, Standardizer};
use crate::index::EventIndex;
use crate::recommender::{build_candidates, recommend_pair, Recommendation, RecommendError, UserItemProfile};
use crate::simulator::{PendingNudge, SimConfig, SimError, Simulator};
use crate::util::{keyed_hash, quantile, stream_rng};

/// Pre-start weeks whose reward-length windows define the winsorization cap.
const CAP_CALIBRATION_WEEKS: i64 = 8;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid experiment config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("week {week}{}: {source}", user_suffix(.user))]
    Feature { week: u32, user: Option<String>, source: FeatureError },
    #[error("week {week}{}: {source}", user_suffix(.user))]
    Bandit { week: u32, user: Option<String>, source: BanditError },
    #[error("week {week}: reward window closes at {window_end} but the log ends at {log_end}")]
    WindowNotElapsed { week: u32, window_end: Timestamp, log_end: Timestamp },
    #[error("the eligible cohort is empty")]
    EmptyCohort,
    #[error(transparent)]
    Simulator(#[from] SimError),
}

fn user_suffix(user: &Option<String>) -> String {
    user.as_ref().map(|u| format!(", user {u}")).unwrap_or_default()
}

impl OrchestratorError {
    /// Week at which the failure happened, if it is tied to one.
    pub fn week(&self) -> Option<u32> {
        match self {
            Self::Feature { week, .. } | Self::Bandit { week, .. } | Self::WindowNotElapsed { week, .. } => Some(*week),
            _ => None,
        }
    }
}

fn default_reward_window() -> i64 {
    6
}
fn default_expiry() -> i64 {
    7
}
fn default_top_k() -> usize {
    crate::recommender::DEFAULT_TOP_K
}
fn default_lookback() -> i64 {
    crate::recommender::DEFAULT_LOOKBACK_DAYS
}
fn default_reward_scale() -> f64 {
    1000.0
}
fn default_winsor() -> Option<f64> {
    Some(0.99)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub start_date: NaiveDate,
    pub duration_weeks: u32,
    #[serde(default)]
    pub schedule: WeeklySlot,
    pub pure_control_fraction: f64,
    #[serde(default)]
    pub eligibility: EligibilityCriteria,
    pub context: ContextSpec,
    #[serde(default = "default_reward_window")]
    pub reward_window_days: i64,
    #[serde(default = "default_expiry")]
    pub nudge_expiry_days: i64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_lookback")]
    pub candidate_lookback_days: i64,
    #[serde(default)]
    pub prior: Prior,
    /// Rewards are divided by this before entering the bandit.
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
    /// Rewards are capped at this quantile of pre-experiment cohort spend.
    #[serde(default = "default_winsor")]
    pub reward_winsor_quantile: Option<f64>,
    pub seed: u64,
    /// In-stock skus. `None` treats every sku seen in the log as in stock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stock: Option<Vec<String>>,
    /// Plain-text stock list, one sku per line; resolved relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stock_file: Option<String>,
    /// Users never enrolled, e.g. participants of an earlier experiment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_users: Vec<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |field: &'static str, reason: &str| Err(OrchestratorError::InvalidConfig { field, reason: reason.to_string() });
        if !(0.0..=1.0).contains(&self.pure_control_fraction) {
            return bad("pure_control_fraction", "must lie in [0, 1]");
        }
        if self.duration_weeks < 1 {
            return bad("duration_weeks", "must be at least 1");
        }
        if !(1..7).contains(&self.reward_window_days) {
            return bad("reward_window_days", "must be between 1 and 6 so rewards resolve before the next decision point");
        }
        if self.nudge_expiry_days < 1 {
            return bad("nudge_expiry_days", "must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k", "must be positive");
        }
        if self.candidate_lookback_days < 1 {
            return bad("candidate_lookback_days", "must be positive");
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return bad("reward_scale", "must be positive");
        }
        if let Some(q) = self.reward_winsor_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return bad("reward_winsor_quantile", "must lie in (0, 1]");
            }
        }
        let p = self.prior;
        if !(p.precision_scale > 0.0 && p.shape > 1.0 && p.rate > 0.0) {
            return bad("prior", "needs precision_scale > 0, shape > 1, rate > 0");
        }
        if !(-23..=23).contains(&self.schedule.utc_offset_hours) || self.schedule.hour > 23 {
            return bad("schedule", "hour must be 0-23 and the offset within +-23h");
        }
        self.eligibility
            .validate()
            .map_err(|e| OrchestratorError::InvalidConfig { field: "eligibility", reason: e.to_string() })?;
        self.context
            .validate()
            .map_err(|e| OrchestratorError::InvalidConfig { field: "context", reason: e.to_string() })?;
        Ok(())
    }

    pub fn first_decision(&self) -> Timestamp {
        self.schedule.first_on_or_after(self.start_date)
    }

    /// Decision instant of 1-based `week`.
    pub fn decision_time(&self, week: u32) -> Timestamp {
        self.first_decision() + days(7 * (i64::from(week) - 1))
    }

    pub fn decision_id(&self, week: u32, user: &str) -> String {
        format!("{}-w{week}-{user}", self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PureControl,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reaction {
    Opened,
    Closed,
    Ignored,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoEligiblePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision_id: String,
    pub week: u32,
    pub decided_at: Timestamp,
    pub user_id: String,
    pub pharmacy_id: String,
    pub group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treat_probability: Option<f64>,
    pub context: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation: Option<Recommendation>,
    /// Treat-assigned but not sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<SkipReason>,
    /// Pharmacy expenditure over the reward window; `None` until collected.
    pub reward: Option<f64>,
    pub reaction: Reaction,
}

impl DecisionRecord {
    pub fn nudge_sent(&self) -> bool {
        self.recommendation.is_some()
    }

    /// Whether this record's reward feeds the bandit.
    pub fn enters_bandit(&self) -> bool {
        self.group == Group::Adaptive && self.arm.is_some() && self.skipped.is_none()
    }
}

/// Keyed-hash split: `user` is pure control iff
/// `hash(seed ‖ user) mod 10⁶ < fraction · 10⁶`.
pub fn split_pure_control<'a, I>(cohort: I, fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>)
where
    I: IntoIterator<Item = &'a String>,
{
    let threshold = (fraction.clamp(0.0, 1.0) * 1e6).round() as u64;
    let mut pure = BTreeSet::new();
    let mut adaptive = BTreeSet::new();
    for user in cohort {
        if keyed_hash(&[&seed.to_be_bytes(), user.as_bytes()]) % 1_000_000 < threshold {
            pure.insert(user.clone());
        } else {
            adaptive.insert(user.clone());
        }
    }
    (pure, adaptive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMember {
    pub user_id: String,
    pub pharmacy_id: String,
    pub group: Group,
}

/// Everything fixed at experiment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub first_decision: Timestamp,
    pub cohort: Vec<CohortMember>,
    pub standardizer: Standardizer,
    pub reward_cap: Option<f64>,
}

impl ExperimentSetup {
    pub fn adaptive_count(&self) -> usize {
        self.cohort.iter().filter(|m| m.group == Group::Adaptive).count()
    }
}

pub fn prepare_experiment(config: &ExperimentConfig, events: &[EventRecord]) -> Result<ExperimentSetup, OrchestratorError> {
    config.validate()?;
    let t0 = config.first_decision();
    let index = EventIndex::new(events);
    let offset = config.schedule.utc_offset_hours;
    let feature_err = |user: Option<String>| move |source| OrchestratorError::Feature { week: 1, user, source };

    let excluded: BTreeSet<&String> = config.excluded_users.iter().collect();
    let eligible: BTreeSet<String> = eligible_cohort(&index, &config.eligibility, t0, offset)
        .map_err(feature_err(None))?
        .into_iter()
        .filter(|u| !excluded.contains(u))
        .collect();
    if eligible.is_empty() {
        return Err(OrchestratorError::EmptyCohort);
    }
    let (pure, _) = split_pure_control(&eligible, config.pure_control_fraction, config.seed);

    let mut cohort = Vec::with_capacity(eligible.len());
    let mut raw_rows = Vec::with_capacity(eligible.len());
    for user in &eligible {
        let pharmacy = index.pharmacy_of(user, t0).expect("eligible users have history").to_string();
        raw_rows.push(raw_features(&index, user, &config.context, t0, offset).map_err(feature_err(Some(user.clone())))?);
        let group = if pure.contains(user) { Group::PureControl } else { Group::Adaptive };
        cohort.push(CohortMember { user_id: user.clone(), pharmacy_id: pharmacy, group });
    }
    let standardizer = Standardizer::fit(&config.context, &raw_rows).map_err(feature_err(None))?;

    let reward_cap = config.reward_winsor_quantile.and_then(|q| {
        let pharmacies: BTreeSet<&str> = cohort.iter().map(|m| m.pharmacy_id.as_str()).collect();
        let mut windows = Vec::new();
        for k in 1..=CAP_CALIBRATION_WEEKS {
            let start = t0 - days(7 * k);
            let end = start + days(config.reward_window_days);
            for p in &pharmacies {
                windows.push(index.pharmacy_events_after(p, start, end).iter().map(|e| e.expenditure()).sum::<f64>());
            }
        }
        quantile(&windows, q).filter(|cap| *cap > 0.0)
    });

    Ok(ExperimentSetup { first_decision: t0, cohort, standardizer, reward_cap })
}

/// Stock for a decision point: the configured list, or every sku ordered before `as_of`.
pub fn resolve_stock(config: &ExperimentConfig, index: &EventIndex<'_>, as_of: Timestamp) -> BTreeSet<String> {
    match &config.stock {
        Some(list) => list.iter().cloned().collect(),
        None => index
            .before(as_of)
            .iter()
            .filter_map(EventRecord::as_order)
            .flat_map(|o| o.lines.iter().map(|l| l.sku.clone()))
            .collect(),
    }
}

/// Assigns every cohort user for one week against a frozen posterior.
pub fn run_decision_point(
    setup: &ExperimentSetup,
    state: &BanditState,
    index: &EventIndex<'_>,
    config: &ExperimentConfig,
    week: u32,
) -> Result<(Vec<DecisionRecord>, Vec<EventRecord>), OrchestratorError> {
    let t = config.decision_time(week);
    let offset = config.schedule.utc_offset_hours;
    let snapshot = state.snapshot().map_err(|source| OrchestratorError::Bandit { week, user: None, source })?;
    let mut candidates = None;

    let mut records = Vec::with_capacity(setup.cohort.len());
    let mut nudges = Vec::new();
    for member in &setup.cohort {
        let user = member.user_id.as_str();
        let context = build_context(index, user, &config.context, &setup.standardizer, t, offset)
            .map_err(|source| OrchestratorError::Feature { week, user: Some(user.to_string()), source })?
            .values;
        let mut record = DecisionRecord {
            decision_id: config.decision_id(week, user),
            week,
            decided_at: t,
            user_id: user.to_string(),
            pharmacy_id: member.pharmacy_id.clone(),
            group: member.group,
            arm: None,
            treat_probability: None,
            context,
            recommendation: None,
            skipped: None,
            reward: None,
            reaction: Reaction::NotApplicable,
        };
        if member.group == Group::Adaptive {
            let bandit_err = |source| OrchestratorError::Bandit { week, user: Some(user.to_string()), source };
            let mut rng = stream_rng(config.seed, "assign", user, u64::from(week));
            let assignment = snapshot.assign(&record.context, &mut rng).map_err(bandit_err)?;
            record.arm = Some(assignment.arm);
            record.treat_probability = Some(snapshot.analytic_probability(&record.context).map_err(bandit_err)?);
            if assignment.arm == Arm::Treat {
                let candidates = candidates.get_or_insert_with(|| {
                    let stock = resolve_stock(config, index, t);
                    build_candidates(index.events(), &stock, t, config.top_k, config.candidate_lookback_days)
                });
                let profile = UserItemProfile::from_index(index, user, t, config.candidate_lookback_days);
                match recommend_pair(&profile, candidates) {
                    Ok(rec) => {
                        nudges.push(EventRecord::nudge(
                            t,
                            EventKind::NudgeSent,
                            user,
                            &member.pharmacy_id,
                            NudgePayload {
                                decision_id: record.decision_id.clone(),
                                anchor_sku: rec.anchor_sku.clone(),
                                target_sku: rec.target_sku.clone(),
                            },
                        ));
                        record.recommendation = Some(rec);
                        record.reaction = Reaction::Ignored;
                    }
                    Err(RecommendError::NoEligiblePair) => record.skipped = Some(SkipReason::NoEligiblePair),
                }
            }
        }
        records.push(record);
    }
    Ok((records, nudges))
}

/// Fills reward and reaction of every uncollected record.
///
/// Reward is the pharmacy's order expenditure in `(t, t + window]`. The
/// reaction is the first open/close of the record's nudge within
/// `(t, t + expiry]`, else ignored.
pub fn collect_rewards(
    index: &EventIndex<'_>,
    decisions: &mut [DecisionRecord],
    reward_window_days: i64,
    expiry_days: i64,
    log_end: Timestamp,
) -> Result<(), OrchestratorError> {
    for record in decisions.iter_mut().filter(|r| r.reward.is_none()) {
        let t = record.decided_at;
        let window_end = t + days(reward_window_days);
        if log_end < window_end {
            return Err(OrchestratorError::WindowNotElapsed { week: record.week, window_end, log_end });
        }
        record.reward = Some(
            index
                .pharmacy_events_after(&record.pharmacy_id, t, window_end)
                .iter()
                .map(|e| e.expenditure())
                .sum(),
        );
        if record.nudge_sent() {
            record.reaction = index
                .user_events_after(&record.user_id, t, t + days(expiry_days))
                .iter()
                .filter(|e| matches!(e.kind, EventKind::NudgeOpened | EventKind::NudgeClosed))
                .find(|e| e.as_nudge().is_some_and(|n| n.decision_id == record.decision_id))
                .map_or(Reaction::Ignored, |e| {
                    if e.kind == EventKind::NudgeOpened {
                        Reaction::Opened
                    } else {
                        Reaction::Closed
                    }
                });
        }
    }
    Ok(())
}

/// Expiry events for nudges at least `expiry_days` old at `as_of` that were
/// never opened, closed or already expired. Each expiry is stamped at
/// `sent + expiry_days`.
pub fn expire_nudges(events: &[EventRecord], as_of: Timestamp, expiry_days: i64) -> Vec<EventRecord> {
    let mut resolved: BTreeSet<&str> = BTreeSet::new();
    let mut sent: Vec<&EventRecord> = Vec::new();
    for event in events {
        let Some(nudge) = event.as_nudge() else { continue };
        match event.kind {
            EventKind::NudgeSent => sent.push(event),
            _ => {
                resolved.insert(nudge.decision_id.as_str());
            }
        }
    }
    sent.into_iter()
        .filter(|e| e.timestamp + days(expiry_days) <= as_of)
        .filter(|e| e.as_nudge().is_some_and(|n| !resolved.contains(n.decision_id.as_str())))
        .map(|e| {
            EventRecord::nudge(
                e.timestamp + days(expiry_days),
                EventKind::NudgeExpired,
                &e.user_id,
                &e.pharmacy_id,
                e.as_nudge().expect("filtered to nudges").clone(),
            )
        })
        .collect()
}

/// Source of events after each decision point.
#[derive(Debug, Clone)]
pub enum World {
    /// The log already holds every week; nothing reacts to nudges.
    Replay,
    /// Closed loop: the simulator generates each week, reacting to nudges.
    Sim(Box<Simulator>),
}

impl World {
    /// A simulated world aligned to the experiment's first decision, plus its history.
    pub fn simulated(sim: SimConfig, config: &ExperimentConfig) -> Result<(Self, Vec<EventRecord>), OrchestratorError> {
        let sim = Simulator::with_anchor(sim, config.first_decision())?;
        let history = sim.generate_history();
        Ok((World::Sim(Box::new(sim)), history))
    }
}

/// Experiment progress; serializable (without the log) as a weekly checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub setup: ExperimentSetup,
    pub completed_weeks: u32,
    pub state: BanditState,
    pub decisions: Vec<DecisionRecord>,
    #[serde(skip)]
    pub events: Vec<EventRecord>,
}

fn merge_sorted(events: &mut Vec<EventRecord>, new: Vec<EventRecord>) {
    if new.is_empty() {
        return;
    }
    events.extend(new);
    crate::events::sort_events(events);
}

impl ExperimentRun {
    pub fn start(config: &ExperimentConfig, mut events: Vec<EventRecord>) -> Result<Self, OrchestratorError> {
        crate::events::sort_events(&mut events);
        let setup = prepare_experiment(config, &events)?;
        let state = BanditState::new(config.context.dimension(), config.prior, config.seed);
        Ok(Self { setup, completed_weeks: 0, state, decisions: Vec::new(), events })
    }

    pub fn is_finished(&self, config: &ExperimentConfig) -> bool {
        self.completed_weeks >= config.duration_weeks
    }

    fn scaled_reward(&self, config: &ExperimentConfig, reward: f64) -> f64 {
        let capped = self.setup.reward_cap.map_or(reward, |cap| reward.min(cap));
        capped / config.reward_scale
    }

    /// Runs the next week: decide, advance, collect, update, expire.
    pub fn step(&mut self, config: &ExperimentConfig, world: &World) -> Result<(), OrchestratorError> {
        let week = self.completed_weeks + 1;
        let t = config.decision_time(week);

        let (mut records, nudges) = {
            let index = EventIndex::new(&self.events);
            run_decision_point(&self.setup, &self.state, &index, config, week)?
        };

        let log_end = match world {
            World::Replay => {
                merge_sorted(&mut self.events, nudges);
                self.events.last().map_or(t, |e| e.timestamp)
            }
            World::Sim(sim) => {
                let pending: Vec<PendingNudge> = nudges
                    .iter()
                    .map(|e| {
                        let n = e.as_nudge().expect("nudge events");
                        PendingNudge {
                            decision_id: n.decision_id.clone(),
                            user_id: e.user_id.clone(),
                            pharmacy_id: e.pharmacy_id.clone(),
                            anchor_sku: n.anchor_sku.clone(),
                            target_sku: n.target_sku.clone(),
                            sent_at: e.timestamp,
                        }
                    })
                    .collect();
                let sim_week = i64::from(week) - 1;
                let mut generated = sim.step_week(&pending, sim_week);
                generated.extend(nudges);
                merge_sorted(&mut self.events, generated);
                sim.week_start(sim_week + 1)
            }
        };

        {
            let index = EventIndex::new(&self.events);
            collect_rewards(&index, &mut records, config.reward_window_days, config.nudge_expiry_days, log_end)?;
        }

        for arm in Arm::ALL {
            let (contexts, rewards): (Vec<Vec<f64>>, Vec<f64>) = records
                .iter()
                .filter(|r| r.enters_bandit() && r.arm == Some(arm))
                .map(|r| (r.context.clone(), self.scaled_reward(config, r.reward.expect("collected"))))
                .unzip();
            let updated = self
                .state
                .arm(arm)
                .update(&contexts, &rewards)
                .map_err(|source| OrchestratorError::Bandit { week, user: None, source })?;
            *self.state.arm_mut(arm) = updated;
        }

        let expired = expire_nudges(&self.events, t + days(7), config.nudge_expiry_days);
        merge_sorted(&mut self.events, expired);

        self.decisions.extend(records);
        self.completed_weeks = week;
        Ok(())
    }

    pub fn weekly_decisions(&self, week: u32) -> impl Iterator<Item = &DecisionRecord> {
        self.decisions.iter().filter(move |r| r.week == week)
    }
}

pub fn run_experiment(config: &ExperimentConfig, world: &World, events: Vec<EventRecord>) -> Result<ExperimentRun, OrchestratorError> {
    let mut run = ExperimentRun::start(config, events)?;
    while !run.is_finished(config) {
        run.step(config, world)?;
    }
    Ok(run)
}

/// Weekly fraction of adaptive, assigned users that got the treat arm.
pub fn weekly_treat_fractions(decisions: &[DecisionRecord]) -> BTreeMap<u32, f64> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in decisions.iter().filter(|r| r.group == Group::Adaptive) {
        let entry = counts.entry(r.week).or_insert((0, 0));
        entry.1 += 1;
        if r.arm == Some(Arm::Treat) {
            entry.0 += 1;
        }
    }
    counts.into_iter().map(|(w, (t, n))| (w, t as f64 / n as f64)).collect()
}

pub fn decisions_to_jsonl(decisions: &[DecisionRecord]) -> String {
    let mut out = String::new();
    for r in decisions {
        out.push_str(&serde_json::to_string(r).expect("decision records serialize"));
        out.push('\n');
    }
    out
}

pub fn decisions_from_jsonl(text: &str) -> Result<Vec<DecisionRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}
