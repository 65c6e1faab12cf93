//! Per-user and per-pharmacy views over a time-sorted event slice.

use std::collections::{BTreeMap, BTreeSet};

use crate::events::{EventKind, EventRecord, Timestamp};

/// Borrowing index over a log that is already sorted by timestamp.
#[derive(Debug)]
pub struct EventIndex<'a> {
    events: &'a [EventRecord],
    by_user: BTreeMap<&'a str, Vec<usize>>,
    by_pharmacy: BTreeMap<&'a str, Vec<usize>>,
}

impl<'a> EventIndex<'a> {
    pub fn new(events: &'a [EventRecord]) -> Self {
        debug_assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut by_pharmacy: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            by_user.entry(e.user_id.as_str()).or_default().push(i);
            by_pharmacy.entry(e.pharmacy_id.as_str()).or_default().push(i);
        }
        Self { events, by_user, by_pharmacy }
    }

    pub fn events(&self) -> &'a [EventRecord] {
        self.events
    }

    /// Events strictly before `as_of`.
    pub fn before(&self, as_of: Timestamp) -> &'a [EventRecord] {
        let end = self.events.partition_point(|e| e.timestamp < as_of);
        &self.events[..end]
    }

    pub fn users(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.by_user.keys().copied()
    }

    pub fn pharmacies(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.by_pharmacy.keys().copied()
    }

    fn slice(&self, list: Option<&Vec<usize>>, from: Option<Timestamp>, to: Timestamp) -> Vec<&'a EventRecord> {
        let Some(list) = list else { return Vec::new() };
        let lo = match from {
            Some(f) => list.partition_point(|&i| self.events[i].timestamp < f),
            None => 0,
        };
        let hi = list.partition_point(|&i| self.events[i].timestamp < to);
        list[lo..hi.max(lo)].iter().map(|&i| &self.events[i]).collect()
    }

    /// A user's events in `[from, to)`; `from = None` means since the start of the log.
    pub fn user_events(&self, user: &str, from: Option<Timestamp>, to: Timestamp) -> Vec<&'a EventRecord> {
        self.slice(self.by_user.get(user), from, to)
    }

    pub fn pharmacy_events(&self, pharmacy: &str, from: Option<Timestamp>, to: Timestamp) -> Vec<&'a EventRecord> {
        self.slice(self.by_pharmacy.get(pharmacy), from, to)
    }

    /// Pharmacy events in the half-open interval `(after, until]`.
    pub fn pharmacy_events_after(&self, pharmacy: &str, after: Timestamp, until: Timestamp) -> Vec<&'a EventRecord> {
        let Some(list) = self.by_pharmacy.get(pharmacy) else { return Vec::new() };
        let lo = list.partition_point(|&i| self.events[i].timestamp <= after);
        let hi = list.partition_point(|&i| self.events[i].timestamp <= until);
        list[lo..hi.max(lo)].iter().map(|&i| &self.events[i]).collect()
    }

    pub fn user_events_after(&self, user: &str, after: Timestamp, until: Timestamp) -> Vec<&'a EventRecord> {
        let Some(list) = self.by_user.get(user) else { return Vec::new() };
        let lo = list.partition_point(|&i| self.events[i].timestamp <= after);
        let hi = list.partition_point(|&i| self.events[i].timestamp <= until);
        list[lo..hi.max(lo)].iter().map(|&i| &self.events[i]).collect()
    }

    /// Pharmacy the user was last seen with before `as_of`.
    pub fn pharmacy_of(&self, user: &str, as_of: Timestamp) -> Option<&'a str> {
        self.user_events(user, None, as_of).last().map(|e| e.pharmacy_id.as_str())
    }

    /// Distinct users seen at a pharmacy before `as_of`.
    pub fn pharmacy_users(&self, pharmacy: &str, as_of: Timestamp) -> BTreeSet<&'a str> {
        self.pharmacy_events(pharmacy, None, as_of)
            .into_iter()
            .map(|e| e.user_id.as_str())
            .collect()
    }

    /// Most recent non-empty value of a login attribute before `as_of`.
    pub fn login_attribute<F>(&self, user: &str, as_of: Timestamp, pick: F) -> Option<&'a str>
    where
        F: Fn(&'a crate::events::LoginPayload) -> Option<&'a String>,
    {
        self.user_events(user, None, as_of)
            .into_iter()
            .rev()
            .filter(|e| e.kind == EventKind::Login)
            .find_map(|e| e.as_login().and_then(&pick))
            .map(String::as_str)
    }

    pub fn region_of(&self, user: &str, as_of: Timestamp) -> Option<&'a str> {
        self.login_attribute(user, as_of, |p| p.region.as_ref())
    }

    pub fn language_of(&self, user: &str, as_of: Timestamp) -> Option<&'a str> {
        self.login_attribute(user, as_of, |p| p.language.as_ref())
    }

    /// Total order expenditure of a pharmacy in `[from, to)`.
    pub fn pharmacy_spend(&self, pharmacy: &str, from: Option<Timestamp>, to: Timestamp) -> f64 {
        self.pharmacy_events(pharmacy, from, to)
            .into_iter()
            .map(EventRecord::expenditure)
            .sum()
    }
}
