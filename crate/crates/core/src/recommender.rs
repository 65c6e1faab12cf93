//! Rule-based item-pair recommendation.
//!
//! Candidates are sku pairs bought together in the same order, ranked by the
//! revenue those two skus brought in across such orders. The top `k` pairs
//! are kept and then filtered to pairs whose skus are both in stock (in that
//! order, so fewer than `k` may survive). For a given user, a pair is usable
//! when one sku is bought at least as often as the user's mean per-item count
//! (the anchor) and the other less often (the target). Never-purchased
//! targets win, ties broken by rank; otherwise the pair with the largest gap
//! in relative frequency wins.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::days;
use crate::events::{EventKind, EventRecord, Timestamp};
use crate::index::EventIndex;

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_LOOKBACK_DAYS: i64 = 90;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecommendError {
    #[error("no candidate pair contains an item this user buys frequently alongside an infrequent one")]
    NoEligiblePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    /// Lexicographically smaller sku.
    pub sku_a: String,
    pub sku_b: String,
    pub co_purchase_orders: u64,
    pub pair_revenue: f64,
    /// 1-based position after the revenue sort, before stock filtering.
    pub rank: usize,
}

impl CandidatePair {
    pub fn contains(&self, sku: &str) -> bool {
        self.sku_a == sku || self.sku_b == sku
    }
}

/// Builds the ranked candidate list from orders in `[as_of − lookback, as_of)`.
///
/// Pair revenue counts, for each order containing both skus, the line
/// revenue of those two skus only.
pub fn build_candidates(
    events: &[EventRecord],
    stock: &BTreeSet<String>,
    as_of: Timestamp,
    top_k: usize,
    lookback_days: i64,
) -> Vec<CandidatePair> {
    let from = as_of - days(lookback_days);
    let mut stats: BTreeMap<(&str, &str), (u64, f64)> = BTreeMap::new();
    for order in events
        .iter()
        .filter(|e| e.kind == EventKind::Order && e.timestamp >= from && e.timestamp < as_of)
        .filter_map(EventRecord::as_order)
    {
        let mut per_sku: BTreeMap<&str, f64> = BTreeMap::new();
        for line in &order.lines {
            *per_sku.entry(line.sku.as_str()).or_insert(0.0) += line.revenue();
        }
        let skus: Vec<(&str, f64)> = per_sku.into_iter().collect();
        for i in 0..skus.len() {
            for j in i + 1..skus.len() {
                let entry = stats.entry((skus[i].0, skus[j].0)).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += skus[i].1 + skus[j].1;
            }
        }
    }
    let mut ranked: Vec<CandidatePair> = stats
        .into_iter()
        .map(|((a, b), (orders, revenue))| CandidatePair {
            sku_a: a.to_string(),
            sku_b: b.to_string(),
            co_purchase_orders: orders,
            pair_revenue: revenue,
            rank: 0,
        })
        .collect();
    ranked.sort_by(|x, y| {
        y.pair_revenue
            .total_cmp(&x.pair_revenue)
            .then(y.co_purchase_orders.cmp(&x.co_purchase_orders))
            .then_with(|| (&x.sku_a, &x.sku_b).cmp(&(&y.sku_a, &y.sku_b)))
    });
    ranked.truncate(top_k);
    for (i, pair) in ranked.iter_mut().enumerate() {
        pair.rank = i + 1;
    }
    ranked.retain(|p| stock.contains(&p.sku_a) && stock.contains(&p.sku_b));
    ranked
}

/// A user's purchase counts per sku (number of orders containing it).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserItemProfile {
    pub counts: BTreeMap<String, u64>,
}

impl UserItemProfile {
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        Self {
            counts: counts.into_iter().map(|(k, v)| (k.into(), v)).filter(|(_, v)| *v > 0).collect(),
        }
    }

    /// Counts the user's own orders in `[as_of − lookback, as_of)`.
    pub fn from_index(index: &EventIndex<'_>, user: &str, as_of: Timestamp, lookback_days: i64) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for order in index
            .user_events(user, Some(as_of - days(lookback_days)), as_of)
            .into_iter()
            .filter_map(EventRecord::as_order)
        {
            let skus: BTreeSet<&str> = order.lines.iter().map(|l| l.sku.as_str()).collect();
            for sku in skus {
                *counts.entry(sku.to_string()).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, sku: &str) -> u64 {
        self.counts.get(sku).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Mean count over purchased skus; `None` when nothing was bought.
    pub fn mean_count(&self) -> Option<f64> {
        let purchased = self.counts.values().filter(|&&c| c > 0).count();
        (purchased > 0).then(|| self.total() as f64 / purchased as f64)
    }

    pub fn relative_frequency(&self, sku: &str) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.count(sku) as f64 / total as f64
        }
    }

    pub fn is_frequent(&self, sku: &str) -> bool {
        self.mean_count().is_some_and(|m| self.count(sku) as f64 >= m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendReason {
    NeverPurchased,
    Infrequent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub anchor_sku: String,
    pub target_sku: String,
    pub reason: RecommendReason,
    pub rank: usize,
}

/// Orientation of a candidate for this user, if usable: `(anchor, target)`.
fn orient<'c>(profile: &UserItemProfile, pair: &'c CandidatePair) -> Option<(&'c str, &'c str)> {
    let a_frequent = profile.is_frequent(&pair.sku_a);
    let b_frequent = profile.is_frequent(&pair.sku_b);
    match (a_frequent, b_frequent) {
        (true, false) => Some((&pair.sku_a, &pair.sku_b)),
        (false, true) => Some((&pair.sku_b, &pair.sku_a)),
        _ => None,
    }
}

pub fn recommend_pair(profile: &UserItemProfile, candidates: &[CandidatePair]) -> Result<Recommendation, RecommendError> {
    let usable: Vec<(&CandidatePair, &str, &str)> = candidates
        .iter()
        .filter_map(|p| orient(profile, p).map(|(a, t)| (p, a, t)))
        .collect();

    let never = usable
        .iter()
        .filter(|(_, _, target)| profile.count(target) == 0)
        .min_by_key(|(p, _, _)| p.rank);
    if let Some((pair, anchor, target)) = never {
        return Ok(Recommendation {
            anchor_sku: anchor.to_string(),
            target_sku: target.to_string(),
            reason: RecommendReason::NeverPurchased,
            rank: pair.rank,
        });
    }

    let gap = |anchor: &str, target: &str| profile.relative_frequency(anchor) - profile.relative_frequency(target);
    usable
        .iter()
        .min_by(|(p1, a1, t1), (p2, a2, t2)| gap(a2, t2).total_cmp(&gap(a1, t1)).then(p1.rank.cmp(&p2.rank)))
        .map(|(pair, anchor, target)| Recommendation {
            anchor_sku: anchor.to_string(),
            target_sku: target.to_string(),
            reason: RecommendReason::Infrequent,
            rank: pair.rank,
        })
        .ok_or(RecommendError::NoEligiblePair)
}

/// Reads a stock list: one sku per line, blank lines and `#` comments ignored.
pub fn parse_stock_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::OrderLine;
    use chrono::{TimeZone, Utc};

    fn as_of() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap()
    }

    fn order(days_ago: i64, lines: &[(&str, f64)]) -> EventRecord {
        EventRecord::order(
            as_of() - days(days_ago),
            "u",
            "p",
            lines.iter().map(|(s, r)| OrderLine { sku: s.to_string(), quantity: 1, unit_price: *r }).collect(),
        )
    }

    fn stock(skus: &[&str]) -> BTreeSet<String> {
        skus.iter().map(|s| s.to_string()).collect()
    }

    fn pair(a: &str, b: &str, rank: usize) -> CandidatePair {
        CandidatePair { sku_a: a.into(), sku_b: b.into(), co_purchase_orders: 1, pair_revenue: 1.0, rank }
    }

    #[test]
    fn no_orders_no_candidates() {
        assert!(build_candidates(&[], &stock(&["A"]), as_of(), 100, 90).is_empty());
    }

    #[test]
    fn pairs_ranked_by_revenue() {
        let events = vec![
            order(5, &[("A", 60.0), ("B", 40.0)]),
            order(4, &[("B", 50.0), ("A", 50.0)]),
            order(3, &[("A", 30.0), ("C", 20.0)]),
        ];
        let got = build_candidates(&events, &stock(&["A", "B", "C"]), as_of(), 100, 90);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].sku_a.as_str(), got[0].sku_b.as_str(), got[0].rank), ("A", "B", 1));
        assert_eq!(got[0].pair_revenue, 200.0);
        assert_eq!(got[0].co_purchase_orders, 2);
        assert_eq!((got[1].sku_a.as_str(), got[1].sku_b.as_str(), got[1].rank), ("A", "C", 2));
        assert_eq!(got[1].pair_revenue, 50.0);

        let without_b = build_candidates(&events, &stock(&["A", "C"]), as_of(), 100, 90);
        assert_eq!(without_b.len(), 1);
        assert_eq!((without_b[0].sku_a.as_str(), without_b[0].sku_b.as_str()), ("A", "C"));
    }

    #[test]
    fn truncation_happens_before_stock_filter() {
        let events = vec![order(5, &[("A", 100.0), ("B", 100.0)]), order(4, &[("C", 1.0), ("D", 1.0)])];
        // Only the top pair survives truncation and it is out of stock.
        let got = build_candidates(&events, &stock(&["A", "C", "D"]), as_of(), 1, 90);
        assert!(got.is_empty());
    }

    #[test]
    fn orders_outside_lookback_are_ignored() {
        let events = vec![order(120, &[("A", 10.0), ("B", 10.0)]), order(0, &[("A", 10.0), ("C", 10.0)])];
        // day 0 is exactly as_of minus zero days: not strictly before as_of.
        assert!(build_candidates(&events, &stock(&["A", "B", "C"]), as_of(), 100, 90).is_empty());
    }

    #[test]
    fn never_purchased_target() {
        let profile = UserItemProfile::from_counts([("A", 10)]);
        let rec = recommend_pair(&profile, &[pair("A", "B", 1)]).unwrap();
        assert_eq!((rec.anchor_sku.as_str(), rec.target_sku.as_str()), ("A", "B"));
        assert_eq!(rec.reason, RecommendReason::NeverPurchased);
    }

    #[test]
    fn rank_breaks_never_purchased_ties() {
        let profile = UserItemProfile::from_counts([("A", 10)]);
        let rec = recommend_pair(&profile, &[pair("A", "B", 1), pair("A", "C", 2)]).unwrap();
        assert_eq!(rec.target_sku, "B");
    }

    #[test]
    fn no_frequent_item_in_candidates() {
        let profile = UserItemProfile::from_counts([("A", 10), ("Z", 1)]);
        assert_eq!(recommend_pair(&profile, &[pair("B", "C", 1)]), Err(RecommendError::NoEligiblePair));
        assert_eq!(recommend_pair(&UserItemProfile::default(), &[pair("A", "B", 1)]), Err(RecommendError::NoEligiblePair));
    }

    #[test]
    fn largest_frequency_gap_wins_when_all_targets_bought() {
        // mean = 17 / 3 = 5.67; B=2 and C=5 are infrequent, A=10 frequent.
        let profile = UserItemProfile::from_counts([("A", 10), ("B", 2), ("C", 5)]);
        let candidates = [pair("A", "B", 2), pair("A", "C", 1)];
        let rec = recommend_pair(&profile, &candidates).unwrap();
        assert_eq!((rec.anchor_sku.as_str(), rec.target_sku.as_str()), ("A", "B"));
        assert_eq!(rec.reason, RecommendReason::Infrequent);
    }

    #[test]
    fn frequent_item_returned_as_anchor_regardless_of_order() {
        let profile = UserItemProfile::from_counts([("Z", 4), ("A", 1)]);
        let rec = recommend_pair(&profile, &[pair("A", "Z", 1)]).unwrap();
        assert_eq!((rec.anchor_sku.as_str(), rec.target_sku.as_str()), ("Z", "A"));
    }

    #[test]
    fn stock_list_parsing() {
        assert_eq!(parse_stock_list("A\n\n# comment\n B \n"), stock(&["A", "B"]));
    }
}
