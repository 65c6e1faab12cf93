//! Canonical app-event model and the JSONL event log.
//!
//! Every other stage of the engine reads from (and appends to) a list of
//! [`EventRecord`]s. On disk the log is one JSON object per line:
//!
//! ```text
//! {"ts":"2024-02-05T03:12:09Z","user":"u17","pharmacy":"p4","kind":"order","payload":{"lines":[{"sku":"s012","qty":2,"price":14.5}]}}
//! ```
//!
//! Login payloads optionally carry profile attributes reported by the app
//! session (`region`, `language`, `session_secs`); nudge payloads carry the
//! decision id and the recommended pair.

use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("line {0}: malformed JSON")]
    MalformedLine(usize),
    #[error("line {line}: schema violation in field `{field}`")]
    SchemaViolation { line: usize, field: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Login,
    Order,
    NudgeSent,
    NudgeOpened,
    NudgeClosed,
    NudgeExpired,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Login => "login",
            EventKind::Order => "order",
            EventKind::NudgeSent => "nudge_sent",
            EventKind::NudgeOpened => "nudge_opened",
            EventKind::NudgeClosed => "nudge_closed",
            EventKind::NudgeExpired => "nudge_expired",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "login" => EventKind::Login,
            "order" => EventKind::Order,
            "nudge_sent" => EventKind::NudgeSent,
            "nudge_opened" => EventKind::NudgeOpened,
            "nudge_closed" => EventKind::NudgeClosed,
            "nudge_expired" => EventKind::NudgeExpired,
            _ => return None,
        })
    }

    pub fn is_nudge(self) -> bool {
        matches!(
            self,
            EventKind::NudgeSent | EventKind::NudgeOpened | EventKind::NudgeClosed | EventKind::NudgeExpired
        )
    }
}

/// Attributes an app session reports on login. All optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoginPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_secs: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderLine {
    pub sku: String,
    #[serde(rename = "qty")]
    pub quantity: u32,
    #[serde(rename = "price")]
    pub unit_price: f64,
}

impl OrderLine {
    pub fn revenue(&self) -> f64 {
        f64::from(self.quantity) * self.unit_price
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderPayload {
    pub lines: Vec<OrderLine>,
}

impl OrderPayload {
    pub fn expenditure(&self) -> f64 {
        self.lines.iter().map(OrderLine::revenue).sum()
    }

    pub fn contains(&self, sku: &str) -> bool {
        self.lines.iter().any(|l| l.sku == sku)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NudgePayload {
    #[serde(rename = "decision")]
    pub decision_id: String,
    #[serde(rename = "anchor")]
    pub anchor_sku: String,
    #[serde(rename = "target")]
    pub target_sku: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Login(LoginPayload),
    Order(OrderPayload),
    Nudge(NudgePayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub timestamp: Timestamp,
    pub user_id: String,
    pub pharmacy_id: String,
    pub kind: EventKind,
    pub payload: Payload,
}

impl EventRecord {
    pub fn login(timestamp: Timestamp, user: &str, pharmacy: &str, payload: LoginPayload) -> Self {
        Self {
            timestamp,
            user_id: user.to_string(),
            pharmacy_id: pharmacy.to_string(),
            kind: EventKind::Login,
            payload: Payload::Login(payload),
        }
    }

    pub fn order(timestamp: Timestamp, user: &str, pharmacy: &str, lines: Vec<OrderLine>) -> Self {
        Self {
            timestamp,
            user_id: user.to_string(),
            pharmacy_id: pharmacy.to_string(),
            kind: EventKind::Order,
            payload: Payload::Order(OrderPayload { lines }),
        }
    }

    /// Builds one of the four nudge lifecycle events.
    pub fn nudge(timestamp: Timestamp, kind: EventKind, user: &str, pharmacy: &str, nudge: NudgePayload) -> Self {
        debug_assert!(kind.is_nudge());
        Self {
            timestamp,
            user_id: user.to_string(),
            pharmacy_id: pharmacy.to_string(),
            kind,
            payload: Payload::Nudge(nudge),
        }
    }

    pub fn as_order(&self) -> Option<&OrderPayload> {
        match &self.payload {
            Payload::Order(o) => Some(o),
            _ => None,
        }
    }

    pub fn as_nudge(&self) -> Option<&NudgePayload> {
        match &self.payload {
            Payload::Nudge(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_login(&self) -> Option<&LoginPayload> {
        match &self.payload {
            Payload::Login(l) => Some(l),
            _ => None,
        }
    }

    /// Expenditure of an order event, zero for every other kind.
    pub fn expenditure(&self) -> f64 {
        self.as_order().map_or(0.0, OrderPayload::expenditure)
    }

    /// Checks the record invariants, returning the offending field name.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.timestamp.nanosecond() != 0 {
            return Err("ts");
        }
        if self.user_id.is_empty() {
            return Err("user");
        }
        if self.pharmacy_id.is_empty() {
            return Err("pharmacy");
        }
        match (&self.payload, self.kind) {
            (Payload::Login(_), EventKind::Login) => Ok(()),
            (Payload::Order(order), EventKind::Order) => {
                if order.lines.is_empty() {
                    return Err("payload.lines");
                }
                for line in &order.lines {
                    if line.sku.is_empty() {
                        return Err("payload.lines.sku");
                    }
                    if line.quantity == 0 {
                        return Err("payload.lines.qty");
                    }
                    if !line.unit_price.is_finite() || line.unit_price < 0.0 {
                        return Err("payload.lines.price");
                    }
                }
                Ok(())
            }
            (Payload::Nudge(n), kind) if kind.is_nudge() => {
                if n.decision_id.is_empty() {
                    return Err("payload.decision");
                }
                if n.anchor_sku.is_empty() {
                    return Err("payload.anchor");
                }
                if n.target_sku.is_empty() {
                    return Err("payload.target");
                }
                if n.anchor_sku == n.target_sku {
                    return Err("payload.target");
                }
                Ok(())
            }
            _ => Err("payload"),
        }
    }
}

#[derive(Deserialize)]
struct WireEvent {
    ts: String,
    user: String,
    pharmacy: String,
    kind: String,
    payload: Value,
}

#[derive(Serialize)]
#[serde(untagged)]
enum PayloadRef<'a> {
    Login(&'a LoginPayload),
    Order(&'a OrderPayload),
    Nudge(&'a NudgePayload),
}

#[derive(Serialize)]
struct WireEventRef<'a> {
    ts: String,
    user: &'a str,
    pharmacy: &'a str,
    kind: &'static str,
    payload: PayloadRef<'a>,
}

/// Formats a timestamp the way the log stores it (second resolution, `Z` suffix).
pub fn format_timestamp(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.with_timezone(&Utc))
}

fn to_wire(record: &EventRecord) -> WireEventRef<'_> {
    let payload = match &record.payload {
        Payload::Login(p) => PayloadRef::Login(p),
        Payload::Order(p) => PayloadRef::Order(p),
        Payload::Nudge(p) => PayloadRef::Nudge(p),
    };
    WireEventRef {
        ts: format_timestamp(&record.timestamp),
        user: &record.user_id,
        pharmacy: &record.pharmacy_id,
        kind: record.kind.as_str(),
        payload,
    }
}

fn from_wire(wire: WireEvent, line: usize) -> Result<EventRecord, EventLogError> {
    let violation = |field: &str| EventLogError::SchemaViolation { line, field: field.to_string() };
    let timestamp = parse_timestamp(&wire.ts).ok_or_else(|| violation("ts"))?;
    let kind = EventKind::parse(&wire.kind).ok_or_else(|| violation("kind"))?;
    let payload = match kind {
        EventKind::Login => Payload::Login(serde_json::from_value(wire.payload).map_err(|_| violation("payload"))?),
        EventKind::Order => Payload::Order(serde_json::from_value(wire.payload).map_err(|_| violation("payload"))?),
        _ => Payload::Nudge(serde_json::from_value(wire.payload).map_err(|_| violation("payload"))?),
    };
    let record = EventRecord {
        timestamp,
        user_id: wire.user,
        pharmacy_id: wire.pharmacy,
        kind,
        payload,
    };
    record.validate().map_err(violation)?;
    Ok(record)
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn event_to_line(record: &EventRecord) -> String {
    serde_json::to_string(&to_wire(record)).expect("wire events always serialize")
}

/// Parses one JSON line; `line` is the 1-based position used in errors.
pub fn event_from_line(text: &str, line: usize) -> Result<EventRecord, EventLogError> {
    let value: Value = serde_json::from_str(text).map_err(|_| EventLogError::MalformedLine(line))?;
    if !value.is_object() {
        return Err(EventLogError::MalformedLine(line));
    }
    let wire: WireEvent = serde_json::from_value(value).map_err(|e| EventLogError::SchemaViolation {
        line,
        field: missing_field(&e.to_string()),
    })?;
    from_wire(wire, line)
}

fn missing_field(message: &str) -> String {
    // serde reports "missing field `ts`" / "invalid type: ..., expected ..."
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

/// Reads a JSONL log, validating each record, and returns it sorted by
/// timestamp. Ties keep input order. Blank lines are ignored.
pub fn parse_event_log<R: BufRead>(reader: R) -> Result<Vec<EventRecord>, EventLogError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(event_from_line(&line, idx + 1)?);
    }
    sort_events(&mut records);
    Ok(records)
}

pub fn parse_event_str(text: &str) -> Result<Vec<EventRecord>, EventLogError> {
    parse_event_log(text.as_bytes())
}

/// Writes records as JSONL, one line each, in the order given.
pub fn write_event_log<W: Write>(records: &[EventRecord], mut writer: W) -> Result<(), EventLogError> {
    for record in records {
        writer.write_all(event_to_line(record).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_event_string(records: &[EventRecord]) -> String {
    let mut buf = Vec::new();
    write_event_log(records, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

/// Stable sort by timestamp.
pub fn sort_events(records: &mut [EventRecord]) {
    records.sort_by_key(|r| r.timestamp);
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(day: u32, hour: u32) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 2, day, hour, 0, 0).unwrap()
    }

    #[test]
    fn empty_stream_is_empty_log() {
        assert!(parse_event_str("").unwrap().is_empty());
        assert_eq!(write_event_string(&[]), "");
    }

    #[test]
    fn out_of_order_lines_are_sorted() {
        let late = EventRecord::login(ts(5, 9), "u1", "p1", LoginPayload::default());
        let early = EventRecord::login(ts(3, 9), "u2", "p1", LoginPayload::default());
        let text = write_event_string(&[late.clone(), early.clone()]);
        assert_eq!(parse_event_str(&text).unwrap(), vec![early, late]);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let a = EventRecord::login(ts(3, 9), "a", "p1", LoginPayload::default());
        let b = EventRecord::login(ts(3, 9), "b", "p1", LoginPayload::default());
        let text = write_event_string(&[b.clone(), a.clone()]);
        assert_eq!(parse_event_str(&text).unwrap(), vec![b, a]);
    }

    #[test]
    fn order_without_lines_is_schema_violation() {
        let line = r#"{"ts":"2024-02-05T06:00:00Z","user":"u1","pharmacy":"p1","kind":"order","payload":{"lines":[]}}"#;
        match parse_event_str(line) {
            Err(EventLogError::SchemaViolation { line: 1, field }) => assert_eq!(field, "payload.lines"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let good = r#"{"ts":"2024-02-05T06:00:00Z","user":"u1","pharmacy":"p1","kind":"login","payload":{}}"#;
        let text = format!("{good}\n{{not json\n");
        assert!(matches!(parse_event_str(&text), Err(EventLogError::MalformedLine(2))));
    }

    #[test]
    fn schema_violations_name_the_field() {
        let cases = [
            (r#"{"ts":"yesterday","user":"u","pharmacy":"p","kind":"login","payload":{}}"#, "ts"),
            (r#"{"ts":"2024-02-05T06:00:00Z","user":"","pharmacy":"p","kind":"login","payload":{}}"#, "user"),
            (r#"{"ts":"2024-02-05T06:00:00Z","user":"u","pharmacy":"p","kind":"logout","payload":{}}"#, "kind"),
            (r#"{"ts":"2024-02-05T06:00:00Z","user":"u","pharmacy":"p","kind":"login"}"#, "payload"),
            (
                r#"{"ts":"2024-02-05T06:00:00Z","user":"u","pharmacy":"p","kind":"nudge_sent","payload":{"decision":"d","anchor":"A","target":"A"}}"#,
                "payload.target",
            ),
            (
                r#"{"ts":"2024-02-05T06:00:00Z","user":"u","pharmacy":"p","kind":"order","payload":{"lines":[{"sku":"A","qty":0,"price":1.0}]}}"#,
                "payload.lines.qty",
            ),
            (
                r#"{"ts":"2024-02-05T06:00:00Z","user":"u","pharmacy":"p","kind":"order","payload":{"lines":[{"sku":"A","qty":1,"price":-1.0}]}}"#,
                "payload.lines.price",
            ),
        ];
        for (line, expected) in cases {
            match parse_event_str(line) {
                Err(EventLogError::SchemaViolation { field, .. }) => assert_eq!(field, expected, "{line}"),
                other => panic!("{line}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn login_record_echoes_every_field() {
        let rec = EventRecord::login(ts(5, 6), "u1", "p1", LoginPayload::default());
        assert_eq!(
            write_event_string(&[rec]),
            "{\"ts\":\"2024-02-05T06:00:00Z\",\"user\":\"u1\",\"pharmacy\":\"p1\",\"kind\":\"login\",\"payload\":{}}\n"
        );
    }

    #[test]
    fn wire_field_names_match_schema() {
        let order = EventRecord::order(
            ts(5, 6),
            "u1",
            "p1",
            vec![OrderLine { sku: "A".into(), quantity: 2, unit_price: 1.5 }],
        );
        let line = event_to_line(&order);
        assert!(line.contains(r#""payload":{"lines":[{"sku":"A","qty":2,"price":1.5}]}"#), "{line}");
        let nudge = EventRecord::nudge(
            ts(5, 6),
            EventKind::NudgeSent,
            "u1",
            "p1",
            NudgePayload { decision_id: "d1".into(), anchor_sku: "A".into(), target_sku: "B".into() },
        );
        assert!(event_to_line(&nudge).contains(r#""payload":{"decision":"d1","anchor":"A","target":"B"}"#));
    }

    #[test]
    fn order_expenditure_sums_lines() {
        let order = EventRecord::order(
            ts(5, 6),
            "u1",
            "p1",
            vec![
                OrderLine { sku: "A".into(), quantity: 2, unit_price: 10.0 },
                OrderLine { sku: "B".into(), quantity: 1, unit_price: 5.5 },
            ],
        );
        assert_eq!(order.expenditure(), 25.5);
    }
}
