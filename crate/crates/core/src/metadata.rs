//! Traffic analysis over the server ledger.
//!
//! Every function here takes [`MetadataRecord`]s and nothing else: no
//! envelope, ciphertext or key type appears in any signature. What the
//! functions recover (who talks to whom, how often, in which groups, at what
//! hours) is therefore available to anyone holding the ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::server::{EventKind, MetadataRecord};

pub const DEFAULT_WINDOW_MS: u64 = 2_000;
pub const DEFAULT_MIN_GROUP_SIZE: usize = 3;
/// Fan-out copies of one message differ in size by at most this much.
pub const SIZE_SLACK_BYTES: u64 = 16;
pub const REPORT_SCHEMA: &str = "ratchetlab-metadata-report/1";

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("ledger line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("window_ms must be positive")]
    Window,
    #[error("min_size must be at least 3, got {0}")]
    MinSize(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses JSON-lines ledger text. Blank lines are skipped.
pub fn parse_ledger(text: &str) -> Result<Vec<MetadataRecord>, MetadataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetadataError::Parse { line: i + 1, reason: e.to_string() }))
        .collect()
}

pub fn load_ledger(path: &Path) -> Result<Vec<MetadataRecord>, MetadataError> {
    parse_ledger(&fs::read_to_string(path)?)
}

fn relayed(rows: &[MetadataRecord]) -> impl Iterator<Item = &MetadataRecord> {
    rows.iter().filter(|r| r.event == EventKind::MessageRelayed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub count: u64,
    pub bytes: u64,
    pub first_ms: u64,
    pub last_ms: u64,
}

/// Directed who-messaged-whom graph built from `message_relayed` rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContactGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<(String, String), EdgeStats>,
}

impl ContactGraph {
    pub fn edge(&self, from: &str, to: &str) -> Option<&EdgeStats> {
        self.edges.get(&(from.to_string(), to.to_string()))
    }

    pub fn total_messages(&self) -> u64 {
        self.edges.values().map(|e| e.count).sum()
    }
}

pub fn build_graph(rows: &[MetadataRecord]) -> ContactGraph {
    let mut g = ContactGraph::default();
    for r in relayed(rows) {
        g.nodes.insert(r.sender_id.clone());
        g.nodes.insert(r.recipient_id.clone());
        g.edges
            .entry((r.sender_id.clone(), r.recipient_id.clone()))
            .and_modify(|e| {
                e.count += 1;
                e.bytes += r.payload_size;
                e.first_ms = e.first_ms.min(r.timestamp_ms);
                e.last_ms = e.last_ms.max(r.timestamp_ms);
            })
            .or_insert(EdgeStats { count: 1, bytes: r.payload_size, first_ms: r.timestamp_ms, last_ms: r.timestamp_ms });
    }
    g
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub id: String,
    pub count: u64,
    pub bytes: u64,
}

/// Outgoing contacts of `user_id`: most messages first, then most bytes,
/// then smallest id. Unknown users get an empty list.
pub fn top_contacts(graph: &ContactGraph, user_id: &str, k: usize) -> Vec<Contact> {
    let mut out: Vec<Contact> = graph
        .edges
        .iter()
        .filter(|((from, _), _)| from == user_id)
        .map(|((_, to), e)| Contact { id: to.clone(), count: e.count, bytes: e.bytes })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then(b.bytes.cmp(&a.bytes)).then(a.id.cmp(&b.id)));
    out.truncate(k);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Reads `group_id` directly; an upper bound on what the server knows.
    Labeled,
    /// Ignores `group_id`; clusters fan-out bursts by sender, time and size.
    Blind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceParams {
    window_ms: u64,
    min_size: usize,
    mode: InferenceMode,
}

impl InferenceParams {
    pub fn new(window_ms: u64, min_size: usize, mode: InferenceMode) -> Result<Self, MetadataError> {
        if window_ms == 0 {
            return Err(MetadataError::Window);
        }
        if min_size < 3 {
            return Err(MetadataError::MinSize(min_size));
        }
        Ok(Self { window_ms, min_size, mode })
    }

    pub fn blind() -> Self {
        Self { window_ms: DEFAULT_WINDOW_MS, min_size: DEFAULT_MIN_GROUP_SIZE, mode: InferenceMode::Blind }
    }

    pub fn labeled() -> Self {
        Self { mode: InferenceMode::Labeled, ..Self::blind() }
    }

    pub fn mode(&self) -> InferenceMode {
        self.mode
    }
}

/// `confidence` is a support ratio (this group's events over all candidate
/// events), not a calibrated probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferredGroup {
    pub members: BTreeSet<String>,
    pub support: usize,
    pub confidence: f64,
    pub label: Option<String>,
}

pub fn infer_groups(rows: &[MetadataRecord], params: &InferenceParams) -> Vec<InferredGroup> {
    let mut groups = match params.mode {
        InferenceMode::Labeled => infer_labeled(rows, params.min_size),
        InferenceMode::Blind => infer_blind(rows, params.window_ms, params.min_size),
    };
    groups.sort_by(|a, b| a.members.cmp(&b.members).then(a.label.cmp(&b.label)));
    groups
}

fn infer_labeled(rows: &[MetadataRecord], min_size: usize) -> Vec<InferredGroup> {
    // label -> (members, distinct (sender, timestamp) send events)
    type Seen<'a> = (BTreeSet<String>, BTreeSet<(&'a str, u64)>);
    let mut by_label: BTreeMap<&str, Seen> = BTreeMap::new();
    for r in relayed(rows) {
        if let Some(g) = &r.group_id {
            let (members, events) = by_label.entry(g).or_default();
            members.insert(r.sender_id.clone());
            members.insert(r.recipient_id.clone());
            events.insert((&r.sender_id, r.timestamp_ms));
        }
    }
    by_label
        .into_iter()
        .filter(|(_, (m, _))| m.len() >= min_size)
        .map(|(label, (members, events))| InferredGroup {
            members,
            support: events.len(),
            confidence: 1.0,
            label: Some(label.to_string()),
        })
        .collect()
}

struct Burst<'a> {
    start_ms: u64,
    size: u64,
    recipients: BTreeSet<&'a str>,
}

fn infer_blind(rows: &[MetadataRecord], window_ms: u64, min_size: usize) -> Vec<InferredGroup> {
    let mut by_sender: BTreeMap<&str, Vec<&MetadataRecord>> = BTreeMap::new();
    for r in relayed(rows) {
        by_sender.entry(&r.sender_id).or_default().push(r);
    }

    let mut candidates: Vec<BTreeSet<String>> = Vec::new();
    for (sender, mut events) in by_sender {
        // Canonical order so the result does not depend on ledger order.
        events.sort_by(|a, b| {
            (a.timestamp_ms, &a.recipient_id, a.payload_size).cmp(&(b.timestamp_ms, &b.recipient_id, b.payload_size))
        });
        let mut open: Vec<Burst> = Vec::new();
        let mut closed: Vec<Burst> = Vec::new();
        for e in events {
            let (expired, live): (Vec<_>, Vec<_>) = open.into_iter().partition(|b| e.timestamp_ms - b.start_ms > window_ms);
            closed.extend(expired);
            open = live;
            match open
                .iter_mut()
                .find(|b| b.size.abs_diff(e.payload_size) <= SIZE_SLACK_BYTES && !b.recipients.contains(e.recipient_id.as_str()))
            {
                Some(b) => {
                    b.recipients.insert(&e.recipient_id);
                }
                None => open.push(Burst {
                    start_ms: e.timestamp_ms,
                    size: e.payload_size,
                    recipients: BTreeSet::from([e.recipient_id.as_str()]),
                }),
            }
        }
        closed.extend(open);
        for b in closed.into_iter().filter(|b| b.recipients.len() + 1 >= min_size) {
            let mut members: BTreeSet<String> = b.recipients.into_iter().map(str::to_string).collect();
            members.insert(sender.to_string());
            candidates.push(members);
        }
    }

    let total = candidates.len();
    let mut support: BTreeMap<BTreeSet<String>, usize> = BTreeMap::new();
    for c in candidates {
        *support.entry(c).or_default() += 1;
    }
    support
        .into_iter()
        .map(|(members, n)| InferredGroup { members, support: n, confidence: n as f64 / total as f64, label: None })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub user_id: String,
    /// Local hour of day, 0..24.
    pub hour_of_day: [u64; 24],
    /// Monday = 0.
    pub day_of_week: [u64; 7],
    /// Local calendar date (`YYYY-MM-DD`) → messages sent that day.
    pub messages_per_day: BTreeMap<String, u64>,
}

impl ActivityProfile {
    pub fn total(&self) -> u64 {
        self.hour_of_day.iter().sum()
    }

    pub fn peak_hour(&self) -> Option<usize> {
        let max = *self.hour_of_day.iter().max()?;
        (max > 0).then(|| self.hour_of_day.iter().position(|&c| c == max).expect("max exists"))
    }
}

/// Histograms over the user's sent messages, shifted by `tz_offset_minutes` from UTC.
pub fn activity_profile(rows: &[MetadataRecord], user_id: &str, tz_offset_minutes: i32) -> ActivityProfile {
    let mut p = ActivityProfile {
        user_id: user_id.to_string(),
        hour_of_day: [0; 24],
        day_of_week: [0; 7],
        messages_per_day: BTreeMap::new(),
    };
    for r in relayed(rows).filter(|r| r.sender_id == user_id) {
        let local_ms = r.timestamp_ms as i64 + tz_offset_minutes as i64 * 60_000;
        let days = local_ms.div_euclid(86_400_000);
        let hour = local_ms.rem_euclid(86_400_000) / 3_600_000;
        p.hour_of_day[hour as usize] += 1;
        // 1970-01-01 was a Thursday (index 3).
        p.day_of_week[(days + 3).rem_euclid(7) as usize] += 1;
        *p.messages_per_day.entry(civil_date(days)).or_default() += 1;
    }
    p
}

/// Days since 1970-01-01 to `YYYY-MM-DD` (proleptic Gregorian).
fn civil_date(days: i64) -> String {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!("{y:04}-{m:02}-{d:02}")
}

/// All user ids that sent at least one relayed message, sorted.
pub fn active_users(rows: &[MetadataRecord]) -> Vec<String> {
    relayed(rows).map(|r| r.sender_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub nodes: usize,
    pub edges: usize,
    pub total_messages: u64,
    pub top_edges: Vec<ReportEdge>,
    pub groups: Vec<InferredGroup>,
    pub profiles: Vec<ReportProfile>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEdge {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub stats: EdgeStats,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportProfile {
    pub user_id: String,
    pub messages: u64,
    pub peak_hour: Option<usize>,
    pub active_days: usize,
    pub hour_of_day: [u64; 24],
    pub day_of_week: [u64; 7],
}

pub const REPORT_TOP_EDGES: usize = 10;

pub fn build_report(graph: &ContactGraph, groups: &[InferredGroup], profiles: &[ActivityProfile]) -> Report {
    let mut edges: Vec<_> = graph.edges.iter().collect();
    edges.sort_by(|(ka, a), (kb, b)| b.count.cmp(&a.count).then(b.bytes.cmp(&a.bytes)).then(ka.cmp(kb)));
    Report {
        schema: REPORT_SCHEMA.to_string(),
        nodes: graph.nodes.len(),
        edges: graph.edges.len(),
        total_messages: graph.total_messages(),
        top_edges: edges
            .into_iter()
            .take(REPORT_TOP_EDGES)
            .map(|((from, to), stats)| ReportEdge { from: from.clone(), to: to.clone(), stats: stats.clone() })
            .collect(),
        groups: groups.to_vec(),
        profiles: profiles
            .iter()
            .map(|p| ReportProfile {
                user_id: p.user_id.clone(),
                messages: p.total(),
                peak_hour: p.peak_hour(),
                active_days: p.messages_per_day.len(),
                hour_of_day: p.hour_of_day,
                day_of_week: p.day_of_week,
            })
            .collect(),
    }
}

/// Graph, inferred groups and per-user profiles for every active sender, in one report.
pub fn analyze(rows: &[MetadataRecord], params: &InferenceParams, tz_offset_minutes: i32) -> Report {
    let graph = build_graph(rows);
    let groups = infer_groups(rows, params);
    let profiles: Vec<_> = active_users(rows).iter().map(|u| activity_profile(rows, u, tz_offset_minutes)).collect();
    build_report(&graph, &groups, &profiles)
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metadata report");
        if self.total_messages == 0 {
            let _ = writeln!(out, "zero activity: no relayed messages in the ledger");
            return out;
        }
        let _ = writeln!(out, "users: {}  contact edges: {}  relayed messages: {}", self.nodes, self.edges, self.total_messages);
        let _ = writeln!(out, "\ntop edges:");
        for e in &self.top_edges {
            let _ = writeln!(out, "  {} -> {}  {} msgs  {} bytes", e.from, e.to, e.stats.count, e.stats.bytes);
        }
        let _ = writeln!(out, "\ninferred groups: {}", self.groups.len());
        for g in &self.groups {
            let members: Vec<&str> = g.members.iter().map(String::as_str).collect();
            let label = g.label.as_deref().map(|l| format!(" [{l}]")).unwrap_or_default();
            let _ = writeln!(out, "  {{{}}}{label}  support {}  confidence {:.3}", members.join(", "), g.support, g.confidence);
        }
        let _ = writeln!(out, "\nactivity:");
        for p in &self.profiles {
            let peak = p.peak_hour.map(|h| format!("{h:02}:00")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "  {}  {} msgs  peak {}  {} active days", p.user_id, p.messages, peak, p.active_days);
        }
        out
    }
}

/// Writes the JSON report to `path` and the text summary next to it with a `.txt` extension.
pub fn write_report(report: &Report, path: &Path) -> Result<(), MetadataError> {
    fs::write(path, report.to_json())?;
    fs::write(path.with_extension("txt"), report.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(from: &str, to: &str, ts: u64, size: u64, group: Option<&str>) -> MetadataRecord {
        MetadataRecord {
            event: EventKind::MessageRelayed,
            sender_id: from.into(),
            recipient_id: to.into(),
            group_id: group.map(Into::into),
            timestamp_ms: ts,
            payload_size: size,
        }
    }

    #[test]
    fn graph_aggregates_exactly() {
        assert_eq!(build_graph(&[]), ContactGraph::default());
        let mut rows: Vec<_> = (0..5).map(|i| row("+1A0001", "+1B0001", 100 * i, 100, None)).collect();
        rows.push(MetadataRecord { event: EventKind::MessageDelivered, ..row("+1A0001", "+1B0001", 900, 100, None) });
        let g = build_graph(&rows);
        let e = g.edge("+1A0001", "+1B0001").unwrap();
        assert_eq!((e.count, e.bytes, e.first_ms, e.last_ms), (5, 500, 0, 400));
        assert_eq!(g.nodes.len(), 2);

        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(1, 3);
        assert_eq!(build_graph(&shuffled), g);
    }

    #[test]
    fn top_contacts_ordering() {
        let mut rows: Vec<_> = (0..5).map(|i| row("A", "B", i, 10, None)).collect();
        rows.push(row("A", "C", 9, 10, None));
        let g = build_graph(&rows);
        let ids: Vec<_> = top_contacts(&g, "A", 5).into_iter().map(|c| c.id).collect();
        assert_eq!(ids, ["B", "C"]);
        assert!(top_contacts(&g, "Z", 3).is_empty());

        let tie = build_graph(&[row("A", "C", 0, 10, None), row("A", "B", 1, 20, None), row("A", "D", 2, 10, None)]);
        let ids: Vec<_> = top_contacts(&tie, "A", 2).into_iter().map(|c| c.id).collect();
        assert_eq!(ids, ["B", "C"]);
    }

    #[test]
    fn params_validation() {
        assert!(matches!(InferenceParams::new(0, 3, InferenceMode::Blind), Err(MetadataError::Window)));
        assert!(matches!(InferenceParams::new(10, 2, InferenceMode::Blind), Err(MetadataError::MinSize(2))));
        InferenceParams::new(1, 3, InferenceMode::Labeled).unwrap();
    }

    fn fan_out(from: &str, to: &[&str], ts: u64, size: u64, g: &str) -> Vec<MetadataRecord> {
        to.iter().map(|t| row(from, t, ts, size, Some(g))).collect()
    }

    #[test]
    fn blind_mode_recovers_fan_out() {
        let mut rows = Vec::new();
        for k in 0..3 {
            rows.extend(fan_out("A", &["B", "C", "D"], 10_000 * k, 200 + k, "g1"));
            rows.extend(fan_out("C", &["A", "B", "D"], 10_000 * k + 5_000, 300, "g1"));
            rows.extend(fan_out("E", &["F", "G"], 10_000 * k + 7_000, 150, "g2"));
        }
        rows.push(row("A", "B", 100_000, 120, None));
        let blind = infer_groups(&rows, &InferenceParams::blind());
        let sets: Vec<Vec<&str>> = blind.iter().map(|g| g.members.iter().map(String::as_str).collect()).collect();
        assert_eq!(sets, vec![vec!["A", "B", "C", "D"], vec!["E", "F", "G"]]);
        assert_eq!(blind[0].support, 6);
        assert!((blind[0].confidence - 6.0 / 9.0).abs() < 1e-12);

        let labeled = infer_groups(&rows, &InferenceParams::labeled());
        assert_eq!(labeled.iter().map(|g| g.label.clone().unwrap()).collect::<Vec<_>>(), ["g1", "g2"]);
        assert_eq!(labeled.iter().map(|g| &g.members).collect::<Vec<_>>(), blind.iter().map(|g| &g.members).collect::<Vec<_>>());

        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(infer_groups(&rev, &InferenceParams::blind()), blind);
    }

    #[test]
    fn pairwise_traffic_yields_no_groups() {
        let rows: Vec<_> = (0..50).map(|i| row("A", if i % 2 == 0 { "B" } else { "C" }, i * 5_000, 100, None)).collect();
        assert!(infer_groups(&rows, &InferenceParams::blind()).is_empty());
        assert!(infer_groups(&rows, &InferenceParams::labeled()).is_empty());
    }

    #[test]
    fn size_slack_splits_unrelated_bursts() {
        let rows = vec![row("A", "B", 0, 100, None), row("A", "C", 10, 500, None), row("A", "D", 20, 117, None)];
        assert!(infer_groups(&rows, &InferenceParams::blind()).is_empty());
        let rows = vec![row("A", "B", 0, 100, None), row("A", "C", 10, 116, None), row("A", "D", 20, 84, None)];
        assert_eq!(infer_groups(&rows, &InferenceParams::blind()).len(), 1);
    }

    #[test]
    fn activity_histograms() {
        // 2021-01-04 (a Monday) 14:00 UTC.
        let base = 1_609_768_800_000u64;
        let rows: Vec<_> = (0..10).map(|i| row("A", "B", base + i * 60_000, 10, None)).collect();
        let p = activity_profile(&rows, "A", 0);
        assert_eq!(p.hour_of_day[14], 10);
        assert_eq!(p.total(), 10);
        assert_eq!(p.day_of_week[0], 10);
        assert_eq!(p.messages_per_day.get("2021-01-04"), Some(&10));
        assert_eq!(p.peak_hour(), Some(14));

        let shifted = activity_profile(&rows, "A", -15 * 60);
        assert_eq!(shifted.hour_of_day[23], 10);
        assert_eq!(shifted.day_of_week[6], 10);
        assert_eq!(shifted.messages_per_day.get("2021-01-03"), Some(&10));

        let empty = activity_profile(&rows, "Z", 0);
        assert_eq!(empty.total(), 0);
        assert_eq!(empty.day_of_week, [0; 7]);
        assert_eq!(empty.peak_hour(), None);
    }

    #[test]
    fn civil_dates() {
        assert_eq!(civil_date(0), "1970-01-01");
        assert_eq!(civil_date(-1), "1969-12-31");
        assert_eq!(civil_date(18_631), "2021-01-04");
        assert_eq!(civil_date(11_016), "2000-02-29");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let good = serde_json::to_string(&row("A", "B", 1, 2, None)).unwrap();
        let text = format!("{good}\n\n{good}\n{{\"event\":\"nope\"}}\n");
        match parse_ledger(&text) {
            Err(MetadataError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_ledger(&format!("{good}\n{good}\n")).unwrap().len(), 2);
    }

    #[test]
    fn report_formats() {
        let empty = build_report(&ContactGraph::default(), &[], &[]);
        assert!(empty.to_text().contains("zero activity"));
        let rows = fan_out("A", &["B", "C"], 0, 10, "g");
        let g = build_graph(&rows);
        let groups = infer_groups(&rows, &InferenceParams::blind());
        let profiles = vec![activity_profile(&rows, "A", 0)];
        let r = build_report(&g, &groups, &profiles);
        let parsed: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed, r);
        assert_eq!(parsed.schema, REPORT_SCHEMA);
        assert!(r.to_text().contains("{A, B, C}"));
    }
}
