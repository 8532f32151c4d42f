//! Alert persistence, human resolutions, label export and review precision.
//!
//! State lives in memory and is made durable by an append-only event log
//! (`events.jsonl`). [`AlertStore::compact`] folds the log into
//! `snapshot.json`; opening a store loads the snapshot and replays the
//! events written after it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::impact::{RankKey, RankedAlertRow};
use crate::record::ItemRecord;
use crate::serving::{Clock, SystemClock};

pub const STORE_SCHEMA_VERSION: u32 = 1;

const EVENTS: &str = "events.jsonl";
const SNAPSHOT: &str = "snapshot.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Batch,
    Stream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Resolved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    TruePositive,
    FalsePositive,
}

/// One reviewer verdict. The latest is mirrored on the alert; all of them
/// are kept in [`Alert::history`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionEntry {
    pub resolution: Resolution,
    pub corrected_fields: Option<BTreeMap<String, serde_json::Value>>,
    pub note: Option<String>,
    pub resolved_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub item_id: String,
    pub batch_id: String,
    pub created_at: DateTime<Utc>,
    pub source: Source,
    pub score_gnb: f64,
    pub score_rf: f64,
    pub is_anomaly_gnb: bool,
    pub is_anomaly_rf: bool,
    pub suspected_issues: Vec<String>,
    pub priority_tier: u8,
    pub business_impact: f64,
    pub status: Status,
    pub resolution: Option<Resolution>,
    pub corrected_fields: Option<BTreeMap<String, serde_json::Value>>,
    pub note: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub history: Vec<ResolutionEntry>,
    /// The item as it looked when the alert was raised.
    pub record: ItemRecord,
}

impl Alert {
    fn from_row(row: &RankedAlertRow, alert_id: String, source: Source, batch_id: &str, now: DateTime<Utc>) -> Self {
        Alert {
            alert_id,
            item_id: row.item_id.clone(),
            batch_id: batch_id.to_string(),
            created_at: now,
            source,
            score_gnb: row.score_gnb,
            score_rf: row.score_rf,
            is_anomaly_gnb: row.is_anomaly_gnb,
            is_anomaly_rf: row.is_anomaly_rf,
            suspected_issues: row.suspected_issues.clone(),
            priority_tier: row.priority_tier,
            business_impact: row.business_impact,
            status: Status::Open,
            resolution: None,
            corrected_fields: None,
            note: None,
            resolved_at: None,
            history: Vec::new(),
            record: row.record.clone(),
        }
    }

    pub fn key(&self) -> RankKey<'_> {
        RankKey {
            is_anomaly_rf: self.is_anomaly_rf,
            is_anomaly_gnb: self.is_anomaly_gnb,
            priority_tier: self.priority_tier,
            business_impact: self.business_impact,
            score_gnb: self.score_gnb,
            score_rf: self.score_rf,
            item_id: &self.item_id,
        }
    }

    fn apply(&mut self, entry: ResolutionEntry) {
        self.status = Status::Resolved;
        self.resolution = Some(entry.resolution);
        self.corrected_fields = entry.corrected_fields.clone();
        self.note = entry.note.clone();
        self.resolved_at = Some(entry.resolved_at);
        self.history.push(entry);
    }
}

/// Ranking order, with the alert id breaking ties between alerts for the
/// same item from different batches.
fn rank(a: &Alert, b: &Alert) -> Ordering {
    a.key().cmp(&b.key()).then_with(|| a.alert_id.cmp(&b.alert_id))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created {
        seq: u64,
        alert: Box<Alert>,
    },
    Resolved {
        seq: u64,
        alert_id: String,
        entry: ResolutionEntry,
    },
}

impl Event {
    fn seq(&self) -> u64 {
        match self {
            Event::Created { seq, .. } | Event::Resolved { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    last_seq: u64,
    next_id: u64,
    alerts: Vec<Alert>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListFilter {
    pub status: Option<Status>,
    pub source: Option<Source>,
    pub tier: Option<u8>,
}

impl ListFilter {
    fn matches(&self, a: &Alert) -> bool {
        self.status.is_none_or(|s| s == a.status)
            && self.source.is_none_or(|s| s == a.source)
            && self.tier.is_none_or(|t| t == a.priority_tier)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertPage {
    pub total: usize,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub alerts: Vec<Alert>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub resolution: Option<Resolution>,
    #[serde(default)]
    pub corrected_fields: Option<BTreeMap<String, serde_json::Value>>,
    #[serde(default)]
    pub note: Option<String>,
    /// Overwrite an existing resolution instead of failing with a conflict.
    #[serde(default)]
    pub force: bool,
}

/// A resolved alert as a supervised training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub alert_id: String,
    pub item_id: String,
    /// 1 for a true positive, 0 for a false positive.
    pub label: u8,
    pub resolved_at: DateTime<Utc>,
    pub corrected_fields: Option<BTreeMap<String, serde_json::Value>>,
    pub record: ItemRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub n_alerts: usize,
    pub n_reviewed: usize,
    pub n_false_positive: usize,
    /// Share of reviewed alerts confirmed as true positives, rounded to
    /// 0.1%; null when nothing has been reviewed.
    pub precision: Option<f64>,
    pub precision_display: Option<String>,
}

impl ReviewStats {
    pub fn from_counts(n_alerts: usize, n_reviewed: usize, n_false_positive: usize) -> Self {
        let precision = (n_reviewed > 0).then(|| {
            let p = (n_reviewed - n_false_positive) as f64 / n_reviewed as f64;
            (p * 1000.0).round() / 1000.0
        });
        ReviewStats {
            n_alerts,
            n_reviewed,
            n_false_positive,
            precision,
            precision_display: precision.map(|p| format!("{:.1}%", p * 100.0)),
        }
    }

    /// Counts straight from the alert rows, ignoring the running counters.
    pub fn recompute<'a>(alerts: impl IntoIterator<Item = &'a Alert>) -> Self {
        let (mut n, mut reviewed, mut fp) = (0, 0, 0);
        for a in alerts {
            n += 1;
            if a.status == Status::Resolved {
                reviewed += 1;
                if a.resolution == Some(Resolution::FalsePositive) {
                    fp += 1;
                }
            }
        }
        Self::from_counts(n, reviewed, fp)
    }
}

#[derive(Default)]
struct State {
    alerts: BTreeMap<String, Alert>,
    by_batch: HashMap<(String, String), String>,
    next_id: u64,
    last_seq: u64,
    n_reviewed: usize,
    n_false_positive: usize,
}

impl State {
    fn insert(&mut self, alert: Alert) {
        if alert.status == Status::Resolved {
            self.n_reviewed += 1;
            if alert.resolution == Some(Resolution::FalsePositive) {
                self.n_false_positive += 1;
            }
        }
        self.by_batch
            .insert((alert.item_id.clone(), alert.batch_id.clone()), alert.alert_id.clone());
        self.alerts.insert(alert.alert_id.clone(), alert);
    }

    fn resolve(&mut self, alert_id: &str, entry: ResolutionEntry) -> Result<&Alert> {
        let a = self
            .alerts
            .get_mut(alert_id)
            .ok_or_else(|| Error::NotFound(format!("alert {alert_id}")))?;
        match a.resolution {
            None => self.n_reviewed += 1,
            Some(Resolution::FalsePositive) => self.n_false_positive -= 1,
            Some(Resolution::TruePositive) => {}
        }
        if entry.resolution == Resolution::FalsePositive {
            self.n_false_positive += 1;
        }
        a.apply(entry);
        Ok(a)
    }

    fn replay(&mut self, event: Event) -> Result<()> {
        let seq = event.seq();
        match event {
            Event::Created { alert, .. } => {
                let n: u64 = alert.alert_id.trim_start_matches("al-").parse().unwrap_or(0);
                self.next_id = self.next_id.max(n + 1);
                self.insert(*alert);
            }
            Event::Resolved { alert_id, entry, .. } => {
                self.resolve(&alert_id, entry)?;
            }
        }
        self.last_seq = seq;
        Ok(())
    }
}

pub struct AlertStore {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    state: RwLock<State>,
}

impl AlertStore {
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_with_clock(dir, Arc::new(SystemClock))
    }

    pub fn open_with_clock(dir: &Path, clock: Arc<dyn Clock>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut state = State {
            next_id: 1,
            ..State::default()
        };
        let snap_path = dir.join(SNAPSHOT);
        if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
            let snap: Snapshot = serde_json::from_str(&text)?;
            if snap.schema_version != STORE_SCHEMA_VERSION {
                return Err(Error::Config(format!(
                    "alert store schema version {} is not {STORE_SCHEMA_VERSION}",
                    snap.schema_version
                )));
            }
            state.next_id = snap.next_id;
            state.last_seq = snap.last_seq;
            for a in snap.alerts {
                state.insert(a);
            }
        }
        let log = dir.join(EVENTS);
        if log.exists() {
            let file = File::open(&log).map_err(|e| Error::io(&log, e))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&log, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    // a torn final write; everything before it is intact
                    Err(e) => {
                        warn!(line = idx + 1, error = %e, "skipping unreadable event");
                        continue;
                    }
                };
                if event.seq() > state.last_seq {
                    state.replay(event)?;
                }
            }
        }
        Ok(AlertStore {
            dir: dir.to_path_buf(),
            clock,
            state: RwLock::new(state),
        })
    }

    fn append(&self, events: &[Event]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(EVENTS);
        let mut text = String::new();
        for e in events {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }

    /// Opens one alert per row. Rows already ingested under the same
    /// `batch_id` are skipped, so re-ingesting a batch is a no-op. Returns
    /// the ids of the alerts created.
    pub fn ingest(&self, rows: &[RankedAlertRow], source: Source, batch_id: &str) -> Result<Vec<String>> {
        let now = self.clock.now();
        let mut st = self.state.write();
        let mut events = Vec::new();
        let mut created = Vec::new();
        let mut seq = st.last_seq;
        let mut next_id = st.next_id;
        let mut seen = std::collections::HashSet::new();
        for row in rows {
            let key = (row.item_id.clone(), batch_id.to_string());
            if st.by_batch.contains_key(&key) || !seen.insert(key) {
                continue;
            }
            let id = format!("al-{next_id:06}");
            next_id += 1;
            seq += 1;
            created.push(id.clone());
            events.push(Event::Created {
                seq,
                alert: Box::new(Alert::from_row(row, id, source, batch_id, now)),
            });
        }
        self.append(&events)?;
        for e in events {
            st.replay(e)?;
        }
        st.next_id = next_id;
        Ok(created)
    }

    pub fn get(&self, alert_id: &str) -> Result<Alert> {
        self.state
            .read()
            .alerts
            .get(alert_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("alert {alert_id}")))
    }

    pub fn len(&self) -> usize {
        self.state.read().alerts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Alerts matching `filter` in ranking order, paged (`page` is 1-based).
    pub fn list(&self, filter: &ListFilter, page: usize, page_size: usize) -> Result<AlertPage> {
        if page == 0 || page_size == 0 {
            return Err(Error::InvalidArgument("page and page_size must be at least 1".into()));
        }
        let st = self.state.read();
        let mut hits: Vec<&Alert> = st.alerts.values().filter(|a| filter.matches(a)).collect();
        hits.sort_by(|a, b| rank(a, b));
        let total = hits.len();
        let alerts = hits
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .cloned()
            .collect();
        Ok(AlertPage {
            total,
            page,
            page_size,
            alerts,
        })
    }

    /// Records a verdict. An already resolved alert is a conflict unless
    /// `force` is set, in which case the new verdict replaces the old one
    /// and both stay in the history.
    pub fn resolve(&self, alert_id: &str, req: ResolveRequest) -> Result<Alert> {
        let resolution = req
            .resolution
            .ok_or_else(|| Error::InvalidArgument("resolution is required".into()))?;
        let mut st = self.state.write();
        let current = st
            .alerts
            .get(alert_id)
            .ok_or_else(|| Error::NotFound(format!("alert {alert_id}")))?;
        if current.status == Status::Resolved && !req.force {
            return Err(Error::Conflict(format!("alert {alert_id} is already resolved")));
        }
        let entry = ResolutionEntry {
            resolution,
            corrected_fields: req.corrected_fields,
            note: req.note,
            resolved_at: self.clock.now(),
        };
        let seq = st.last_seq + 1;
        let event = Event::Resolved {
            seq,
            alert_id: alert_id.to_string(),
            entry: entry.clone(),
        };
        self.append(std::slice::from_ref(&event))?;
        st.replay(event)?;
        Ok(st.alerts[alert_id].clone())
    }

    /// Resolved alerts (resolved at or after `since`) as labeled rows, in
    /// alert id order.
    pub fn export_labels(&self, since: Option<DateTime<Utc>>) -> Vec<LabeledRow> {
        self.state
            .read()
            .alerts
            .values()
            .filter_map(|a| {
                let resolved_at = a.resolved_at?;
                if since.is_some_and(|s| resolved_at < s) {
                    return None;
                }
                Some(LabeledRow {
                    alert_id: a.alert_id.clone(),
                    item_id: a.item_id.clone(),
                    label: u8::from(a.resolution == Some(Resolution::TruePositive)),
                    resolved_at,
                    corrected_fields: a.corrected_fields.clone(),
                    record: a.record.clone(),
                })
            })
            .collect()
    }

    /// Review precision over all alerts, or over alerts created at or
    /// after `since`.
    pub fn review_stats(&self, since: Option<DateTime<Utc>>) -> ReviewStats {
        let st = self.state.read();
        match since {
            None => ReviewStats::from_counts(st.alerts.len(), st.n_reviewed, st.n_false_positive),
            Some(s) => ReviewStats::recompute(st.alerts.values().filter(|a| a.created_at >= s)),
        }
    }

    /// Stats recomputed from the alert rows; always equal to
    /// `review_stats(None)`.
    pub fn recompute_stats(&self) -> ReviewStats {
        ReviewStats::recompute(self.state.read().alerts.values())
    }

    /// Writes the current state to the snapshot and empties the event log.
    /// Returns the number of alerts in the snapshot.
    pub fn compact(&self) -> Result<usize> {
        let st = self.state.write();
        let snap = Snapshot {
            schema_version: STORE_SCHEMA_VERSION,
            last_seq: st.last_seq,
            next_id: st.next_id,
            alerts: st.alerts.values().cloned().collect(),
        };
        let path = self.dir.join(SNAPSHOT);
        let tmp = self.dir.join("snapshot.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&snap)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        // events at or below last_seq are ignored on replay, so a crash
        // between the rename and the truncation is harmless
        let log = self.dir.join(EVENTS);
        File::create(&log).map_err(|e| Error::io(&log, e))?;
        Ok(snap.alerts.len())
    }
}
