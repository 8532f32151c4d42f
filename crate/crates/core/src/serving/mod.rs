//! Streaming scoring with a TTL-cached model bundle, and daily batch scoring.

pub mod batch;
pub mod http;

use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::bundle::{BundleStore, ModelBundle};
use crate::error::{Error, Result};
use crate::explain::suspected_issues;
use crate::impact::{business_impact, RankedAlertRow};
use crate::record::ItemRecord;

pub const SCHEMA_VERSION: u32 = 1;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.0.lock() = t;
    }

    pub fn advance(&self, by: TimeDelta) {
        *self.0.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Clone)]
struct Loaded {
    bundle: Arc<ModelBundle>,
    loaded_at: DateTime<Utc>,
}

#[derive(Default)]
struct Health {
    warning: Option<String>,
    /// After a failed reload, no new attempt before this instant.
    retry_at: Option<DateTime<Utc>>,
}

/// Serves the bundle loaded at `loaded_at` while `now - loaded_at < ttl`,
/// then reloads the latest published bundle. Reloads happen outside the
/// read lock and swap the shared pointer, so readers see the old or the new
/// bundle, never a mix. A failed reload keeps the old bundle in service.
pub struct TtlCache {
    store: BundleStore,
    ttl: TimeDelta,
    clock: Arc<dyn Clock>,
    current: RwLock<Option<Loaded>>,
    reloading: Mutex<()>,
    health: Mutex<Health>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub schema_version: u32,
    /// `ok`, or `degraded` when no bundle is loaded or the last reload failed.
    pub status: String,
    pub model_version: Option<String>,
    pub loaded_at: Option<DateTime<Utc>>,
    pub ttl_seconds: f64,
    pub ttl_remaining_seconds: Option<f64>,
    pub warning: Option<String>,
}

impl TtlCache {
    /// Tries an initial load; an empty or unreadable store leaves the cache
    /// empty and degraded rather than failing.
    pub fn new(store: BundleStore, ttl: TimeDelta, clock: Arc<dyn Clock>) -> Self {
        let cache = TtlCache {
            store,
            ttl,
            clock,
            current: RwLock::new(None),
            reloading: Mutex::new(()),
            health: Mutex::new(Health::default()),
        };
        let now = cache.clock.now();
        if let Err(e) = cache.reload(now) {
            warn!(error = %e, "no bundle at startup");
        }
        cache
    }

    pub fn ttl(&self) -> TimeDelta {
        self.ttl
    }

    fn fresh(&self, now: DateTime<Utc>) -> Option<Arc<ModelBundle>> {
        let cur = self.current.read();
        cur.as_ref()
            .filter(|l| now - l.loaded_at < self.ttl)
            .map(|l| l.bundle.clone())
    }

    fn stale(&self) -> Option<Arc<ModelBundle>> {
        self.current.read().as_ref().map(|l| l.bundle.clone())
    }

    fn reload(&self, now: DateTime<Utc>) -> Result<Arc<ModelBundle>> {
        match self.store.load_latest() {
            Ok(bundle) => {
                let bundle = Arc::new(bundle);
                info!(version = %bundle.version, "loaded bundle");
                *self.current.write() = Some(Loaded {
                    bundle: bundle.clone(),
                    loaded_at: now,
                });
                *self.health.lock() = Health::default();
                Ok(bundle)
            }
            Err(e) => {
                let retry = self.ttl.min(TimeDelta::seconds(30));
                *self.health.lock() = Health {
                    warning: Some(format!("bundle reload failed: {e}")),
                    retry_at: Some(now + retry),
                };
                Err(e)
            }
        }
    }

    /// The bundle to serve right now.
    pub fn get(&self) -> Result<Arc<ModelBundle>> {
        let now = self.clock.now();
        if let Some(b) = self.fresh(now) {
            return Ok(b);
        }
        let throttled = self.health.lock().retry_at.is_some_and(|t| now < t);
        if throttled {
            return self.stale().ok_or_else(unavailable);
        }
        match self.reloading.try_lock() {
            Some(_guard) => {
                // another caller may have reloaded while we waited for the read
                if let Some(b) = self.fresh(now) {
                    return Ok(b);
                }
                self.reload(now).or_else(|e| {
                    warn!(error = %e, "serving stale bundle");
                    self.stale().ok_or(e)
                })
            }
            None => match self.stale() {
                Some(b) => Ok(b),
                None => {
                    let _wait = self.reloading.lock();
                    self.stale().ok_or_else(unavailable)
                }
            },
        }
    }

    pub fn health(&self) -> HealthReport {
        let now = self.clock.now();
        let cur = self.current.read().clone();
        let warning = self.health.lock().warning.clone();
        let ttl_seconds = self.ttl.num_milliseconds() as f64 / 1000.0;
        HealthReport {
            schema_version: SCHEMA_VERSION,
            status: if cur.is_some() && warning.is_none() {
                "ok"
            } else {
                "degraded"
            }
            .into(),
            model_version: cur.as_ref().map(|l| l.bundle.version.clone()),
            loaded_at: cur.as_ref().map(|l| l.loaded_at),
            ttl_seconds,
            ttl_remaining_seconds: cur
                .as_ref()
                .map(|l| ((l.loaded_at + self.ttl - now).num_milliseconds() as f64 / 1000.0).max(0.0)),
            warning,
        }
    }
}

fn unavailable() -> Error {
    Error::NotFound("no model bundle loaded".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub schema_version: u32,
    pub item_id: String,
    pub is_anomaly: bool,
    pub score: f64,
    pub suspected_issues: Vec<String>,
    pub priority_tier: u8,
    pub business_impact: f64,
    pub blocked: bool,
    pub model_version: String,
}

/// GNB-only scoring for the streaming path, as an alert row (forest fields
/// false and 0).
pub fn stream_row(bundle: &ModelBundle, record: &ItemRecord) -> RankedAlertRow {
    let breakdown = bundle.gnb.score(record);
    let is_anomaly = breakdown.total > bundle.gnb.epsilon;
    let issues = if is_anomaly {
        suspected_issues(&breakdown.per_feature, &bundle.gnb.feature_names, bundle.gnb.epsilon_s).issues
    } else {
        Vec::new()
    };
    let impact = business_impact(record, &bundle.schema.baseline, &bundle.tier_bounds);
    RankedAlertRow {
        item_id: record.item_id.clone(),
        is_anomaly,
        is_anomaly_gnb: is_anomaly,
        is_anomaly_rf: false,
        score_gnb: breakdown.total,
        score_rf: 0.0,
        priority_tier: impact.priority_tier,
        business_impact: impact.business_impact,
        profit_loss: impact.profit_loss,
        foregone_revenue: impact.foregone_revenue,
        suspected_issues: issues,
        feature_scores: breakdown.per_feature,
        record: record.clone(),
    }
}

/// `blocked` means anomalous at the highest priority tier.
pub fn score_response(bundle: &ModelBundle, row: &RankedAlertRow) -> ScoreResponse {
    ScoreResponse {
        schema_version: SCHEMA_VERSION,
        item_id: row.item_id.clone(),
        is_anomaly: row.is_anomaly,
        score: row.score_gnb,
        suspected_issues: row.suspected_issues.clone(),
        priority_tier: row.priority_tier,
        business_impact: row.business_impact,
        blocked: row.is_anomaly && row.priority_tier == 0,
        model_version: bundle.version.clone(),
    }
}

pub fn stream_score(bundle: &ModelBundle, record: &ItemRecord) -> ScoreResponse {
    score_response(bundle, &stream_row(bundle, record))
}
