//! HTTP service: streaming scoring plus the alert review API.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tracing::{info, warn};

use super::{score_response, stream_row, Clock, SystemClock, TtlCache, SCHEMA_VERSION};
use crate::alerts::{AlertStore, ListFilter, ResolveRequest, Source, Status};
use crate::bundle::BundleStore;
use crate::error::Error;
use crate::record::parse_json_record;

pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Clone)]
pub struct AppState {
    pub cache: Arc<TtlCache>,
    pub store: Arc<AlertStore>,
    pub clock: Arc<dyn Clock>,
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::InvalidArgument(_) | Error::Record(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.0,
            Json(json!({ "schema_version": SCHEMA_VERSION, "error": self.1 })),
        )
            .into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Adds `schema_version` to any response body.
#[derive(Serialize)]
pub struct Versioned<T: Serialize> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

fn versioned<T: Serialize>(body: T) -> Json<Versioned<T>> {
    Json(Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/health", get(health))
        .route("/v1/model", get(model))
        .route("/v1/alerts", get(list_alerts))
        .route("/v1/alerts/{id}", get(get_alert))
        .route("/v1/alerts/{id}/resolution", post(resolve_alert))
        .route("/v1/labels/export", get(export_labels))
        .route("/v1/stats/review", get(review_stats))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn score(State(st): State<AppState>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return ApiError::bad_request("body is not UTF-8").into_response(),
    };
    let record = match parse_json_record(text) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request(e.to_string()).into_response(),
    };
    let bundle = match st.cache.get() {
        Ok(b) => b,
        Err(e) => return ApiError(StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    };
    let row = stream_row(&bundle, &record);
    let resp = score_response(&bundle, &row);
    if resp.blocked {
        let batch_id = format!("stream:{}", st.clock.now().format("%Y-%m-%d"));
        if let Err(e) = st.store.ingest(std::slice::from_ref(&row), Source::Stream, &batch_id) {
            warn!(error = %e, item = %row.item_id, "could not record blocked item");
        }
    }
    Json(resp).into_response()
}

async fn health(State(st): State<AppState>) -> Json<super::HealthReport> {
    Json(st.cache.health())
}

async fn model(State(st): State<AppState>) -> Response {
    match st.cache.get() {
        Ok(b) => versioned(b.info()).into_response(),
        Err(e) => ApiError(StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub status: Option<String>,
    pub source: Option<String>,
    pub tier: Option<String>,
    pub page: Option<String>,
    pub page_size: Option<String>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(field: &str, v: Option<&str>) -> Result<Option<T>, ApiError> {
    v.map(|s| {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ApiError::bad_request(format!("bad {field}: {s}")))
    })
    .transpose()
}

fn parse_num<T: std::str::FromStr>(field: &str, v: Option<&str>) -> Result<Option<T>, ApiError> {
    v.map(|s| {
        s.parse()
            .map_err(|_| ApiError::bad_request(format!("bad {field}: {s}")))
    })
    .transpose()
}

impl ListQuery {
    fn parse(&self) -> Result<(ListFilter, usize, usize), ApiError> {
        let filter = ListFilter {
            status: parse_enum::<Status>("status", self.status.as_deref())?,
            source: parse_enum::<Source>("source", self.source.as_deref())?,
            tier: parse_num("tier", self.tier.as_deref())?,
        };
        let page = parse_num("page", self.page.as_deref())?.unwrap_or(1);
        let page_size = parse_num("page_size", self.page_size.as_deref())?.unwrap_or(DEFAULT_PAGE_SIZE);
        Ok((filter, page, page_size))
    }
}

async fn list_alerts(
    State(st): State<AppState>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Versioned<crate::alerts::AlertPage>> {
    let (filter, page, page_size) = q.parse()?;
    Ok(versioned(st.store.list(&filter, page, page_size)?))
}

async fn get_alert(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Versioned<crate::alerts::Alert>> {
    Ok(versioned(st.store.get(&id)?))
}

async fn resolve_alert(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Versioned<crate::alerts::Alert>> {
    let req: ResolveRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(versioned(st.store.resolve(&id, req)?))
}

#[derive(Debug, Default, Deserialize)]
pub struct SinceQuery {
    pub since: Option<String>,
}

impl SinceQuery {
    fn parse(&self) -> Result<Option<DateTime<Utc>>, ApiError> {
        self.since
            .as_deref()
            .map(|s| {
                DateTime::parse_from_rfc3339(s)
                    .map(|d| d.with_timezone(&Utc))
                    .map_err(|_| ApiError::bad_request(format!("since must be RFC 3339: {s}")))
            })
            .transpose()
    }
}

#[derive(Serialize)]
pub struct LabelExport {
    pub rows: Vec<crate::alerts::LabeledRow>,
}

async fn export_labels(State(st): State<AppState>, Query(q): Query<SinceQuery>) -> ApiResult<Versioned<LabelExport>> {
    let since = q.parse()?;
    Ok(versioned(LabelExport {
        rows: st.store.export_labels(since),
    }))
}

async fn review_stats(
    State(st): State<AppState>,
    Query(q): Query<SinceQuery>,
) -> ApiResult<Versioned<crate::alerts::ReviewStats>> {
    let since = q.parse()?;
    Ok(versioned(st.store.review_stats(since)))
}

/// Runs the service until Ctrl-C. Alerts go to `store_dir`, by default
/// `<bundle_dir>/alerts`.
pub async fn serve(bundle_dir: PathBuf, ttl_seconds: u64, port: u16, store_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let ttl = TimeDelta::seconds(i64::try_from(ttl_seconds)?);
    let cache = Arc::new(TtlCache::new(BundleStore::new(&bundle_dir), ttl, clock.clone()));
    let store_dir = store_dir.unwrap_or_else(|| bundle_dir.join("alerts"));
    let store = Arc::new(AlertStore::open(&store_dir)?);
    let app = router(AppState { cache, store, clock });
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
