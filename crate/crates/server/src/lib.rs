//! Read-only HTTP API over loaded audit corpora.
//!
//! Endpoints (all `GET`, JSON bodies):
//!
//! | path | payload |
//! |------|---------|
//! | `/runs` | paginated run summaries, ordered by run id |
//! | `/runs/{id}` | one run summary |
//! | `/runs/{id}/concepts` | concept metric rows (`sort`, `order`, `filter`, `tau`, `cv_cutoff`) |
//! | `/runs/{id}/concepts/{label}` | frequency, stability, reverse index and partners of one concept |
//! | `/runs/{id}/cooccurrence` | top partners of `c`, or the paginated pair table |
//! | `/compare` | frequency diff of runs `a` and `b` |
//! | `/media/{image_id}` | evidence image file from the media root |
//!
//! List endpoints take `offset` and `limit`. Errors are
//! `{"error": code, "message": text}` with status 400 for bad parameters,
//! 404 for unknown runs, concepts or images and 422 when a run's data cannot
//! support the requested metric.

mod cache;
mod error;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use concept_audit::metrics::{FrequencyRow, StabilityRow, DEFAULT_CV_CUTOFF, DEFAULT_TAU};
use concept_audit::mining::{partners, Partner, PairRow, ReverseIndexEntry, DEFAULT_EVIDENCE_LIMIT};
use concept_audit::model::normalize_text;
use concept_audit::report::{RunSummary, DEFAULT_FLOOR, DEFAULT_PARTNERS_K};
use concept_audit::{
    compare_runs, concept_frequency, concept_stability, cooccurrence, normalize_label, reverse_index, AuditCorpus,
    Classification, CoocTable, FrequencyTable, MetricsError, RankMetric, RunDiff, StabilityTable,
};
use concept_audit::report::ReportError;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use cache::{params_digest, CacheKey, SingleFlight};
pub use error::ApiError;

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;
const CACHE_CAPACITY: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("run `{0}` is loaded more than once")]
    DuplicateRun(String),
    #[error("invalid CORS origin `{0}`")]
    InvalidOrigin(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loaded corpora plus memoized tables. Corpora never change once served.
pub struct ServerState {
    runs: BTreeMap<String, Arc<AuditCorpus>>,
    media_root: Option<PathBuf>,
    frequency: SingleFlight<FrequencyTable, MetricsError>,
    stability: SingleFlight<StabilityTable, MetricsError>,
    cooc: SingleFlight<CoocTable, MetricsError>,
    partners: SingleFlight<Vec<Partner>, MetricsError>,
    diffs: SingleFlight<RunDiff, ReportError>,
}

impl ServerState {
    pub fn new(corpora: impl IntoIterator<Item = AuditCorpus>, media_root: Option<PathBuf>) -> Result<Self, ServerError> {
        let mut runs = BTreeMap::new();
        for corpus in corpora {
            let id = corpus.run_id().to_owned();
            if runs.insert(id.clone(), Arc::new(corpus)).is_some() {
                return Err(ServerError::DuplicateRun(id));
            }
        }
        Ok(Self {
            runs,
            media_root,
            frequency: SingleFlight::new(CACHE_CAPACITY),
            stability: SingleFlight::new(CACHE_CAPACITY),
            cooc: SingleFlight::new(CACHE_CAPACITY),
            partners: SingleFlight::new(CACHE_CAPACITY),
            diffs: SingleFlight::new(CACHE_CAPACITY),
        })
    }

    pub fn run_ids(&self) -> impl Iterator<Item = &str> {
        self.runs.keys().map(String::as_str)
    }

    /// Total table computations performed so far (cache misses).
    pub fn computations(&self) -> usize {
        self.frequency.computations()
            + self.stability.computations()
            + self.cooc.computations()
            + self.partners.computations()
            + self.diffs.computations()
    }

    fn run(&self, id: &str) -> Result<&Arc<AuditCorpus>, ApiError> {
        self.runs.get(id).ok_or_else(|| ApiError::unknown_run(id))
    }

    fn frequency_of(&self, id: &str) -> Result<Arc<FrequencyTable>, ApiError> {
        let corpus = self.run(id)?;
        let key = (id.to_owned(), params_digest("frequency", &()));
        Ok(self.frequency.get_or_compute(key, || concept_frequency(corpus))?)
    }

    fn stability_of(&self, id: &str, tau: f64, cv_cutoff: f64) -> Result<Arc<StabilityTable>, ApiError> {
        let corpus = self.run(id)?;
        let key = (id.to_owned(), params_digest("stability", &(tau, cv_cutoff)));
        Ok(self.stability.get_or_compute(key, || concept_stability(corpus, tau, cv_cutoff))?)
    }

    fn cooc_of(&self, id: &str, min_support: f64) -> Result<Arc<CoocTable>, ApiError> {
        let corpus = self.run(id)?;
        let key = (id.to_owned(), params_digest("cooccurrence", &min_support));
        Ok(self.cooc.get_or_compute(key, || cooccurrence(corpus, min_support))?)
    }

    fn partners_of(&self, id: &str, concept: &concept_audit::ConceptLabel, metric: RankMetric) -> Result<Arc<Vec<Partner>>, ApiError> {
        let corpus = self.run(id)?;
        let key = (id.to_owned(), params_digest("partners", &(concept, metric)));
        Ok(self.partners.get_or_compute(key, || partners(corpus, concept, metric))?)
    }

    fn diff_of(&self, a: &str, b: &str, floor: f64) -> Result<Arc<RunDiff>, ApiError> {
        let (ca, cb) = (self.run(a)?, self.run(b)?);
        let key = (format!("{a}\0{b}"), params_digest("compare", &floor));
        Ok(self.diffs.get_or_compute(key, || compare_runs(ca, cb, floor))?)
    }
}

/// The API routes without CORS.
pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/concepts", get(list_concepts))
        .route("/runs/{id}/concepts/{label}", get(concept_detail))
        .route("/runs/{id}/cooccurrence", get(get_cooccurrence))
        .route("/compare", get(get_compare))
        .route("/media/{image_id}", get(get_media))
        .with_state(state)
}

/// CORS for a single UI origin, or any origin when none is configured.
pub fn cors_layer(origin: Option<&str>) -> Result<CorsLayer, ServerError> {
    let allow = match origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServerError::InvalidOrigin(o.to_owned()))?),
    };
    Ok(CorsLayer::new().allow_origin(allow).allow_methods([Method::GET]))
}

pub fn app(state: Arc<ServerState>, cors_origin: Option<&str>) -> Result<Router, ServerError> {
    Ok(router(state).layer(cors_layer(cors_origin)?))
}

pub async fn serve(state: Arc<ServerState>, addr: SocketAddr, cors_origin: Option<&str>) -> Result<(), ServerError> {
    let app = app(state, cors_origin)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, app).await?;
    Ok(())
}

/// Runs table computations off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    match tokio::task::spawn_blocking(f).await {
        Ok(v) => v,
        Err(e) => std::panic::resume_unwind(e.into_panic()),
    }
}

type QueryMap = Query<BTreeMap<String, String>>;

struct Params(BTreeMap<String, String>);

impl Params {
    fn str(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    fn required(&self, name: &str) -> Result<&str, ApiError> {
        self.str(name).ok_or_else(|| ApiError::bad_param(format!("missing parameter `{name}`")))
    }

    fn f64(&self, name: &str, default: f64) -> Result<f64, ApiError> {
        match self.str(name) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| ApiError::bad_param(format!("{name} must be a number (got `{v}`)"))),
        }
    }

    fn usize(&self, name: &str, default: usize) -> Result<usize, ApiError> {
        match self.str(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ApiError::bad_param(format!("{name} must be a non-negative integer (got `{v}`)"))),
        }
    }

    fn metric(&self) -> Result<RankMetric, ApiError> {
        self.str("metric").map_or(Ok(RankMetric::Lift), |m| m.parse().map_err(ApiError::bad_param))
    }

    fn k(&self) -> Result<usize, ApiError> {
        let k = self.usize("k", DEFAULT_PARTNERS_K)?;
        if k < 1 {
            return Err(MetricsError::InvalidParameter { name: "k", value: 0.0, range: "[1,inf)" }.into());
        }
        Ok(k)
    }

    fn page(&self) -> Result<(usize, usize), ApiError> {
        let offset = self.usize("offset", 0)?;
        let limit = self.usize("limit", DEFAULT_LIMIT)?;
        if !(1..=MAX_LIMIT).contains(&limit) {
            return Err(ApiError::bad_param(format!("limit must be in [1,{MAX_LIMIT}] (got {limit})")));
        }
        Ok((offset, limit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<T>,
}

impl<T: Clone> Page<T> {
    fn slice(all: &[T], offset: usize, limit: usize) -> Self {
        let items = all.iter().skip(offset).take(limit).cloned().collect();
        Self { total: all.len(), offset, limit, items }
    }
}

fn summary(corpus: &AuditCorpus) -> RunSummary {
    RunSummary {
        run_id: corpus.run_id().to_owned(),
        metadata: corpus.metadata().clone(),
        prompts: corpus.prompts().len(),
        images: corpus.image_count(),
        concepts: corpus.vocabulary().len(),
    }
}

async fn list_runs(State(state): State<Arc<ServerState>>, Query(q): QueryMap) -> Result<Json<Page<RunSummary>>, ApiError> {
    let (offset, limit) = Params(q).page()?;
    let all: Vec<RunSummary> = state.runs.values().map(|c| summary(c)).collect();
    Ok(Json(Page::slice(&all, offset, limit)))
}

async fn get_run(State(state): State<Arc<ServerState>>, UrlPath(id): UrlPath<String>) -> Result<Json<RunSummary>, ApiError> {
    Ok(Json(summary(state.run(&id)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    P,
    Cv,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub concept: concept_audit::ConceptLabel,
    pub count: u64,
    pub p: f64,
    pub sigma: f64,
    pub cv: f64,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptList {
    pub run_id: String,
    pub tau: f64,
    pub cv_cutoff: f64,
    pub sort: SortKey,
    pub order: SortOrder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
    #[serde(flatten)]
    pub page: Page<ConceptRow>,
}

/// Rows of `C_tau` with their stability numbers. Sorted by the requested key;
/// ties (and equal keys in either direction) fall back to label order.
async fn list_concepts(
    State(state): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): QueryMap,
) -> Result<Json<ConceptList>, ApiError> {
    let q = Params(q);
    let tau = q.f64("tau", DEFAULT_TAU)?;
    let cv_cutoff = q.f64("cv_cutoff", DEFAULT_CV_CUTOFF)?;
    let sort = match q.str("sort").unwrap_or("p") {
        "p" => SortKey::P,
        "cv" => SortKey::Cv,
        "count" => SortKey::Count,
        other => return Err(ApiError::bad_param(format!("unknown sort key `{other}` (expected p, cv or count)"))),
    };
    let order = match q.str("order").unwrap_or("desc") {
        "desc" => SortOrder::Desc,
        "asc" => SortOrder::Asc,
        other => return Err(ApiError::bad_param(format!("unknown order `{other}` (expected asc or desc)"))),
    };
    let (offset, limit) = q.page()?;
    let filter = q.str("filter").map(normalize_text).filter(|f| !f.is_empty());
    state.run(&id)?;

    let state = state.clone();
    let response = blocking(move || -> Result<ConceptList, ApiError> {
        let freq = state.frequency_of(&id)?;
        let stab = state.stability_of(&id, tau, cv_cutoff)?;
        let mut rows: Vec<ConceptRow> = stab
            .rows
            .iter()
            .filter(|r| filter.as_deref().is_none_or(|f| r.concept.as_str().contains(f)))
            .map(|r| ConceptRow {
                concept: r.concept.clone(),
                count: freq.get(&r.concept).map_or(0, |f| f.count),
                p: r.p,
                sigma: r.sigma,
                cv: r.cv,
                classification: r.classification,
            })
            .collect();
        rows.sort_by(|x, y| {
            let key = match sort {
                SortKey::P => x.p.total_cmp(&y.p).then(x.count.cmp(&y.count)),
                SortKey::Cv => x.cv.total_cmp(&y.cv),
                SortKey::Count => x.count.cmp(&y.count).then(x.p.total_cmp(&y.p)),
            };
            let key = if order == SortOrder::Desc { key.reverse() } else { key };
            key.then_with(|| x.concept.cmp(&y.concept))
        });
        Ok(ConceptList { run_id: id, tau, cv_cutoff, sort, order, filter, page: Page::slice(&rows, offset, limit) })
    })
    .await?;
    Ok(Json(response))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetail {
    pub run_id: String,
    pub frequency: FrequencyRow,
    /// Present when the concept is in `C_tau` for the requested `tau`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityRow>,
    pub reverse_index: ReverseIndexEntry,
    pub metric: RankMetric,
    pub k: usize,
    pub min_support: f64,
    pub partners: Vec<Partner>,
}

fn parse_label(raw: &str) -> Result<concept_audit::ConceptLabel, ApiError> {
    normalize_label(raw).map_err(|_| ApiError::unknown_concept(raw))
}

async fn concept_detail(
    State(state): State<Arc<ServerState>>,
    UrlPath((id, label)): UrlPath<(String, String)>,
    Query(q): QueryMap,
) -> Result<Json<ConceptDetail>, ApiError> {
    let q = Params(q);
    let tau = q.f64("tau", DEFAULT_TAU)?;
    let cv_cutoff = q.f64("cv_cutoff", DEFAULT_CV_CUTOFF)?;
    let metric = q.metric()?;
    let k = q.k()?;
    let min_support = q.f64("min_support", 0.0)?;
    concept_audit::metrics::check_unit_interval("min_support", min_support)?;
    let evidence_limit = q.usize("evidence_limit", DEFAULT_EVIDENCE_LIMIT)?;
    let concept = parse_label(&label)?;
    let corpus = state.run(&id)?.clone();

    let state = state.clone();
    let detail = blocking(move || -> Result<ConceptDetail, ApiError> {
        let freq = state.frequency_of(&id)?;
        let frequency = freq.get(&concept).cloned().ok_or_else(|| ApiError::unknown_concept(concept.as_str()))?;
        let stability = state.stability_of(&id, tau, cv_cutoff)?.get(&concept).cloned();
        let reverse_index = reverse_index(&corpus, &concept, evidence_limit)?;
        let partners = top_partners(&state, &id, &concept, metric, k, min_support)?;
        Ok(ConceptDetail { run_id: id, frequency, stability, reverse_index, metric, k, min_support, partners })
    })
    .await?;
    Ok(Json(detail))
}

fn top_partners(
    state: &ServerState,
    id: &str,
    concept: &concept_audit::ConceptLabel,
    metric: RankMetric,
    k: usize,
    min_support: f64,
) -> Result<Vec<Partner>, ApiError> {
    let ranked = state.partners_of(id, concept, metric)?;
    Ok(ranked.iter().filter(|p| p.support >= min_support).take(k).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartnerList {
    pub run_id: String,
    pub concept: concept_audit::ConceptLabel,
    pub metric: RankMetric,
    pub k: usize,
    pub min_support: f64,
    pub partners: Vec<Partner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pub run_id: String,
    pub min_support: f64,
    #[serde(flatten)]
    pub page: Page<PairRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CooccurrenceResponse {
    Partners(PartnerList),
    Pairs(PairList),
}

/// With `c`: the `k` best partners of `c` by `metric` (support at least
/// `min_support`). Without `c`: the pair table, paginated in `(a, b)` order.
async fn get_cooccurrence(
    State(state): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): QueryMap,
) -> Result<Json<CooccurrenceResponse>, ApiError> {
    let q = Params(q);
    let min_support = q.f64("min_support", 0.0)?;
    concept_audit::metrics::check_unit_interval("min_support", min_support)?;
    state.run(&id)?;
    let state = state.clone();
    let response = match q.str("c") {
        Some(raw) => {
            let metric = q.metric()?;
            let k = q.k()?;
            let concept = parse_label(raw)?;
            blocking(move || -> Result<_, ApiError> {
                let partners = top_partners(&state, &id, &concept, metric, k, min_support)?;
                Ok(CooccurrenceResponse::Partners(PartnerList { run_id: id, concept, metric, k, min_support, partners }))
            })
            .await?
        }
        None => {
            let (offset, limit) = q.page()?;
            blocking(move || -> Result<_, ApiError> {
                let table = state.cooc_of(&id, min_support)?;
                Ok(CooccurrenceResponse::Pairs(PairList {
                    run_id: id,
                    min_support,
                    page: Page::slice(&table.rows, offset, limit),
                }))
            })
            .await?
        }
    };
    Ok(Json(response))
}

async fn get_compare(State(state): State<Arc<ServerState>>, Query(q): QueryMap) -> Result<Json<RunDiff>, ApiError> {
    let q = Params(q);
    let a = q.required("a")?.to_owned();
    let b = q.required("b")?.to_owned();
    let floor = q.f64("floor", DEFAULT_FLOOR)?;
    let diff = blocking(move || state.diff_of(&a, &b, floor)).await?;
    Ok(Json(RunDiff::clone(&diff)))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Maps an image's `image_uri` to a file under the media root. URIs with a
/// scheme, absolute paths and `..` components are refused.
fn media_path(root: &Path, uri: &str) -> Option<PathBuf> {
    let uri = uri.strip_prefix("file://").unwrap_or(uri);
    if uri.contains("://") {
        return None;
    }
    let rel = Path::new(uri);
    if !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return None;
    }
    Some(root.join(rel))
}

async fn get_media(
    State(state): State<Arc<ServerState>>,
    UrlPath(image_id): UrlPath<String>,
    Query(q): QueryMap,
) -> Result<Response, ApiError> {
    let q = Params(q);
    let not_found = || ApiError::unknown_image(&image_id);
    let root = state.media_root.as_deref().ok_or_else(not_found)?;
    let image = match q.str("run") {
        Some(run) => state.run(run)?.image(&image_id),
        None => state.runs.values().find_map(|c| c.image(&image_id)),
    }
    .ok_or_else(not_found)?;
    let uri = image.image_uri.as_deref().ok_or_else(not_found)?;
    let path = media_path(root, uri).ok_or_else(not_found)?;
    // Symlinks must not lead outside the root either.
    let (Ok(real), Ok(real_root)) = (tokio::fs::canonicalize(&path).await, tokio::fs::canonicalize(root).await) else {
        return Err(not_found());
    };
    if !real.starts_with(&real_root) {
        return Err(not_found());
    }
    let bytes = tokio::fs::read(&real).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&real))], bytes).into_response())
}
