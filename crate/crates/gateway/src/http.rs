//! HTTP API over [`Service`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nestery_core::market::{ContractCommand, Money, OfferFilter, OfferKind, OfferStatus};
use nestery_core::model::{Command, ResourceVector};

use crate::config::ApiConfig;
use crate::error::{ApiError, ErrorKind};
use crate::service::{OfferRequest, ProviderRequest, Service};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.kind {
            ErrorKind::Unauthorized => StatusCode::UNAUTHORIZED,
            ErrorKind::Forbidden => StatusCode::FORBIDDEN,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Validation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.body())).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    service: Arc<Service>,
    tokens: Arc<HashMap<String, String>>,
}

/// Authenticated user id, set by the auth layer.
#[derive(Debug, Clone)]
struct Caller(String);

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<Service>, tokens: HashMap<String, String>) -> Router {
    let state = AppState { service, tokens: Arc::new(tokens) };
    Router::new()
        .route("/status", get(status))
        .route("/commands", post(submit_command))
        .route("/commands/{id}", get(command))
        .route("/offers", get(list_offers).post(register_offer))
        .route("/offers/{id}", get(offer).delete(withdraw_offer))
        .route("/offers/{id}/prices", get(prices))
        .route("/contracts", get(list_contracts).post(negotiate))
        .route("/contracts/{id}", get(contract))
        .route("/contracts/{id}/commands", post(control))
        .route("/contracts/{id}/terminate", post(terminate))
        .route("/users/{id}/provider", post(become_provider))
        .route("/users/{id}/ledger", get(ledger))
        .route("/clock/advance", post(advance))
        .fallback(|| async { ApiError::new("NotFound", "no such endpoint") })
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): State<AppState>, mut req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let Some(user) = token.and_then(|t| st.tokens.get(t)).cloned() else {
        return ApiError::new("Unauthorized", "missing or unknown bearer token").into_response();
    };
    if let Err(e) = st.service.ensure_user(&user) {
        return e.into_response();
    }
    req.extensions_mut().insert(Caller(user));
    next.run(req).await
}

/// Runs a service call off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("bad request body: {e}")))
}

fn parse_id(raw: &str) -> ApiResult<u64> {
    raw.parse().map_err(|_| ApiError::invalid(format!("{raw:?} is not a numeric id")))
}

fn query_num<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key).map(|v| v.parse::<T>().map_err(|_| ApiError::invalid(format!("bad query parameter {key}={v}")))).transpose()
}

async fn status(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.service.status())
}

#[derive(Debug, Deserialize)]
struct CommandBody {
    command: Command,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn submit_command(State(st): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let b: CommandBody = parse_body(&body)?;
    let sub = blocking(move || st.service.submit(b.command, b.idempotency_key)).await?;
    Ok((StatusCode::ACCEPTED, Json(sub)))
}

async fn command(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.service.command(parse_id(&id)?)?))
}

const MIN_KEYS: [&str; 5] = ["min_cores", "min_priority", "min_ram_mib", "min_disk_gib", "min_nics"];

async fn list_offers(State(st): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<impl IntoResponse> {
    let kind = match q.get("kind").map(String::as_str) {
        None => None,
        Some("compute") => Some(OfferKind::Compute),
        Some("storage") => Some(OfferKind::Storage),
        Some(other) => return Err(ApiError::invalid(format!("unknown offer kind {other}"))),
    };
    let status = match q.get("status").map(String::as_str) {
        None => None,
        Some("LISTED") => Some(OfferStatus::Listed),
        Some("TAKEN") => Some(OfferStatus::Taken),
        Some("WITHDRAWN") => Some(OfferStatus::Withdrawn),
        Some(other) => return Err(ApiError::invalid(format!("unknown offer status {other}"))),
    };
    let min_spec = if MIN_KEYS.iter().any(|k| q.contains_key(*k)) {
        Some(ResourceVector::new(
            query_num(&q, "min_cores")?.unwrap_or(0),
            query_num(&q, "min_priority")?.unwrap_or(0),
            query_num(&q, "min_ram_mib")?.unwrap_or(0),
            query_num(&q, "min_disk_gib")?.unwrap_or(0),
            query_num(&q, "min_nics")?.unwrap_or(0),
        ))
    } else {
        None
    };
    let filter = OfferFilter { kind, max_price: query_num::<f64>(&q, "max_price")?.map(Money::from_f64), min_spec, status };
    Ok(Json(st.service.offers(&filter)))
}

async fn register_offer(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: OfferRequest = parse_body(&body)?;
    let offer = blocking(move || st.service.register_offer(&user, req)).await?;
    Ok((StatusCode::CREATED, Json(offer)))
}

async fn offer(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.service.offer(parse_id(&id)?)?))
}

async fn withdraw_offer(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&id)?;
    Ok(Json(blocking(move || st.service.withdraw_offer(&user, id)).await?))
}

async fn prices(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&id)?;
    Ok(Json(st.service.prices(id, query_num(&q, "from")?, query_num(&q, "to")?)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct NegotiateBody {
    offer_id: u64,
}

async fn negotiate(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let b: NegotiateBody = parse_body(&body)?;
    let c = blocking(move || st.service.negotiate(&user, b.offer_id)).await?;
    Ok((StatusCode::CREATED, Json(c)))
}

async fn list_contracts(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>) -> impl IntoResponse {
    Json(st.service.contracts(&user))
}

async fn contract(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.service.contract(&user, parse_id(&id)?)?))
}

#[derive(Debug, Deserialize)]
struct ControlBody {
    command: ContractCommand,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn control(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&id)?;
    let b: ControlBody = parse_body(&body)?;
    Ok(Json(blocking(move || st.service.control(&user, id, b.command, b.idempotency_key)).await?))
}

async fn terminate(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&id)?;
    Ok(Json(blocking(move || st.service.terminate(&user, id)).await?))
}

async fn become_provider(
    State(st): State<AppState>,
    Extension(Caller(user)): Extension<Caller>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: ProviderRequest = parse_body(&body)?;
    Ok(Json(blocking(move || st.service.become_provider(&user, &id, req)).await?))
}

async fn ledger(State(st): State<AppState>, Extension(Caller(user)): Extension<Caller>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.service.ledger(&user, &id)?))
}

#[derive(Debug, Deserialize)]
struct AdvanceBody {
    seconds: u64,
}

async fn advance(State(st): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let b: AdvanceBody = parse_body(&body)?;
    let now = blocking(move || st.service.advance(b.seconds)).await?;
    Ok(Json(serde_json::json!({ "now": now })))
}

/// Drains the queue in the background so `POST /commands` completes
/// without a client waiting on it.
pub fn spawn_worker(service: Arc<Service>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(every);
        loop {
            interval.tick().await;
            let s = service.clone();
            match tokio::task::spawn_blocking(move || s.pump()).await {
                Ok(Err(e)) => eprintln!("worker: {e}"),
                Err(e) => eprintln!("worker: {e}"),
                Ok(Ok(_)) => {}
            }
        }
    })
}

pub async fn serve(config: ApiConfig, service: Arc<Service>) -> Result<(), ApiError> {
    let addr: SocketAddr = config.listen;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ApiError::new("BindFailure", format!("{addr}: {e}")))?;
    let worker = spawn_worker(service.clone(), Duration::from_millis(100));
    eprintln!("nestery listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    let app = router(service, config.tokens);
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()));
    worker.abort();
    result
}
