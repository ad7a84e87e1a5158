//! Relying party endpoints: the protected resource, ctx_id registration,
//! the push receiver and the audit view.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};

use ztf_client::wire::*;
use ztf_core::error::Error;
use ztf_core::model::SubjectId;
use ztf_core::rp::{AccessDecision, AccessRequest, CtxRegistration, Effect, RpAudit, RpService};

use crate::{bearer, header, ApiResult, Parties};

#[derive(Clone)]
pub struct RpApp {
    pub rp: Arc<RpService>,
    pub parties: Arc<Parties>,
}

pub fn router(app: RpApp) -> Router {
    Router::new()
        .route("/resource/{*path}", get(resource))
        .route("/register-ctx-id", post(register_ctx_id))
        .route("/acquire", post(acquire))
        .route("/ctx-recv", post(receive))
        .route("/audit", get(audit))
        .with_state(app)
}

fn status_for(decision: &AccessDecision) -> StatusCode {
    if !decision.identity.verified {
        return StatusCode::UNAUTHORIZED;
    }
    match decision.effect {
        Effect::Allow => StatusCode::OK,
        Effect::StepUp => StatusCode::UNAUTHORIZED,
        Effect::Deny => StatusCode::FORBIDDEN,
    }
}

async fn resource(
    State(app): State<RpApp>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Path(path): Path<String>,
) -> (StatusCode, Json<AccessDecision>) {
    let ip = header(&headers, CLIENT_IP_HEADER)
        .and_then(|v| v.split(',').next())
        .map(|v| v.trim().to_string())
        .unwrap_or_else(|| peer.ip().to_string());
    let req = AccessRequest {
        identity_token: bearer(&headers).map(str::to_string),
        ip,
        device: header(&headers, DEVICE_HEADER).map(str::to_string),
        path: format!("/{path}"),
    };
    let decision = app.rp.handle_access(req).await;
    (status_for(&decision), Json(decision))
}

fn id_token(headers: &HeaderMap) -> ApiResult<&str> {
    Ok(bearer(headers).ok_or_else(|| Error::Unauthenticated("authenticate first".into()))?)
}

async fn register_ctx_id(
    State(app): State<RpApp>,
    headers: HeaderMap,
    Json(req): Json<UpstreamCtxId>,
) -> ApiResult<Json<CtxRegistration>> {
    let token = id_token(&headers)?;
    Ok(Json(app.rp.register_ctx_id(token, &req.cap, &req.ctx_type, req.ctx_id)?))
}

async fn acquire(State(app): State<RpApp>, headers: HeaderMap) -> ApiResult<Json<AcquireReport>> {
    let claims = app.rp.pip_get_identity(id_token(&headers)?)?;
    let user = SubjectId::user(claims.sub)?;
    let mut report = AcquireReport::default();
    for r in app.rp.acquire_all(&user).await {
        match r {
            Ok(a) => report.acquisitions.push(a),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(Json(report))
}

async fn receive(State(app): State<RpApp>, body: Bytes) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let token = std::str::from_utf8(&body).map_err(|_| Error::MalformedToken("not utf-8".into()))?;
    let fresh = app.rp.accept(token.trim())?;
    Ok((StatusCode::ACCEPTED, Json(Accepted { accepted: fresh as usize })))
}

async fn audit(State(app): State<RpApp>, headers: HeaderMap) -> ApiResult<Json<RpAudit>> {
    app.parties.require_operator(&headers)?;
    Ok(Json(app.rp.audit()))
}
