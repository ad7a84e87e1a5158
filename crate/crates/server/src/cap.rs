//! Context attribute provider endpoints: observations in, context requests
//! under RPTs, stream management, and the upstream push receiver.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use ztf_client::wire::*;
use ztf_core::cap::{CapService, IngestOutcome, Observation};
use ztf_core::error::Error;
use ztf_core::model::{scopes, CtxId, SubjectId};
use ztf_core::ports::ContextReply;
use ztf_core::stream::{StreamConfig, StreamRequest, SubjectEntry};
use ztf_core::uma::Acquisition;

use crate::{bearer, ApiError, ApiResult, Parties};

#[derive(Clone)]
pub struct CapApp {
    pub cap: Arc<CapService>,
    pub parties: Arc<Parties>,
    /// Account secrets of the users this CAP knows.
    pub users: Arc<HashMap<String, String>>,
}

pub fn router(app: CapApp) -> Router {
    Router::new()
        .route("/observe", post(observe))
        .route("/ctx/{ctx_id}", get(context))
        .route("/streams", post(create_stream))
        .route("/streams/{id}", get(get_stream).patch(set_status).delete(delete_stream))
        .route("/streams/{id}/subjects", post(add_subject))
        .route("/streams/{id}/poll", get(poll))
        .route("/ctx-recv", post(receive))
        .route("/enroll", post(enroll))
        .route("/ctx-ids", get(ctx_ids))
        .route("/upstream/ctx-id", post(register_upstream))
        .route("/upstream/subscribe", post(subscribe_upstream))
        .route("/admin/streams", get(dump_streams))
        .route("/admin/flush", post(flush))
        .route("/admin/acquisitions", get(acquisitions))
        .with_state(app)
}

fn user(app: &CapApp, headers: &HeaderMap) -> ApiResult<SubjectId> {
    let email = crate::header(headers, USER_HEADER).ok_or_else(|| Error::Unauthenticated("no user".into()))?;
    let secret = crate::header(headers, USER_SECRET_HEADER).unwrap_or_default();
    if app.users.get(email).map(String::as_str) != Some(secret) {
        return Err(Error::BadCredential.into());
    }
    Ok(SubjectId::user(email)?)
}

async fn observe(State(app): State<CapApp>, headers: HeaderMap, Json(obs): Json<Observation>) -> ApiResult<Json<IngestOutcome>> {
    let party = app.parties.authenticate(&headers)?;
    if obs.source != party {
        return Err(Error::Forbidden("observation source differs from caller".into()).into());
    }
    Ok(Json(app.cap.ingest(obs).await?))
}

#[derive(Deserialize)]
struct ScopesQuery {
    #[serde(default)]
    scopes: String,
}

async fn context(
    State(app): State<CapApp>,
    headers: HeaderMap,
    Path(ctx_id): Path<String>,
    Query(q): Query<ScopesQuery>,
) -> Result<Response, ApiError> {
    let party = app.parties.authenticate(&headers)?;
    let requested = scopes(q.scopes.split_whitespace())?;
    let reply = app
        .cap
        .handle_context_request(&party, &CtxId(ctx_id), &requested, bearer(&headers))
        .await?;
    Ok(match &reply {
        ContextReply::Challenge { ticket, as_uri } => {
            let challenge = format!(r#"UMA realm="{}", as_uri="{as_uri}", ticket="{ticket}""#, app.cap.issuer());
            (StatusCode::UNAUTHORIZED, [(header::WWW_AUTHENTICATE, challenge)], Json(reply)).into_response()
        }
        ContextReply::Granted { .. } => Json(reply).into_response(),
    })
}

async fn create_stream(
    State(app): State<CapApp>,
    headers: HeaderMap,
    Json(req): Json<StreamRequest>,
) -> ApiResult<(StatusCode, Json<StreamConfig>)> {
    let party = app.parties.authenticate(&headers)?;
    Ok((StatusCode::CREATED, Json(app.cap.create_stream(&party, req)?)))
}

async fn get_stream(State(app): State<CapApp>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<StreamConfig>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.cap.get_stream(&party, &id)?))
}

async fn set_status(
    State(app): State<CapApp>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<StatusChange>,
) -> ApiResult<Json<StreamConfig>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.cap.set_stream_status(&party, &id, req.status).await?))
}

async fn delete_stream(State(app): State<CapApp>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<StreamConfig>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.cap.delete_stream(&party, &id)?))
}

async fn add_subject(
    State(app): State<CapApp>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<AddSubjectRequest>,
) -> ApiResult<Json<SubjectEntry>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.cap.add_subject(&party, &id, &req.subject, req.rpt.as_deref()).await?))
}

async fn poll(State(app): State<CapApp>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Vec<String>>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.cap.poll(&party, &id)?))
}

async fn receive(State(app): State<CapApp>, body: Bytes) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let token = std::str::from_utf8(&body).map_err(|_| Error::MalformedToken("not utf-8".into()))?;
    let accepted = app.cap.receive_upstream(token.trim()).await?;
    Ok((StatusCode::ACCEPTED, Json(Accepted { accepted })))
}

async fn enroll(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Vec<CtxIdEntry>>> {
    let owner = user(&app, &headers)?;
    let ids = app.cap.bootstrap(&owner).await?;
    Ok(Json(ids.into_iter().map(|(ctx_type, ctx_id)| CtxIdEntry { ctx_type, ctx_id }).collect()))
}

async fn ctx_ids(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Vec<CtxIdEntry>>> {
    let owner = user(&app, &headers)?;
    let ids = app.cap.ctx_ids_for(&owner);
    Ok(Json(ids.into_iter().map(|(ctx_type, ctx_id)| CtxIdEntry { ctx_type, ctx_id }).collect()))
}

async fn register_upstream(State(app): State<CapApp>, headers: HeaderMap, Json(req): Json<UpstreamCtxId>) -> ApiResult<Json<()>> {
    let owner = user(&app, &headers)?;
    app.cap.register_upstream_ctx_id(&owner, &req.cap, &req.ctx_type, req.ctx_id)?;
    Ok(Json(()))
}

async fn subscribe_upstream(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Vec<Acquisition>>> {
    let owner = user(&app, &headers)?;
    Ok(Json(app.cap.subscribe_upstream(&owner).await?))
}

async fn dump_streams(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Vec<StreamDump>>> {
    app.parties.require_operator(&headers)?;
    let mut out = Vec::new();
    for config in app.cap.streams() {
        out.push(StreamDump {
            subjects: app.cap.stream_subjects(&config.stream_id)?,
            log: app.cap.stream_log(&config.stream_id)?,
            config,
        });
    }
    Ok(Json(out))
}

async fn flush(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Flushed>> {
    app.parties.require_operator(&headers)?;
    let delivered = app.cap.flush().await;
    Ok(Json(Flushed {
        delivered,
        pending: app.cap.pending_count(),
    }))
}

async fn acquisitions(State(app): State<CapApp>, headers: HeaderMap) -> ApiResult<Json<Vec<Acquisition>>> {
    app.parties.require_operator(&headers)?;
    Ok(Json(app.cap.acquisitions()))
}
