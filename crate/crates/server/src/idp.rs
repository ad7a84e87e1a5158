//! Identity provider stub endpoints.

use std::sync::Arc;

use axum::extract::State;
use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};

use ztf_client::wire::*;
use ztf_core::idp::IdpService;

use crate::{ApiResult, Parties};

#[derive(Clone)]
pub struct IdpApp {
    pub idp: Arc<IdpService>,
    pub parties: Arc<Parties>,
}

pub fn router(app: IdpApp) -> Router {
    Router::new()
        .route("/token", post(token))
        .route("/compromise", post(compromise))
        .with_state(app)
}

async fn token(State(app): State<IdpApp>, Json(req): Json<IdTokenRequest>) -> ApiResult<Json<IdTokenReply>> {
    let id_token = app
        .idp
        .authenticate_and_issue(&req.issuer, &req.user, req.credential.as_deref(), &req.audience)?;
    Ok(Json(IdTokenReply { id_token }))
}

async fn compromise(State(app): State<IdpApp>, headers: HeaderMap, Json(req): Json<CompromiseRequest>) -> ApiResult<Json<()>> {
    app.parties.require_operator(&headers)?;
    app.idp.set_compromised(&req.issuer, req.compromised)?;
    Ok(Json(()))
}
