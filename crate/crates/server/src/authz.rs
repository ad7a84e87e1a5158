//! Authorization server endpoints: the protection API for CAPs, the token and
//! introspection endpoints for requesting parties, and the owner-facing
//! resource, share, policy and consent endpoints.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};

use ztf_client::wire::*;
use ztf_core::authz::{
    AuthzEvent, AuthzServer, ConsentPrompt, GrantOutcome, Introspection, PermissionTicket, Policy, PolicyRule,
    ProtectionApiToken, ResourceDescriptor, Share,
};
use ztf_core::error::Error;
use ztf_core::model::SubjectId;

use crate::{bearer, ApiResult, Parties};

#[derive(Clone)]
pub struct AuthzApp {
    pub server: Arc<AuthzServer>,
    pub parties: Arc<Parties>,
}

pub fn router(app: AuthzApp) -> Router {
    Router::new()
        .route("/pat", post(pat))
        .route("/resource", post(register))
        .route("/permission", post(permission))
        .route("/token", post(token))
        .route("/introspect", post(introspect))
        .route("/login", post(login))
        .route("/resources", get(resources))
        .route("/shares", get(shares))
        .route("/policy", get(policy).put(set_policy).delete(remove_policy))
        .route("/consent", get(consent_prompts))
        .route("/consent/{prompt_id}", post(respond_consent))
        .route("/sweep", post(sweep))
        .route("/log", get(log))
        .with_state(app)
}

/// The PAT in the bearer header, checked to belong to the calling CAP.
fn caller_pat<'a>(app: &AuthzApp, headers: &'a HeaderMap) -> ApiResult<&'a str> {
    let party = app.parties.authenticate(headers)?;
    let pat = bearer(headers).ok_or(Error::InvalidPat)?;
    if app.server.check_pat(pat)?.cap != party {
        return Err(Error::InvalidPat.into());
    }
    Ok(pat)
}

fn owner(app: &AuthzApp, headers: &HeaderMap) -> ApiResult<SubjectId> {
    let session = bearer(headers).ok_or_else(|| Error::Unauthenticated("no session".into()))?;
    Ok(app.server.session_owner(session)?)
}

async fn pat(State(app): State<AuthzApp>, headers: HeaderMap, Json(req): Json<PatRequest>) -> ApiResult<Json<ProtectionApiToken>> {
    let party = app.parties.authenticate(&headers)?;
    Ok(Json(app.server.issue_pat(&party, &req.owner)?))
}

async fn register(State(app): State<AuthzApp>, headers: HeaderMap, Json(req): Json<RegisterRequest>) -> ApiResult<Json<CtxIdReply>> {
    let pat = caller_pat(&app, &headers)?;
    let ctx_id = app.server.register_resource(pat, &req.ctx_type, &req.scopes)?;
    Ok(Json(CtxIdReply { ctx_id }))
}

async fn permission(
    State(app): State<AuthzApp>,
    headers: HeaderMap,
    Json(req): Json<PermissionRequest>,
) -> ApiResult<Json<PermissionTicket>> {
    let pat = caller_pat(&app, &headers)?;
    Ok(Json(app.server.issue_permission_ticket_with_pat(pat, &req.ctx_id, &req.scopes)?))
}

async fn token(State(app): State<AuthzApp>, headers: HeaderMap, Json(req): Json<TokenRequest>) -> ApiResult<Json<GrantOutcome>> {
    let party = app.parties.authenticate(&headers)?;
    if req.claims.requesting_party != party {
        return Err(Error::Forbidden("claims name another requesting party".into()).into());
    }
    Ok(Json(app.server.grant_rpt(&req.ticket, &req.claims)?))
}

async fn introspect(
    State(app): State<AuthzApp>,
    headers: HeaderMap,
    Json(req): Json<IntrospectRequest>,
) -> ApiResult<Json<Introspection>> {
    app.parties.authenticate(&headers)?;
    Ok(Json(app.server.introspect(&req.token)))
}

async fn login(State(app): State<AuthzApp>, Json(req): Json<LoginRequest>) -> ApiResult<Json<LoginReply>> {
    let session = app.server.login(&req.email, &req.password)?;
    Ok(Json(LoginReply { session }))
}

async fn resources(State(app): State<AuthzApp>, headers: HeaderMap) -> ApiResult<Json<Vec<ResourceDescriptor>>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.list_resources(&owner)))
}

async fn shares(State(app): State<AuthzApp>, headers: HeaderMap, Query(q): Query<SharesQuery>) -> ApiResult<Json<Vec<Share>>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.list_shares(&owner, &q.ctx_id)?))
}

async fn policy(State(app): State<AuthzApp>, headers: HeaderMap) -> ApiResult<Json<Policy>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.policy(&owner)))
}

async fn set_policy(State(app): State<AuthzApp>, headers: HeaderMap, Json(rule): Json<PolicyRule>) -> ApiResult<Json<Policy>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.set_policy(&owner, rule)?))
}

async fn remove_policy(
    State(app): State<AuthzApp>,
    headers: HeaderMap,
    Json(req): Json<PolicyRemoval>,
) -> ApiResult<Json<Policy>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.remove_policy(&owner, &req.requesting_party, &req.ctx_type)?))
}

async fn consent_prompts(State(app): State<AuthzApp>, headers: HeaderMap) -> ApiResult<Json<Vec<ConsentPrompt>>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.consent_prompts(&owner)))
}

async fn respond_consent(
    State(app): State<AuthzApp>,
    headers: HeaderMap,
    Path(prompt_id): Path<String>,
    Json(req): Json<ConsentResponse>,
) -> ApiResult<Json<ConsentPrompt>> {
    let owner = owner(&app, &headers)?;
    Ok(Json(app.server.respond_consent(&owner, &prompt_id, req.approve)?))
}

async fn sweep(State(app): State<AuthzApp>, headers: HeaderMap) -> ApiResult<Json<Vec<String>>> {
    app.parties.require_operator(&headers)?;
    Ok(Json(app.server.revocation_sweep()))
}

async fn log(State(app): State<AuthzApp>, headers: HeaderMap) -> ApiResult<Json<Vec<AuthzEvent>>> {
    app.parties.require_operator(&headers)?;
    Ok(Json(app.server.log()))
}
