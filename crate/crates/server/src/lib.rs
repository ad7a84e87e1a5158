//! HTTP front ends for the federation parties.
//!
//! Each router wraps one state machine from `ztf-core`. Callers that act as
//! a party authenticate with the `x-ztf-party` / `x-ztf-party-secret`
//! headers; users and owners use their own credentials where noted.

pub mod authz;
pub mod cap;
pub mod idp;
pub mod rp;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use ztf_client::wire::{PARTY_HEADER, PARTY_SECRET_HEADER};
use ztf_core::error::Error;

/// Error carried across the HTTP boundary as its JSON form.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn status_of(e: &Error) -> StatusCode {
    use Error::*;
    match e {
        InvalidSubject(_) | InvalidContextType(_) | InvalidScope(_) | UnknownScope(_) | EmptyScopes | EmptyEvent
        | UnsupportedContextType(_) | InvalidStreamConfig(_) | ScopeNotDeclared(_) | UnknownContextType(_)
        | UnknownTicket | TicketExpired => StatusCode::BAD_REQUEST,
        BadSignature | AudienceMismatch { .. } | UnknownIssuer(_) | MalformedToken(_) | InvalidPat | BadCredential
        | Unauthenticated(_) => StatusCode::UNAUTHORIZED,
        SubjectNotApproved | ConsentAbsent { .. } | UnknownSource(_) | Forbidden(_) => StatusCode::FORBIDDEN,
        UnknownStream(_) | UnknownPrompt(_) | UnknownCap(_) | UnknownResource(_) | UnknownCtxId(_) => {
            StatusCode::NOT_FOUND
        }
        DuplicateStream(_) | StreamPaused | WrongDeliveryMode | TicketConsumed => StatusCode::CONFLICT,
        VocabularyViolation(_) => StatusCode::UNPROCESSABLE_ENTITY,
        DeliveryFailed(_) | Transport(_) => StatusCode::BAD_GATEWAY,
        NoSigningKey(_) | Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            tracing::warn!(error = %self.0, "request failed");
        } else {
            tracing::debug!(error = %self.0, %status, "request refused");
        }
        (status, Json(self.0)).into_response()
    }
}

/// Shared secrets of the parties allowed to call a service.
#[derive(Debug, Clone, Default)]
pub struct Parties {
    secrets: HashMap<String, String>,
    operator: Option<String>,
}

impl Parties {
    pub fn new(secrets: HashMap<String, String>) -> Self {
        Parties { secrets, operator: None }
    }

    /// Names the party allowed to use administrative endpoints.
    pub fn with_operator(mut self, party: impl Into<String>) -> Self {
        self.operator = Some(party.into());
        self
    }

    pub fn authenticate(&self, headers: &HeaderMap) -> Result<String, Error> {
        let party = header(headers, PARTY_HEADER).ok_or_else(|| Error::Unauthenticated("no party header".into()))?;
        let secret = header(headers, PARTY_SECRET_HEADER).unwrap_or_default();
        match self.secrets.get(party) {
            Some(expected) if expected == secret => Ok(party.to_string()),
            _ => Err(Error::Unauthenticated(format!("party {party} not recognised"))),
        }
    }

    pub fn require_operator(&self, headers: &HeaderMap) -> Result<(), Error> {
        let party = self.authenticate(headers)?;
        if self.operator.as_deref() == Some(party.as_str()) {
            Ok(())
        } else {
            Err(Error::Forbidden("operator only".into()))
        }
    }
}

pub(crate) fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

pub(crate) fn bearer(headers: &HeaderMap) -> Option<&str> {
    header(headers, "authorization")?.strip_prefix("Bearer ").map(str::trim)
}

/// Serves `router` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router.into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(shutdown)
        .await
}

/// Runs `tick` every `period` until the handle is aborted.
pub fn spawn_periodic<F, Fut>(period: Duration, mut tick: F) -> JoinHandle<()>
where
    F: FnMut() -> Fut + Send + 'static,
    Fut: Future<Output = ()> + Send,
{
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        interval.tick().await;
        loop {
            interval.tick().await;
            tick().await;
        }
    })
}
