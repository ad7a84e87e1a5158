use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure a federation party can report.
///
/// The enum is serializable so that an error raised inside one service
/// crosses the HTTP boundary unchanged and can be matched on by the caller.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "snake_case")]
pub enum Error {
    #[error("invalid subject identifier: {0}")]
    InvalidSubject(String),
    #[error("invalid context type: {0}")]
    InvalidContextType(String),
    #[error("invalid scope: {0:?}")]
    InvalidScope(String),
    #[error("key {0:?} references an undeclared scope")]
    UnknownScope(String),
    #[error("scope set must not be empty")]
    EmptyScopes,
    #[error("event carries no context values")]
    EmptyEvent,

    #[error("no signing key for issuer {0}")]
    NoSigningKey(String),
    #[error("signature verification failed")]
    BadSignature,
    #[error("audience mismatch: expected {expected}, found {found}")]
    AudienceMismatch { expected: String, found: String },
    #[error("unknown issuer {0}")]
    UnknownIssuer(String),
    #[error("malformed token: {0}")]
    MalformedToken(String),

    #[error("context type {0} is not served here")]
    UnsupportedContextType(String),
    #[error("stream already exists: {0}")]
    DuplicateStream(String),
    #[error("unknown stream {0}")]
    UnknownStream(String),
    #[error("invalid stream configuration: {0}")]
    InvalidStreamConfig(String),
    #[error("subject is not approved on this stream")]
    SubjectNotApproved,
    #[error("stream is paused")]
    StreamPaused,
    #[error("delivery failed: {0}")]
    DeliveryFailed(String),
    #[error("operation does not match the stream delivery mode")]
    WrongDeliveryMode,

    #[error("no user consent on record")]
    ConsentAbsent { prompt_id: Option<String> },
    #[error("unknown consent prompt {0}")]
    UnknownPrompt(String),
    #[error("unknown context attribute provider {0}")]
    UnknownCap(String),
    #[error("protection API token is not valid")]
    InvalidPat,
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("scope {0:?} is not declared on the resource")]
    ScopeNotDeclared(String),
    #[error("unknown permission ticket")]
    UnknownTicket,
    #[error("permission ticket expired")]
    TicketExpired,
    #[error("permission ticket already consumed")]
    TicketConsumed,
    #[error("context type {0} is not registered for this owner")]
    UnknownContextType(String),

    #[error("unknown context identifier {0}")]
    UnknownCtxId(String),
    #[error("observation source {0} is not accepted")]
    UnknownSource(String),
    #[error("observation violates the agreed vocabulary: {0}")]
    VocabularyViolation(String),

    #[error("bad credential")]
    BadCredential,
    #[error("unauthenticated: {0}")]
    Unauthenticated(String),
    #[error("forbidden: {0}")]
    Forbidden(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
}
