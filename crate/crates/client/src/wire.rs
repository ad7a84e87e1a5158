//! Request and reply bodies shared by the server routers and this client.

use serde::{Deserialize, Serialize};

use ztf_core::authz::ClaimsDocument;
use ztf_core::error::Error;
use ztf_core::model::{ContextType, CtxId, ScopeSet, SubjectId};
use ztf_core::stream::{Receipt, StreamConfig, StreamStatus, SubjectEntry};
use ztf_core::uma::Acquisition;

pub const PARTY_HEADER: &str = "x-ztf-party";
pub const PARTY_SECRET_HEADER: &str = "x-ztf-party-secret";
pub const USER_HEADER: &str = "x-ztf-user";
pub const USER_SECRET_HEADER: &str = "x-ztf-user-secret";
pub const DEVICE_HEADER: &str = "x-ztf-device";
pub const CLIENT_IP_HEADER: &str = "x-forwarded-for";
pub const SET_CONTENT_TYPE: &str = "application/secevent+jwt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatRequest {
    pub owner: SubjectId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtxIdReply {
    pub ctx_id: CtxId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermissionRequest {
    pub ctx_id: CtxId,
    pub scopes: ScopeSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRequest {
    pub ticket: String,
    pub claims: ClaimsDocument,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrospectRequest {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginReply {
    pub session: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentResponse {
    pub approve: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRemoval {
    pub requesting_party: String,
    pub ctx_type: ContextType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharesQuery {
    pub ctx_id: CtxId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusChange {
    pub status: StreamStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddSubjectRequest {
    pub subject: SubjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtxIdEntry {
    pub ctx_type: ContextType,
    pub ctx_id: CtxId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpstreamCtxId {
    pub cap: String,
    pub ctx_type: ContextType,
    pub ctx_id: CtxId,
}

/// A stream as the transmitter sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDump {
    pub config: StreamConfig,
    pub subjects: Vec<SubjectEntry>,
    pub log: Vec<Receipt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flushed {
    pub delivered: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdTokenRequest {
    pub issuer: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential: Option<String>,
    pub audience: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdTokenReply {
    pub id_token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompromiseRequest {
    pub issuer: String,
    pub compromised: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcquireReport {
    pub acquisitions: Vec<Acquisition>,
    pub errors: Vec<Error>,
}
