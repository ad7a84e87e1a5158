//! HTTP client for the federation services.
//!
//! Parties name each other by logical URI (`https://cap1.example`). A
//! [`Directory`] maps those origins to the addresses the services actually
//! listen on, so the same configuration works for loopback test topologies.

pub mod wire;

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ztf_core::authz::{
    AuthzEvent, ClaimsDocument, ConsentPrompt, GrantOutcome, Introspection, PermissionTicket, Policy, PolicyRule,
    ProtectionApiToken, ResourceDescriptor, Share,
};
use ztf_core::cap::{IngestOutcome, Observation};
use ztf_core::error::{Error, Result};
use ztf_core::model::{ContextType, CtxId, ScopeSet, SubjectId};
use ztf_core::ports::{AuthzApi, CapApi, CapDirectory, ContextReply, SetPusher};
use ztf_core::rp::{AccessDecision, CtxRegistration, RpAudit};
use ztf_core::stream::{StreamConfig, StreamRequest, StreamStatus, SubjectEntry};
use ztf_core::uma::Acquisition;

use wire::*;

/// Logical origin to listening base URL.
#[derive(Debug, Default)]
pub struct Directory {
    routes: RwLock<BTreeMap<String, String>>,
}

fn split_origin(uri: &str) -> (&str, &str) {
    let after_scheme = uri.find("://").map(|i| i + 3).unwrap_or(0);
    match uri[after_scheme..].find('/') {
        Some(i) => uri.split_at(after_scheme + i),
        None => (uri, ""),
    }
}

impl Directory {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn insert(&self, origin: impl Into<String>, base: impl Into<String>) {
        let base = base.into();
        self.routes.write().insert(origin.into(), base.trim_end_matches('/').to_string());
    }

    pub fn remove(&self, origin: &str) {
        self.routes.write().remove(origin);
    }

    pub fn routes(&self) -> BTreeMap<String, String> {
        self.routes.read().clone()
    }

    /// Rewrites a logical URI onto the listening address of its origin.
    pub fn resolve(&self, uri: &str) -> Result<String> {
        let (origin, path) = split_origin(uri);
        self.routes
            .read()
            .get(origin)
            .map(|base| format!("{base}{path}"))
            .ok_or_else(|| Error::Transport(format!("no route to {origin}")))
    }
}

/// A party name and its shared secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub party: String,
    pub secret: String,
}

impl Credentials {
    pub fn new(party: impl Into<String>, secret: impl Into<String>) -> Self {
        Credentials {
            party: party.into(),
            secret: secret.into(),
        }
    }
}

/// Shared HTTP plumbing: routing, party headers and error decoding.
#[derive(Clone)]
pub struct Agent {
    http: reqwest::Client,
    dir: Arc<Directory>,
    creds: Option<Credentials>,
}

impl Agent {
    pub fn new(dir: Arc<Directory>) -> Self {
        Agent {
            http: reqwest::Client::new(),
            dir,
            creds: None,
        }
    }

    /// The same agent, authenticating as `creds`.
    pub fn acting_as(&self, creds: Credentials) -> Self {
        Agent {
            creds: Some(creds),
            ..self.clone()
        }
    }

    pub fn party(&self) -> Option<&str> {
        self.creds.as_ref().map(|c| c.party.as_str())
    }

    pub fn directory(&self) -> &Arc<Directory> {
        &self.dir
    }

    pub fn request(&self, method: Method, uri: &str) -> Result<RequestBuilder> {
        let mut rb = self.http.request(method, self.dir.resolve(uri)?);
        if let Some(c) = &self.creds {
            rb = rb.header(PARTY_HEADER, &c.party).header(PARTY_SECRET_HEADER, &c.secret);
        }
        Ok(rb)
    }

    async fn send_raw(rb: RequestBuilder) -> Result<(StatusCode, Vec<u8>)> {
        let resp = rb.send().await.map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.bytes().await.map_err(|e| Error::Transport(e.to_string()))?;
        Ok((status, body.to_vec()))
    }

    fn decode<T: DeserializeOwned>(status: StatusCode, body: &[u8]) -> Result<T> {
        if status.is_success() {
            let body = if body.is_empty() { b"null".as_slice() } else { body };
            return serde_json::from_slice(body).map_err(|e| Error::Transport(format!("bad reply body: {e}")));
        }
        Err(serde_json::from_slice::<Error>(body).unwrap_or_else(|_| {
            Error::Transport(format!("{status}: {}", String::from_utf8_lossy(body)))
        }))
    }

    pub async fn send<T: DeserializeOwned>(rb: RequestBuilder) -> Result<T> {
        let (status, body) = Self::send_raw(rb).await?;
        Self::decode(status, &body)
    }

    pub async fn get<T: DeserializeOwned>(&self, uri: &str) -> Result<T> {
        Self::send(self.request(Method::GET, uri)?).await
    }

    pub async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, uri: &str, body: &B) -> Result<T> {
        Self::send(self.request(Method::POST, uri)?.json(body)).await
    }
}

fn join(base: &str, path: &str) -> String {
    format!("{}{path}", base.trim_end_matches('/'))
}

/// The authorization server, reached as one party.
pub struct HttpAuthz {
    agent: Agent,
    uri: String,
}

impl HttpAuthz {
    pub fn new(agent: Agent, uri: impl Into<String>) -> Arc<Self> {
        Arc::new(HttpAuthz { agent, uri: uri.into() })
    }

    pub async fn sweep(&self) -> Result<Vec<String>> {
        self.agent.post(&join(&self.uri, "/sweep"), &()).await
    }

    pub async fn log(&self) -> Result<Vec<AuthzEvent>> {
        self.agent.get(&join(&self.uri, "/log")).await
    }
}

#[async_trait]
impl AuthzApi for HttpAuthz {
    fn uri(&self) -> String {
        self.uri.clone()
    }

    async fn issue_pat(&self, owner: &SubjectId) -> Result<ProtectionApiToken> {
        self.agent.post(&join(&self.uri, "/pat"), &PatRequest { owner: owner.clone() }).await
    }

    async fn register_resource(&self, pat: &str, ctx_type: &ContextType, scopes: &ScopeSet) -> Result<CtxId> {
        let body = RegisterRequest {
            ctx_type: ctx_type.clone(),
            scopes: scopes.clone(),
        };
        let rb = self.agent.request(Method::POST, &join(&self.uri, "/resource"))?.bearer_auth(pat).json(&body);
        Agent::send::<CtxIdReply>(rb).await.map(|r| r.ctx_id)
    }

    async fn permission_ticket(&self, pat: &str, ctx_id: &CtxId, scopes: &ScopeSet) -> Result<PermissionTicket> {
        let body = PermissionRequest {
            ctx_id: ctx_id.clone(),
            scopes: scopes.clone(),
        };
        let rb = self.agent.request(Method::POST, &join(&self.uri, "/permission"))?.bearer_auth(pat).json(&body);
        Agent::send(rb).await
    }

    async fn grant_rpt(&self, ticket: &str, claims: &ClaimsDocument) -> Result<GrantOutcome> {
        let body = TokenRequest {
            ticket: ticket.to_string(),
            claims: claims.clone(),
        };
        self.agent.post(&join(&self.uri, "/token"), &body).await
    }

    async fn introspect(&self, token: &str) -> Result<Introspection> {
        let body = IntrospectRequest { token: token.to_string() };
        self.agent.post(&join(&self.uri, "/introspect"), &body).await
    }
}

/// A CAP, reached as one party.
pub struct HttpCap {
    agent: Agent,
    uri: String,
}

impl HttpCap {
    pub fn new(agent: Agent, uri: impl Into<String>) -> Arc<Self> {
        Arc::new(HttpCap { agent, uri: uri.into() })
    }

    fn at(&self, path: &str) -> String {
        join(&self.uri, path)
    }

    pub async fn streams(&self) -> Result<Vec<StreamDump>> {
        self.agent.get(&self.at("/admin/streams")).await
    }

    pub async fn flush(&self) -> Result<Flushed> {
        self.agent.post(&self.at("/admin/flush"), &()).await
    }

    pub async fn acquisitions(&self) -> Result<Vec<Acquisition>> {
        self.agent.get(&self.at("/admin/acquisitions")).await
    }
}

#[async_trait]
impl CapApi for HttpCap {
    fn uri(&self) -> String {
        self.uri.clone()
    }

    async fn request_context(&self, ctx_id: &CtxId, scopes: &ScopeSet, rpt: Option<&str>) -> Result<ContextReply> {
        let list = scopes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
        let mut rb = self
            .agent
            .request(Method::GET, &self.at(&format!("/ctx/{ctx_id}")))?
            .query(&[("scopes", list)]);
        if let Some(rpt) = rpt {
            rb = rb.bearer_auth(rpt);
        }
        let (status, body) = Agent::send_raw(rb).await?;
        if status == StatusCode::UNAUTHORIZED {
            if let Ok(reply @ ContextReply::Challenge { .. }) = serde_json::from_slice(&body) {
                return Ok(reply);
            }
        }
        Agent::decode(status, &body)
    }

    async fn create_stream(&self, request: StreamRequest) -> Result<StreamConfig> {
        self.agent.post(&self.at("/streams"), &request).await
    }

    async fn get_stream(&self, stream_id: &str) -> Result<StreamConfig> {
        self.agent.get(&self.at(&format!("/streams/{stream_id}"))).await
    }

    async fn set_stream_status(&self, stream_id: &str, status: StreamStatus) -> Result<StreamConfig> {
        let rb = self
            .agent
            .request(Method::PATCH, &self.at(&format!("/streams/{stream_id}")))?
            .json(&StatusChange { status });
        Agent::send(rb).await
    }

    async fn delete_stream(&self, stream_id: &str) -> Result<StreamConfig> {
        Agent::send(self.agent.request(Method::DELETE, &self.at(&format!("/streams/{stream_id}")))?).await
    }

    async fn add_subject(&self, stream_id: &str, subject: &SubjectId, rpt: Option<&str>) -> Result<SubjectEntry> {
        let body = AddSubjectRequest {
            subject: subject.clone(),
            rpt: rpt.map(str::to_string),
        };
        self.agent.post(&self.at(&format!("/streams/{stream_id}/subjects")), &body).await
    }

    async fn poll(&self, stream_id: &str) -> Result<Vec<String>> {
        self.agent.get(&self.at(&format!("/streams/{stream_id}/poll"))).await
    }

    async fn observe(&self, observation: Observation) -> Result<IngestOutcome> {
        self.agent.post(&self.at("/observe"), &observation).await
    }
}

/// Any CAP, reached as the agent's party.
pub struct HttpCapDirectory {
    agent: Agent,
}

impl HttpCapDirectory {
    pub fn new(agent: Agent) -> Arc<Self> {
        Arc::new(HttpCapDirectory { agent })
    }
}

impl CapDirectory for HttpCapDirectory {
    fn cap(&self, uri: &str) -> Result<Arc<dyn CapApi>> {
        self.agent.directory().resolve(uri).map_err(|_| Error::UnknownCap(uri.to_string()))?;
        Ok(HttpCap::new(self.agent.clone(), uri))
    }
}

/// Pushes SETs to receiver endpoints.
pub struct HttpPusher {
    agent: Agent,
}

impl HttpPusher {
    pub fn new(agent: Agent) -> Arc<Self> {
        Arc::new(HttpPusher { agent })
    }
}

#[async_trait]
impl SetPusher for HttpPusher {
    async fn push(&self, endpoint: &str, token: &str) -> Result<()> {
        let rb = self
            .agent
            .request(Method::POST, endpoint)
            .map_err(|e| Error::DeliveryFailed(e.to_string()))?
            .header(reqwest::header::CONTENT_TYPE, SET_CONTENT_TYPE)
            .body(token.to_string());
        Agent::send::<Accepted>(rb)
            .await
            .map(|_| ())
            .map_err(|e| match e {
                Error::Transport(m) => Error::DeliveryFailed(m),
                other => other,
            })
    }
}

/// A resource owner's session at the authorization server.
pub struct OwnerClient {
    agent: Agent,
    uri: String,
    session: String,
}

impl OwnerClient {
    pub async fn login(agent: Agent, uri: impl Into<String>, email: &str, password: &str) -> Result<Self> {
        let uri = uri.into();
        let body = LoginRequest {
            email: email.to_string(),
            password: password.to_string(),
        };
        let reply: LoginReply = agent.post(&join(&uri, "/login"), &body).await?;
        Ok(OwnerClient {
            agent,
            uri,
            session: reply.session,
        })
    }

    fn req(&self, method: Method, path: &str) -> Result<RequestBuilder> {
        Ok(self.agent.request(method, &join(&self.uri, path))?.bearer_auth(&self.session))
    }

    pub async fn resources(&self) -> Result<Vec<ResourceDescriptor>> {
        Agent::send(self.req(Method::GET, "/resources")?).await
    }

    pub async fn shares(&self, ctx_id: &CtxId) -> Result<Vec<Share>> {
        Agent::send(self.req(Method::GET, "/shares")?.query(&[("ctx_id", ctx_id.as_str())])).await
    }

    pub async fn policy(&self) -> Result<Policy> {
        Agent::send(self.req(Method::GET, "/policy")?).await
    }

    pub async fn set_policy(&self, rule: &PolicyRule) -> Result<Policy> {
        Agent::send(self.req(Method::PUT, "/policy")?.json(rule)).await
    }

    pub async fn remove_policy(&self, requesting_party: &str, ctx_type: &ContextType) -> Result<Policy> {
        let body = PolicyRemoval {
            requesting_party: requesting_party.to_string(),
            ctx_type: ctx_type.clone(),
        };
        Agent::send(self.req(Method::DELETE, "/policy")?.json(&body)).await
    }

    pub async fn consent_prompts(&self) -> Result<Vec<ConsentPrompt>> {
        Agent::send(self.req(Method::GET, "/consent")?).await
    }

    pub async fn respond_consent(&self, prompt_id: &str, approve: bool) -> Result<ConsentPrompt> {
        Agent::send(self.req(Method::POST, &format!("/consent/{prompt_id}"))?.json(&ConsentResponse { approve })).await
    }
}

/// A user talking to a CAP with their account there.
pub struct CapUserClient {
    agent: Agent,
    uri: String,
    user: String,
    secret: String,
}

impl CapUserClient {
    pub fn new(agent: Agent, uri: impl Into<String>, user: impl Into<String>, secret: impl Into<String>) -> Self {
        CapUserClient {
            agent,
            uri: uri.into(),
            user: user.into(),
            secret: secret.into(),
        }
    }

    fn req(&self, method: Method, path: &str) -> Result<RequestBuilder> {
        Ok(self
            .agent
            .request(method, &join(&self.uri, path))?
            .header(USER_HEADER, &self.user)
            .header(USER_SECRET_HEADER, &self.secret))
    }

    /// Registers the user's resources; fails with `ConsentAbsent` until the
    /// owner approved this CAP at the authorization server.
    pub async fn enroll(&self) -> Result<Vec<CtxIdEntry>> {
        Agent::send(self.req(Method::POST, "/enroll")?).await
    }

    pub async fn ctx_ids(&self) -> Result<Vec<CtxIdEntry>> {
        Agent::send(self.req(Method::GET, "/ctx-ids")?).await
    }

    pub async fn register_upstream(&self, entry: &UpstreamCtxId) -> Result<()> {
        Agent::send(self.req(Method::POST, "/upstream/ctx-id")?.json(entry)).await
    }

    pub async fn subscribe_upstream(&self) -> Result<Vec<Acquisition>> {
        Agent::send(self.req(Method::POST, "/upstream/subscribe")?).await
    }
}

/// A browser-like user agent in front of an RP.
pub struct RpClient {
    agent: Agent,
    uri: String,
}

/// What an RP answered to a resource request.
#[derive(Debug, Clone)]
pub struct AccessReply {
    pub status: u16,
    pub decision: AccessDecision,
}

impl RpClient {
    pub fn new(agent: Agent, uri: impl Into<String>) -> Self {
        RpClient { agent, uri: uri.into() }
    }

    pub async fn access(&self, path: &str, id_token: Option<&str>, ip: &str, device: Option<&str>) -> Result<AccessReply> {
        let path = path.trim_start_matches('/');
        let mut rb = self
            .agent
            .request(Method::GET, &join(&self.uri, &format!("/resource/{path}")))?
            .header(CLIENT_IP_HEADER, ip);
        if let Some(t) = id_token {
            rb = rb.bearer_auth(t);
        }
        if let Some(d) = device {
            rb = rb.header(DEVICE_HEADER, d);
        }
        let (status, body) = Agent::send_raw(rb).await?;
        match serde_json::from_slice::<AccessDecision>(&body) {
            Ok(decision) => Ok(AccessReply {
                status: status.as_u16(),
                decision,
            }),
            Err(_) => Err(Agent::decode::<serde::de::IgnoredAny>(status, &body)
                .err()
                .unwrap_or_else(|| Error::Transport("reply carried no decision".into()))),
        }
    }

    pub async fn register_ctx_id(&self, id_token: &str, entry: &UpstreamCtxId) -> Result<CtxRegistration> {
        let rb = self
            .agent
            .request(Method::POST, &join(&self.uri, "/register-ctx-id"))?
            .bearer_auth(id_token)
            .json(entry);
        Agent::send(rb).await
    }

    pub async fn acquire(&self, id_token: &str) -> Result<AcquireReport> {
        Agent::send(self.agent.request(Method::POST, &join(&self.uri, "/acquire"))?.bearer_auth(id_token)).await
    }

    pub async fn audit(&self) -> Result<RpAudit> {
        self.agent.get(&join(&self.uri, "/audit")).await
    }
}

/// The IdP stub; `issuer` in each call selects which hosted IdP answers.
pub struct IdpClient {
    agent: Agent,
    uri: String,
}

impl IdpClient {
    pub fn new(agent: Agent, uri: impl Into<String>) -> Self {
        IdpClient { agent, uri: uri.into() }
    }

    pub async fn token(&self, issuer: &str, user: &str, credential: Option<&str>, audience: &str) -> Result<String> {
        let body = IdTokenRequest {
            issuer: issuer.to_string(),
            user: user.to_string(),
            credential: credential.map(str::to_string),
            audience: audience.to_string(),
        };
        let reply: IdTokenReply = self.agent.post(&join(&self.uri, "/token"), &body).await?;
        Ok(reply.id_token)
    }

    pub async fn set_compromised(&self, issuer: &str, compromised: bool) -> Result<()> {
        let body = CompromiseRequest {
            issuer: issuer.to_string(),
            compromised,
        };
        self.agent.post(&join(&self.uri, "/compromise"), &body).await
    }
}
