//! Interfaces a party uses to reach the other parties.
//!
//! Every handle is bound to the calling party: a CAP talking to the
//! authorization server holds an [`AuthzApi`] that authenticates as that CAP.
//! The `local` adapters call the state machines in-process; the HTTP client
//! crate provides networked implementations of the same traits.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::authz::{ClaimsDocument, GrantOutcome, Introspection, PermissionTicket, PolicyEvaluation, ProtectionApiToken};
use crate::cap::{IngestOutcome, Observation};
use crate::error::{Error, Result};
use crate::model::{ContextType, CtxId, ScopeSet, SubjectId};
use crate::stream::{StreamConfig, StreamRequest, StreamStatus, SubjectEntry};

/// Authorization server operations available to CAPs and requesting parties.
#[async_trait]
pub trait AuthzApi: Send + Sync {
    /// The authorization server's URI, quoted in challenges.
    fn uri(&self) -> String;
    async fn issue_pat(&self, owner: &SubjectId) -> Result<ProtectionApiToken>;
    async fn register_resource(&self, pat: &str, ctx_type: &ContextType, scopes: &ScopeSet) -> Result<CtxId>;
    async fn permission_ticket(&self, pat: &str, ctx_id: &CtxId, scopes: &ScopeSet) -> Result<PermissionTicket>;
    async fn grant_rpt(&self, ticket: &str, claims: &ClaimsDocument) -> Result<GrantOutcome>;
    async fn introspect(&self, token: &str) -> Result<Introspection>;
}

/// Answer to a context request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ContextReply {
    /// No usable RPT: go to `as_uri` with this ticket.
    Challenge { ticket: String, as_uri: String },
    /// The RPT checked out at introspection. `set` is absent when the
    /// granted view is currently empty.
    Granted {
        set: Option<String>,
        introspected: bool,
        scopes: ScopeSet,
    },
}

/// CAP operations available to a requesting party or an observation source.
#[async_trait]
pub trait CapApi: Send + Sync {
    fn uri(&self) -> String;
    async fn request_context(&self, ctx_id: &CtxId, scopes: &ScopeSet, rpt: Option<&str>) -> Result<ContextReply>;
    async fn create_stream(&self, request: StreamRequest) -> Result<StreamConfig>;
    async fn get_stream(&self, stream_id: &str) -> Result<StreamConfig>;
    async fn set_stream_status(&self, stream_id: &str, status: StreamStatus) -> Result<StreamConfig>;
    async fn delete_stream(&self, stream_id: &str) -> Result<StreamConfig>;
    async fn add_subject(&self, stream_id: &str, subject: &SubjectId, rpt: Option<&str>) -> Result<SubjectEntry>;
    async fn poll(&self, stream_id: &str) -> Result<Vec<String>>;
    async fn observe(&self, observation: Observation) -> Result<IngestOutcome>;
}

/// Resolves a CAP URI to a handle authenticated as the caller.
pub trait CapDirectory: Send + Sync {
    fn cap(&self, uri: &str) -> Result<Arc<dyn CapApi>>;
}

/// Delivers a compact SET to a push endpoint.
#[async_trait]
pub trait SetPusher: Send + Sync {
    async fn push(&self, endpoint: &str, token: &str) -> Result<()>;
}

/// The receiving side of a push stream.
#[async_trait]
pub trait SetReceiver: Send + Sync {
    async fn receive(&self, token: &str) -> Result<()>;
}

/// Outcome of the ticket-for-token exchange, kept with its evaluation for traces.
pub fn evaluation_of(outcome: &GrantOutcome) -> &PolicyEvaluation {
    match outcome {
        GrantOutcome::Granted { evaluation, .. } | GrantOutcome::Denied { evaluation, .. } => evaluation,
    }
}

pub mod local {
    //! In-process adapters.

    use super::*;
    use crate::authz::AuthzServer;
    use crate::cap::CapService;

    pub struct LocalAuthz {
        pub server: Arc<AuthzServer>,
        pub party: String,
    }

    impl LocalAuthz {
        pub fn new(server: Arc<AuthzServer>, party: impl Into<String>) -> Arc<Self> {
            Arc::new(LocalAuthz {
                server,
                party: party.into(),
            })
        }
    }

    #[async_trait]
    impl AuthzApi for LocalAuthz {
        fn uri(&self) -> String {
            self.server.issuer().to_string()
        }

        async fn issue_pat(&self, owner: &SubjectId) -> Result<ProtectionApiToken> {
            self.server.issue_pat(&self.party, owner)
        }

        async fn register_resource(&self, pat: &str, ctx_type: &ContextType, scopes: &ScopeSet) -> Result<CtxId> {
            let holder = self.server.check_pat(pat)?;
            if holder.cap != self.party {
                return Err(Error::InvalidPat);
            }
            self.server.register_resource(pat, ctx_type, scopes)
        }

        async fn permission_ticket(&self, pat: &str, ctx_id: &CtxId, scopes: &ScopeSet) -> Result<PermissionTicket> {
            let holder = self.server.check_pat(pat)?;
            if holder.cap != self.party {
                return Err(Error::InvalidPat);
            }
            self.server.issue_permission_ticket_with_pat(pat, ctx_id, scopes)
        }

        async fn grant_rpt(&self, ticket: &str, claims: &ClaimsDocument) -> Result<GrantOutcome> {
            if claims.requesting_party != self.party {
                return Err(Error::Forbidden("claims name another requesting party".into()));
            }
            self.server.grant_rpt(ticket, claims)
        }

        async fn introspect(&self, token: &str) -> Result<Introspection> {
            Ok(self.server.introspect(token))
        }
    }

    pub struct LocalCap {
        pub cap: Arc<CapService>,
        pub party: String,
    }

    #[async_trait]
    impl CapApi for LocalCap {
        fn uri(&self) -> String {
            self.cap.issuer().to_string()
        }

        async fn request_context(&self, ctx_id: &CtxId, scopes: &ScopeSet, rpt: Option<&str>) -> Result<ContextReply> {
            self.cap.handle_context_request(&self.party, ctx_id, scopes, rpt).await
        }

        async fn create_stream(&self, request: StreamRequest) -> Result<StreamConfig> {
            self.cap.create_stream(&self.party, request)
        }

        async fn get_stream(&self, stream_id: &str) -> Result<StreamConfig> {
            self.cap.get_stream(&self.party, stream_id)
        }

        async fn set_stream_status(&self, stream_id: &str, status: StreamStatus) -> Result<StreamConfig> {
            self.cap.set_stream_status(&self.party, stream_id, status).await
        }

        async fn delete_stream(&self, stream_id: &str) -> Result<StreamConfig> {
            self.cap.delete_stream(&self.party, stream_id)
        }

        async fn add_subject(&self, stream_id: &str, subject: &SubjectId, rpt: Option<&str>) -> Result<SubjectEntry> {
            self.cap.add_subject(&self.party, stream_id, subject, rpt).await
        }

        async fn poll(&self, stream_id: &str) -> Result<Vec<String>> {
            self.cap.poll(&self.party, stream_id)
        }

        async fn observe(&self, observation: Observation) -> Result<IngestOutcome> {
            if observation.source != self.party {
                return Err(Error::Forbidden("observation source differs from caller".into()));
            }
            self.cap.ingest(observation).await
        }
    }

    /// CAPs by URI, each reached as `party`.
    #[derive(Default)]
    pub struct LocalCapDirectory {
        caps: RwLock<HashMap<String, Arc<CapService>>>,
        party: String,
    }

    impl LocalCapDirectory {
        pub fn new(party: impl Into<String>) -> Self {
            LocalCapDirectory {
                caps: RwLock::new(HashMap::new()),
                party: party.into(),
            }
        }

        pub fn insert(&self, cap: Arc<CapService>) {
            self.caps.write().insert(cap.issuer().to_string(), cap);
        }
    }

    impl CapDirectory for LocalCapDirectory {
        fn cap(&self, uri: &str) -> Result<Arc<dyn CapApi>> {
            let cap = self
                .caps
                .read()
                .get(uri)
                .cloned()
                .ok_or_else(|| Error::UnknownCap(uri.to_string()))?;
            Ok(Arc::new(LocalCap {
                cap,
                party: self.party.clone(),
            }))
        }
    }

    /// Routes pushes to registered receivers by endpoint URI.
    #[derive(Default)]
    pub struct LocalPushRouter {
        receivers: RwLock<HashMap<String, Arc<dyn SetReceiver>>>,
    }

    impl LocalPushRouter {
        pub fn new() -> Arc<Self> {
            Arc::new(Self::default())
        }

        pub fn attach(&self, endpoint: impl Into<String>, receiver: Arc<dyn SetReceiver>) {
            self.receivers.write().insert(endpoint.into(), receiver);
        }

        pub fn detach(&self, endpoint: &str) {
            self.receivers.write().remove(endpoint);
        }
    }

    #[async_trait]
    impl SetPusher for LocalPushRouter {
        async fn push(&self, endpoint: &str, token: &str) -> Result<()> {
            let receiver = self
                .receivers
                .read()
                .get(endpoint)
                .cloned()
                .ok_or_else(|| Error::DeliveryFailed(format!("no receiver at {endpoint}")))?;
            receiver.receive(token).await
        }
    }
}
