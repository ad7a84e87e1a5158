//! User authorization server: context registration under a protection API
//! token, owner policies, permission tickets, requesting party tokens and
//! introspection.
//!
//! Every operation runs under one lock, so ticket consumption and RPT
//! issuance are atomic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::ids::IdGen;
use crate::model::{ContextType, CtxId, ScopeSet, SubjectId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthzConfig {
    pub issuer: String,
    /// Seconds a permission ticket stays redeemable.
    pub ticket_ttl: i64,
    /// Seconds an RPT stays active.
    pub rpt_ttl: i64,
    /// Approve PAT consent prompts without waiting for the owner.
    pub auto_consent: bool,
}

impl AuthzConfig {
    pub fn new(issuer: impl Into<String>) -> Self {
        AuthzConfig {
            issuer: issuer.into(),
            ticket_ttl: 120,
            rpt_ttl: 3600,
            auto_consent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionApiToken {
    pub token: String,
    pub cap: String,
    pub owner: SubjectId,
    pub issued_at: i64,
    pub consent_record: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub ctx_id: CtxId,
    pub ctx_type: ContextType,
    pub cap_origin: String,
    pub scopes: ScopeSet,
    pub owner: SubjectId,
}

/// A `(ctx_id, scopes)` pair, used both for requests and for grants.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permission {
    pub ctx_id: CtxId,
    pub scopes: ScopeSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionTicket {
    pub ticket: String,
    pub cap: String,
    pub requested: Vec<Permission>,
    pub created_at: i64,
    pub expires_at: i64,
    pub consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestingPartyToken {
    pub token: String,
    pub requesting_party: String,
    pub owner: SubjectId,
    pub grants: Vec<Permission>,
    pub issued_at: i64,
    pub expires_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Allow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub requesting_party: String,
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
    #[serde(default = "allow")]
    pub effect: Effect,
}

fn allow() -> Effect {
    Effect::Allow
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub owner: SubjectId,
    pub rules: Vec<PolicyRule>,
}

impl Policy {
    /// Scopes the owner allows `party` to read on resources of `ctx_type`.
    /// Deny by default: no rule means the empty set.
    pub fn allowance(&self, party: &str, ctx_type: &ContextType) -> ScopeSet {
        self.rules
            .iter()
            .filter(|r| r.requesting_party == party && &r.ctx_type == ctx_type)
            .flat_map(|r| r.scopes.iter().cloned())
            .collect()
    }
}

/// What a requesting party presents about itself when redeeming a ticket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimsDocument {
    pub requesting_party: String,
    #[serde(default)]
    pub attestations: BTreeMap<String, Value>,
}

impl ClaimsDocument {
    pub fn for_party(party: impl Into<String>) -> Self {
        ClaimsDocument {
            requesting_party: party.into(),
            attestations: BTreeMap::new(),
        }
    }
}

/// The owner-policy evaluation behind a grant decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub requesting_party: String,
    pub requested: Vec<Permission>,
    pub allowed: Vec<Permission>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GrantOutcome {
    Granted {
        rpt: RequestingPartyToken,
        evaluation: PolicyEvaluation,
    },
    Denied {
        reason: String,
        evaluation: PolicyEvaluation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Rpt,
    Pat,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Introspection {
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_type: Option<TokenKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requesting_party: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<SubjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<String>,
    #[serde(default)]
    pub grants: Vec<Permission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp: Option<i64>,
}

impl Introspection {
    pub fn inactive() -> Self {
        Self::default()
    }

    /// Scopes granted on `ctx_id`, if any.
    pub fn scopes_for(&self, ctx_id: &CtxId) -> Option<ScopeSet> {
        let scopes: ScopeSet = self
            .grants
            .iter()
            .filter(|g| &g.ctx_id == ctx_id)
            .flat_map(|g| g.scopes.iter().cloned())
            .collect();
        (!scopes.is_empty()).then_some(scopes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentState {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentPrompt {
    pub prompt_id: String,
    pub cap: String,
    pub owner: SubjectId,
    pub state: ConsentState,
    pub created_at: i64,
    #[serde(default)]
    pub automatic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub requesting_party: String,
    pub scopes: ScopeSet,
}

/// Append-only record of state changes, used for replay audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuthzEvent {
    PatIssued { token: String, cap: String, owner: String, superseded: Option<String> },
    ResourceRegistered { ctx_id: CtxId, owner: String, cap: String, ctx_type: ContextType },
    TicketIssued { ticket: String, cap: String },
    TicketConsumed { ticket: String },
    RptIssued { token: String, requesting_party: String, grants: Vec<Permission>, allowance: Vec<Permission>, at: i64 },
    GrantDenied { ticket: String, requesting_party: String },
    PolicyChanged { owner: String, requesting_party: String, ctx_type: ContextType, scopes: ScopeSet },
    RptRevoked { token: String, at: i64 },
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct AuthzState {
    caps: BTreeSet<String>,
    accounts: HashMap<String, String>,
    sessions: HashMap<String, String>,
    prompts: BTreeMap<String, ConsentPrompt>,
    /// `cap|owner` -> prompt id of the latest decision or pending prompt.
    consents: HashMap<String, String>,
    pats: HashMap<String, ProtectionApiToken>,
    live_pats: HashMap<String, String>,
    resources: BTreeMap<CtxId, ResourceDescriptor>,
    /// `owner|cap|ctx_type` -> ctx_id.
    resource_index: HashMap<String, CtxId>,
    policies: BTreeMap<String, Policy>,
    tickets: HashMap<String, PermissionTicket>,
    rpts: HashMap<String, RequestingPartyToken>,
    revoked: BTreeSet<String>,
    log: Vec<AuthzEvent>,
}

fn pair_key(cap: &str, owner: &SubjectId) -> String {
    format!("{cap}|{}", owner.email())
}

impl AuthzState {
    fn policy(&self, owner: &SubjectId) -> Option<&Policy> {
        self.policies.get(owner.email())
    }

    fn allowance_for(&self, party: &str, resource: &ResourceDescriptor) -> ScopeSet {
        self.policy(&resource.owner)
            .map(|p| p.allowance(party, &resource.ctx_type))
            .unwrap_or_default()
            .intersection(&resource.scopes)
            .cloned()
            .collect()
    }

    fn pat_is_live(&self, token: &str) -> Option<&ProtectionApiToken> {
        let pat = self.pats.get(token)?;
        (self.live_pats.get(&pair_key(&pat.cap, &pat.owner)).map(String::as_str) == Some(token)
            && !self.revoked.contains(token))
        .then_some(pat)
    }
}

pub struct AuthzServer {
    config: AuthzConfig,
    clock: SharedClock,
    ids: Arc<IdGen>,
    state: Mutex<AuthzState>,
}

impl std::fmt::Debug for AuthzServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthzServer").field("config", &self.config).finish()
    }
}

impl AuthzServer {
    pub fn new(config: AuthzConfig, clock: SharedClock, ids: Arc<IdGen>) -> Self {
        AuthzServer {
            config,
            clock,
            ids,
            state: Mutex::new(AuthzState::default()),
        }
    }

    pub fn config(&self) -> &AuthzConfig {
        &self.config
    }

    pub fn issuer(&self) -> &str {
        &self.config.issuer
    }

    pub fn register_cap(&self, cap: impl Into<String>) {
        self.state.lock().caps.insert(cap.into());
    }

    pub fn add_account(&self, email: impl Into<String>, password: impl Into<String>) {
        self.state.lock().accounts.insert(email.into(), password.into());
    }

    /// Owner login; returns a bearer session token.
    pub fn login(&self, email: &str, password: &str) -> Result<String> {
        let mut st = self.state.lock();
        if st.accounts.get(email).map(String::as_str) != Some(password) {
            return Err(Error::BadCredential);
        }
        let token = self.ids.next("session");
        st.sessions.insert(token.clone(), email.to_string());
        Ok(token)
    }

    pub fn session_owner(&self, session: &str) -> Result<SubjectId> {
        let st = self.state.lock();
        let email = st
            .sessions
            .get(session)
            .ok_or_else(|| Error::Unauthenticated("unknown session".into()))?;
        SubjectId::user(email.clone())
    }

    // --- consent -----------------------------------------------------------

    pub fn consent_prompts(&self, owner: &SubjectId) -> Vec<ConsentPrompt> {
        self.state
            .lock()
            .prompts
            .values()
            .filter(|p| p.owner.user == owner.user)
            .cloned()
            .collect()
    }

    /// Records the owner's answer to a consent prompt. Answering twice is a no-op.
    pub fn respond_consent(&self, owner: &SubjectId, prompt_id: &str, approve: bool) -> Result<ConsentPrompt> {
        let mut st = self.state.lock();
        let prompt = st
            .prompts
            .get_mut(prompt_id)
            .filter(|p| p.owner.user == owner.user)
            .ok_or_else(|| Error::UnknownPrompt(prompt_id.to_string()))?;
        if prompt.state == ConsentState::Pending {
            prompt.state = if approve { ConsentState::Approved } else { ConsentState::Rejected };
        }
        Ok(prompt.clone())
    }

    // --- protection API ----------------------------------------------------

    /// Issues a PAT for `(cap, owner)` once the owner consented, revoking any prior PAT.
    pub fn issue_pat(&self, cap: &str, owner: &SubjectId) -> Result<ProtectionApiToken> {
        let now = self.clock.now();
        let owner = owner.owner();
        let mut st = self.state.lock();
        if !st.caps.contains(cap) {
            return Err(Error::UnknownCap(cap.to_string()));
        }
        let key = pair_key(cap, &owner);
        let existing = st.consents.get(&key).and_then(|id| st.prompts.get(id)).cloned();
        let consent = match existing {
            Some(p) if p.state == ConsentState::Approved => p,
            Some(p) if p.state == ConsentState::Pending && !self.config.auto_consent => {
                return Err(Error::ConsentAbsent { prompt_id: Some(p.prompt_id) });
            }
            Some(p) if p.state == ConsentState::Rejected => {
                return Err(Error::ConsentAbsent { prompt_id: Some(p.prompt_id) });
            }
            _ => {
                let prompt = ConsentPrompt {
                    prompt_id: self.ids.next("consent"),
                    cap: cap.to_string(),
                    owner: owner.clone(),
                    state: if self.config.auto_consent {
                        ConsentState::Approved
                    } else {
                        ConsentState::Pending
                    },
                    created_at: now,
                    automatic: self.config.auto_consent,
                };
                st.consents.insert(key.clone(), prompt.prompt_id.clone());
                st.prompts.insert(prompt.prompt_id.clone(), prompt.clone());
                if prompt.state != ConsentState::Approved {
                    return Err(Error::ConsentAbsent { prompt_id: Some(prompt.prompt_id) });
                }
                prompt
            }
        };
        let pat = ProtectionApiToken {
            token: self.ids.next("pat"),
            cap: cap.to_string(),
            owner: owner.clone(),
            issued_at: now,
            consent_record: consent.prompt_id,
        };
        let superseded = st.live_pats.insert(key, pat.token.clone());
        if let Some(old) = &superseded {
            st.revoked.insert(old.clone());
        }
        st.pats.insert(pat.token.clone(), pat.clone());
        st.log.push(AuthzEvent::PatIssued {
            token: pat.token.clone(),
            cap: cap.to_string(),
            owner: owner.email().to_string(),
            superseded,
        });
        Ok(pat)
    }

    /// Resolves a live PAT.
    pub fn check_pat(&self, pat: &str) -> Result<ProtectionApiToken> {
        self.state.lock().pat_is_live(pat).cloned().ok_or(Error::InvalidPat)
    }

    /// Registers the PAT owner's context of `ctx_type` at the PAT's CAP.
    /// Idempotent per `(owner, cap, ctx_type)`; the declared scopes are replaced.
    pub fn register_resource(&self, pat: &str, ctx_type: &ContextType, scopes: &ScopeSet) -> Result<CtxId> {
        let mut st = self.state.lock();
        let pat = st.pat_is_live(pat).cloned().ok_or(Error::InvalidPat)?;
        if scopes.is_empty() {
            return Err(Error::EmptyScopes);
        }
        let index_key = format!("{}|{}|{}", pat.owner.email(), pat.cap, ctx_type);
        if let Some(existing) = st.resource_index.get(&index_key).cloned() {
            if let Some(r) = st.resources.get_mut(&existing) {
                r.scopes = scopes.clone();
            }
            return Ok(existing);
        }
        let ctx_id = CtxId(self.ids.next("ctx"));
        st.resource_index.insert(index_key, ctx_id.clone());
        st.resources.insert(
            ctx_id.clone(),
            ResourceDescriptor {
                ctx_id: ctx_id.clone(),
                ctx_type: ctx_type.clone(),
                cap_origin: pat.cap.clone(),
                scopes: scopes.clone(),
                owner: pat.owner.clone(),
            },
        );
        st.log.push(AuthzEvent::ResourceRegistered {
            ctx_id: ctx_id.clone(),
            owner: pat.owner.email().to_string(),
            cap: pat.cap.clone(),
            ctx_type: ctx_type.clone(),
        });
        Ok(ctx_id)
    }

    pub fn resource(&self, ctx_id: &CtxId) -> Option<ResourceDescriptor> {
        self.state.lock().resources.get(ctx_id).cloned()
    }

    /// Issues a single-use ticket for `scopes` on a resource registered by `cap`.
    pub fn issue_permission_ticket(&self, cap: &str, ctx_id: &CtxId, scopes: &ScopeSet) -> Result<PermissionTicket> {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let resource = st
            .resources
            .get(ctx_id)
            .filter(|r| r.cap_origin == cap)
            .ok_or_else(|| Error::UnknownResource(ctx_id.to_string()))?;
        if let Some(s) = scopes.iter().find(|s| !resource.scopes.contains(*s)) {
            return Err(Error::ScopeNotDeclared(s.to_string()));
        }
        let ticket = PermissionTicket {
            ticket: self.ids.next("pt"),
            cap: cap.to_string(),
            requested: vec![Permission {
                ctx_id: ctx_id.clone(),
                scopes: scopes.clone(),
            }],
            created_at: now,
            expires_at: now + self.config.ticket_ttl,
            consumed: false,
        };
        st.tickets.insert(ticket.ticket.clone(), ticket.clone());
        st.log.push(AuthzEvent::TicketIssued {
            ticket: ticket.ticket.clone(),
            cap: cap.to_string(),
        });
        Ok(ticket)
    }

    /// Ticket issuance on behalf of a PAT holder: the PAT's CAP must have
    /// registered the resource and the PAT owner must own it.
    pub fn issue_permission_ticket_with_pat(&self, pat: &str, ctx_id: &CtxId, scopes: &ScopeSet) -> Result<PermissionTicket> {
        let pat = self.check_pat(pat)?;
        let owner = self
            .resource(ctx_id)
            .ok_or_else(|| Error::UnknownResource(ctx_id.to_string()))?
            .owner;
        if owner.user != pat.owner.user {
            return Err(Error::Forbidden("resource is owned by another user".into()));
        }
        self.issue_permission_ticket(&pat.cap, ctx_id, scopes)
    }

    /// Redeems a ticket. The granted scopes are exactly the intersection of the
    /// request with what the owner's policy allows the requesting party.
    pub fn grant_rpt(&self, ticket: &str, claims: &ClaimsDocument) -> Result<GrantOutcome> {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let t = st.tickets.get(ticket).ok_or(Error::UnknownTicket)?;
        if t.consumed {
            return Err(Error::TicketConsumed);
        }
        if now > t.expires_at {
            return Err(Error::TicketExpired);
        }
        let requested = t.requested.clone();
        st.tickets.get_mut(ticket).expect("present").consumed = true;
        st.log.push(AuthzEvent::TicketConsumed { ticket: ticket.to_string() });

        let party = &claims.requesting_party;
        let mut allowance = Vec::new();
        let mut grants = Vec::new();
        let mut owner = None;
        for req in &requested {
            let Some(resource) = st.resources.get(&req.ctx_id) else { continue };
            owner.get_or_insert_with(|| resource.owner.clone());
            let allowed = st.allowance_for(party, resource);
            allowance.push(Permission {
                ctx_id: req.ctx_id.clone(),
                scopes: allowed.clone(),
            });
            let granted: ScopeSet = req.scopes.intersection(&allowed).cloned().collect();
            if !granted.is_empty() {
                grants.push(Permission {
                    ctx_id: req.ctx_id.clone(),
                    scopes: granted,
                });
            }
        }
        let evaluation = PolicyEvaluation {
            requesting_party: party.clone(),
            requested,
            allowed: grants.clone(),
        };
        let Some(owner) = owner.filter(|_| !grants.is_empty()) else {
            st.log.push(AuthzEvent::GrantDenied {
                ticket: ticket.to_string(),
                requesting_party: party.clone(),
            });
            return Ok(GrantOutcome::Denied {
                reason: "owner policy grants none of the requested scopes".into(),
                evaluation,
            });
        };
        let rpt = RequestingPartyToken {
            token: self.ids.next("rpt"),
            requesting_party: party.clone(),
            owner,
            grants,
            issued_at: now,
            expires_at: now + self.config.rpt_ttl,
        };
        st.rpts.insert(rpt.token.clone(), rpt.clone());
        st.log.push(AuthzEvent::RptIssued {
            token: rpt.token.clone(),
            requesting_party: party.clone(),
            grants: rpt.grants.clone(),
            allowance,
            at: now,
        });
        Ok(GrantOutcome::Granted { rpt, evaluation })
    }

    /// Reports whether a token is currently valid. Unknown tokens are inactive.
    pub fn introspect(&self, token: &str) -> Introspection {
        let now = self.clock.now();
        let mut st = self.state.lock();
        if st.revoked.contains(token) {
            return Introspection::inactive();
        }
        if let Some(rpt) = st.rpts.get(token).cloned() {
            if now >= rpt.expires_at {
                // Expiry is final even if the clock is later wound back.
                st.revoked.insert(token.to_string());
                return Introspection::inactive();
            }
            return Introspection {
                active: true,
                token_type: Some(TokenKind::Rpt),
                requesting_party: Some(rpt.requesting_party),
                owner: Some(rpt.owner),
                cap: None,
                grants: rpt.grants,
                exp: Some(rpt.expires_at),
            };
        }
        if let Some(pat) = st.pat_is_live(token).cloned() {
            return Introspection {
                active: true,
                token_type: Some(TokenKind::Pat),
                requesting_party: None,
                owner: Some(pat.owner),
                cap: Some(pat.cap),
                grants: Vec::new(),
                exp: None,
            };
        }
        Introspection::inactive()
    }

    // --- owner API -----------------------------------------------------------

    /// Allows `rule.requesting_party` to read `rule.scopes` of the owner's
    /// resources of `rule.ctx_type`, replacing any previous rule for that pair.
    pub fn set_policy(&self, owner: &SubjectId, rule: PolicyRule) -> Result<Policy> {
        let mut st = self.state.lock();
        if !st
            .resources
            .values()
            .any(|r| r.owner.user == owner.user && r.ctx_type == rule.ctx_type)
        {
            return Err(Error::UnknownContextType(rule.ctx_type.to_string()));
        }
        st.log.push(AuthzEvent::PolicyChanged {
            owner: owner.email().to_string(),
            requesting_party: rule.requesting_party.clone(),
            ctx_type: rule.ctx_type.clone(),
            scopes: rule.scopes.clone(),
        });
        let policy = st
            .policies
            .entry(owner.email().to_string())
            .or_insert_with(|| Policy {
                owner: owner.owner(),
                rules: Vec::new(),
            });
        policy
            .rules
            .retain(|r| !(r.requesting_party == rule.requesting_party && r.ctx_type == rule.ctx_type));
        if !rule.scopes.is_empty() {
            policy.rules.push(rule);
        }
        Ok(policy.clone())
    }

    /// Drops the rule for `(requesting_party, ctx_type)`.
    pub fn remove_policy(&self, owner: &SubjectId, requesting_party: &str, ctx_type: &ContextType) -> Result<Policy> {
        self.set_policy(
            owner,
            PolicyRule {
                requesting_party: requesting_party.to_string(),
                ctx_type: ctx_type.clone(),
                scopes: ScopeSet::new(),
                effect: Effect::Allow,
            },
        )
    }

    pub fn policy(&self, owner: &SubjectId) -> Policy {
        self.state.lock().policy(owner).cloned().unwrap_or_else(|| Policy {
            owner: owner.owner(),
            rules: Vec::new(),
        })
    }

    /// Revokes every outstanding RPT whose grants exceed current policy.
    /// Returns the tokens revoked by this sweep.
    pub fn revocation_sweep(&self) -> Vec<String> {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let mut doomed: Vec<String> = st
            .rpts
            .values()
            .filter(|rpt| !st.revoked.contains(&rpt.token))
            .filter(|rpt| {
                now >= rpt.expires_at
                    || rpt.grants.iter().any(|g| match st.resources.get(&g.ctx_id) {
                        Some(r) => !g.scopes.is_subset(&st.allowance_for(&rpt.requesting_party, r)),
                        None => true,
                    })
            })
            .map(|rpt| rpt.token.clone())
            .collect();
        doomed.sort();
        for token in &doomed {
            st.revoked.insert(token.clone());
            st.log.push(AuthzEvent::RptRevoked { token: token.clone(), at: now });
        }
        doomed
    }

    pub fn list_resources(&self, owner: &SubjectId) -> Vec<ResourceDescriptor> {
        self.state
            .lock()
            .resources
            .values()
            .filter(|r| r.owner.user == owner.user)
            .cloned()
            .collect()
    }

    /// Who may read what of one resource, as stored in the owner's policy.
    pub fn list_shares(&self, owner: &SubjectId, ctx_id: &CtxId) -> Result<Vec<Share>> {
        let st = self.state.lock();
        let resource = st
            .resources
            .get(ctx_id)
            .filter(|r| r.owner.user == owner.user)
            .ok_or_else(|| Error::UnknownResource(ctx_id.to_string()))?;
        Ok(st
            .policy(owner)
            .map(|p| {
                p.rules
                    .iter()
                    .filter(|r| r.ctx_type == resource.ctx_type)
                    .map(|r| Share {
                        requesting_party: r.requesting_party.clone(),
                        scopes: r.scopes.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn log(&self) -> Vec<AuthzEvent> {
        self.state.lock().log.clone()
    }

    /// Writes the whole state as JSON.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&*self.state.lock()).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_snapshot(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let state: AuthzState = serde_json::from_slice(&bytes).map_err(|e| Error::Config(e.to_string()))?;
        *self.state.lock() = state;
        Ok(())
    }
}
