//! Relying party: the enforcement point in front of a protected resource,
//! with a controller that gathers identity and context for the PDP and feeds
//! observations back to CAPs.

pub mod pdp;
pub mod pip;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock::SharedClock;
use crate::codec::{decode_identity, IdentityClaims, KeyRing};
use crate::cap::Observation;
use crate::error::{Error, Result};
use crate::model::{ContextType, CtxId, ScopeSet, SubjectId};
use crate::ports::{AuthzApi, CapDirectory, SetReceiver};
use crate::stream::{Delivery, StreamRequest};
use crate::uma::{self, AccessNeed, AcquireOutcome, Acquisition};

pub use pdp::{ContextSnapshot, Decision, DecisionPolicy, Effect, EntryStatus, RequestFacts};
pub use pip::{DeliveryRecord, Pip};

/// Context the RP asks for, per CAP and type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextNeed {
    pub cap: String,
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
}

/// Where allowed requests are reported as observations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmitTarget {
    pub cap: String,
    pub ctx_type: ContextType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpConfig {
    pub issuer: String,
    pub trusted_idps: Vec<String>,
    #[serde(default)]
    pub needs: Vec<ContextNeed>,
    #[serde(default)]
    pub transmit: Vec<TransmitTarget>,
    #[serde(default)]
    pub policy: DecisionPolicy,
    /// Seconds after which received context no longer counts.
    #[serde(default = "default_staleness")]
    pub staleness: i64,
    pub receive_endpoint: String,
}

fn default_staleness() -> i64 {
    300
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_token: Option<String>,
    pub ip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub path: String,
}

/// Outcome of the identity check that precedes the decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityStage {
    pub presented: bool,
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub cap: String,
    pub ctx_type: ContextType,
    pub subject: String,
    pub ip: String,
    pub delivered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessDecision {
    pub effect: Effect,
    pub path: String,
    pub identity: IdentityStage,
    pub decision: Decision,
    pub observations: Vec<ObservationRecord>,
}

/// A user's registration of a ctx_id at this RP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtxRegistration {
    pub user: String,
    pub cap: String,
    pub ctx_type: ContextType,
    pub ctx_id: CtxId,
}

/// Everything the RP recorded, for audits and reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RpAudit {
    pub decisions: Vec<AccessDecision>,
    pub acquisitions: Vec<Acquisition>,
    pub deliveries: Vec<DeliveryRecord>,
    pub observations: Vec<ObservationRecord>,
}

struct RpState {
    pip: Pip,
    registrations: BTreeMap<(String, String, ContextType), CtxId>,
    grants: HashMap<(String, String, ContextType), Acquisition>,
    streams: HashMap<(String, ContextType), String>,
    audit: RpAudit,
}

pub struct RpDeps {
    pub authz: Arc<dyn AuthzApi>,
    pub caps: Arc<dyn CapDirectory>,
    /// Must verify the trusted IdPs and the CAPs in `needs`.
    pub keyring: Arc<KeyRing>,
    pub clock: SharedClock,
}

pub struct RpService {
    config: RpConfig,
    authz: Arc<dyn AuthzApi>,
    caps: Arc<dyn CapDirectory>,
    idp_keys: KeyRing,
    clock: SharedClock,
    state: Mutex<RpState>,
}

impl RpService {
    pub fn new(config: RpConfig, deps: RpDeps) -> Arc<Self> {
        let idp_keys = deps.keyring.restricted_to(config.trusted_idps.iter().map(String::as_str));
        let cap_keys = deps.keyring.restricted_to(
            config
                .needs
                .iter()
                .map(|n| n.cap.as_str())
                .collect::<BTreeSet<_>>(),
        );
        Arc::new(RpService {
            state: Mutex::new(RpState {
                pip: Pip::new(config.issuer.clone(), cap_keys, config.staleness),
                registrations: BTreeMap::new(),
                grants: HashMap::new(),
                streams: HashMap::new(),
                audit: RpAudit::default(),
            }),
            authz: deps.authz,
            caps: deps.caps,
            idp_keys,
            clock: deps.clock,
            config,
        })
    }

    pub fn issuer(&self) -> &str {
        &self.config.issuer
    }

    pub fn config(&self) -> &RpConfig {
        &self.config
    }

    /// Verifies an identity token from one of the trusted IdPs, addressed to this RP.
    pub fn pip_get_identity(&self, token: &str) -> Result<IdentityClaims> {
        decode_identity(token, &self.config.issuer, &self.idp_keys)
            .map_err(|e| Error::Unauthenticated(e.to_string()))
    }

    fn user_of(&self, token: &str) -> Result<SubjectId> {
        let claims = self.pip_get_identity(token)?;
        SubjectId::user(claims.sub)
    }

    /// Stores the ctx_id a user fetched from a CAP. A repeated registration
    /// returns the mapping already on record.
    pub fn register_ctx_id(&self, identity_token: &str, cap: &str, ctx_type: &ContextType, ctx_id: CtxId) -> Result<CtxRegistration> {
        let user = self.user_of(identity_token)?;
        if !self.config.needs.iter().any(|n| n.cap == cap && &n.ctx_type == ctx_type) {
            return Err(Error::UnsupportedContextType(ctx_type.to_string()));
        }
        let key = (user.email().to_string(), cap.to_string(), ctx_type.clone());
        let mut st = self.state.lock();
        let ctx_id = st.registrations.entry(key).or_insert(ctx_id).clone();
        Ok(CtxRegistration {
            user: user.email().to_string(),
            cap: cap.to_string(),
            ctx_type: ctx_type.clone(),
            ctx_id,
        })
    }

    pub fn registered_ctx_id(&self, user: &str, cap: &str, ctx_type: &ContextType) -> Option<CtxId> {
        self.state
            .lock()
            .registrations
            .get(&(user.to_string(), cap.to_string(), ctx_type.clone()))
            .cloned()
    }

    /// Runs the grant flow for one need, then subscribes the user on a push stream.
    pub async fn acquire_context_access(&self, user: &SubjectId, need: &ContextNeed) -> Result<Acquisition> {
        let key = (user.email().to_string(), need.cap.clone(), need.ctx_type.clone());
        let ctx_id = self
            .state
            .lock()
            .registrations
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::UnknownCtxId(format!("{} has no ctx_id for {}", user, need.ctx_type)))?;
        let cap = self.caps.cap(&need.cap)?;
        let acq = uma::acquire(
            AccessNeed {
                party: &self.config.issuer,
                subject: user,
                ctx_type: &need.ctx_type,
                ctx_id: &ctx_id,
                scopes: &need.scopes,
            },
            cap.as_ref(),
            self.authz.as_ref(),
        )
        .await?;
        if let AcquireOutcome::Granted { rpt, set, .. } = &acq.outcome {
            if let Some(token) = set {
                self.accept(token)?;
            }
            let stream_key = (need.cap.clone(), need.ctx_type.clone());
            let known = self.state.lock().streams.get(&stream_key).cloned();
            let stream_id = match known {
                Some(id) => id,
                None => {
                    let request = StreamRequest {
                        delivery: Delivery::Push {
                            endpoint: self.config.receive_endpoint.clone(),
                        },
                        requested_ctx_types: BTreeSet::from([need.ctx_type.clone()]),
                    };
                    let id = match cap.create_stream(request).await {
                        Ok(c) => c.stream_id,
                        Err(Error::DuplicateStream(id)) => id,
                        Err(e) => return Err(e),
                    };
                    self.state.lock().streams.insert(stream_key, id.clone());
                    id
                }
            };
            cap.add_subject(&stream_id, user, Some(rpt)).await?;
            self.state.lock().grants.insert(key, acq.clone());
        }
        self.state.lock().audit.acquisitions.push(acq.clone());
        Ok(acq)
    }

    /// Acquires every need the user registered a ctx_id for and holds no grant on.
    pub async fn acquire_all(&self, user: &SubjectId) -> Vec<Result<Acquisition>> {
        let mut out = Vec::new();
        for need in &self.config.needs {
            let key = (user.email().to_string(), need.cap.clone(), need.ctx_type.clone());
            let pending = {
                let st = self.state.lock();
                st.registrations.contains_key(&key) && !st.grants.contains_key(&key)
            };
            if pending {
                out.push(self.acquire_context_access(user, need).await);
            }
        }
        out
    }

    pub fn grant(&self, user: &str, cap: &str, ctx_type: &ContextType) -> Option<Acquisition> {
        self.state
            .lock()
            .grants
            .get(&(user.to_string(), cap.to_string(), ctx_type.clone()))
            .cloned()
    }

    /// Verifies and caches a SET delivered on a stream or in a response.
    pub fn accept(&self, token: &str) -> Result<bool> {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let fresh = st.pip.ingest(token, now)?;
        if fresh {
            let record = st.pip.deliveries().last().cloned();
            st.audit.deliveries.extend(record);
        }
        Ok(fresh)
    }

    /// The PIP's view of one context for a request from `device`.
    pub fn pip_get_context(&self, user: &str, cap: &str, ctx_type: &ContextType, device: Option<&str>) -> pdp::ContextView {
        let st = self.state.lock();
        let key = (user.to_string(), cap.to_string(), ctx_type.clone());
        if !st.grants.contains_key(&key) {
            return pdp::ContextView::missing(EntryStatus::NotAcquired);
        }
        st.pip.view(user, cap, ctx_type, device, self.clock.now())
    }

    /// Enforcement point: verify identity, gather context, decide, report.
    pub async fn handle_access(&self, req: AccessRequest) -> AccessDecision {
        let denied = |identity: IdentityStage, reason: String| AccessDecision {
            effect: Effect::Deny,
            path: req.path.clone(),
            identity,
            decision: Decision {
                effect: Effect::Deny,
                rule: None,
                reason,
                claims: Vec::new(),
                evidence: Vec::new(),
            },
            observations: Vec::new(),
        };
        let Some(token) = req.identity_token.as_deref() else {
            let d = denied(
                IdentityStage {
                    presented: false,
                    verified: false,
                    issuer: None,
                    error: None,
                },
                "authenticate first".into(),
            );
            self.state.lock().audit.decisions.push(d.clone());
            return d;
        };
        let claims = match self.pip_get_identity(token) {
            Ok(c) => c,
            Err(e) => {
                let d = denied(
                    IdentityStage {
                        presented: true,
                        verified: false,
                        issuer: None,
                        error: Some(e.to_string()),
                    },
                    format!("identity rejected: {e}"),
                );
                self.state.lock().audit.decisions.push(d.clone());
                return d;
            }
        };
        let identity = IdentityStage {
            presented: true,
            verified: true,
            issuer: Some(claims.iss.clone()),
            error: None,
        };
        let user = match SubjectId::user(claims.sub.clone()) {
            Ok(u) => u,
            Err(e) => {
                let d = denied(identity, format!("unusable subject: {e}"));
                self.state.lock().audit.decisions.push(d.clone());
                return d;
            }
        };

        for result in self.acquire_all(&user).await {
            if let Err(e) = result {
                tracing::warn!(rp = %self.config.issuer, error = %e, "context acquisition failed");
            }
        }

        let facts = RequestFacts {
            user: user.email().to_string(),
            ip: req.ip.clone(),
            device: req.device.clone(),
        };
        let mut snapshot = ContextSnapshot::new();
        for (cap, ctx_type) in self.config.policy.context_sources() {
            let view = self.pip_get_context(user.email(), &cap, &ctx_type, req.device.as_deref());
            snapshot.insert((cap, ctx_type), view);
        }
        let decision = pdp::decide(&self.config.policy, &claims, &facts, &snapshot);
        let effect = decision.effect;

        let mut observations = Vec::new();
        if effect == Effect::Allow {
            let subject = match &req.device {
                Some(d) => user.clone().with_device(d.clone()).unwrap_or_else(|_| user.clone()),
                None => user.clone(),
            };
            for target in &self.config.transmit {
                let obs = Observation {
                    source: self.config.issuer.clone(),
                    subject: subject.clone(),
                    ctx_type: target.ctx_type.clone(),
                    payload: BTreeMap::from([("ip".to_string(), json!(req.ip))]),
                    observed_at: self.clock.now(),
                };
                let result = match self.caps.cap(&target.cap) {
                    Ok(cap) => cap.observe(obs).await.map(|_| ()),
                    Err(e) => Err(e),
                };
                observations.push(ObservationRecord {
                    cap: target.cap.clone(),
                    ctx_type: target.ctx_type.clone(),
                    subject: user.email().to_string(),
                    ip: req.ip.clone(),
                    delivered: result.is_ok(),
                    error: result.err().map(|e| e.to_string()),
                });
            }
        }
        let d = AccessDecision {
            effect,
            path: req.path,
            identity,
            decision,
            observations,
        };
        let mut st = self.state.lock();
        st.audit.observations.extend(d.observations.iter().cloned());
        st.audit.decisions.push(d.clone());
        d
    }

    pub fn audit(&self) -> RpAudit {
        self.state.lock().audit.clone()
    }
}

#[async_trait]
impl SetReceiver for RpService {
    async fn receive(&self, token: &str) -> Result<()> {
        self.accept(token).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authz::{AuthzConfig, AuthzServer, PolicyRule};
    use crate::cap::{CapConfig, CapDeps, CapService, DerivationRule, ServedType};
    use crate::clock::{Clock, SimClock};
    use crate::codec::{derive_key_seed, sign, IdentityClaims, ID_TYP};
    use crate::ids::IdGen;
    use crate::model::scopes;
    use crate::ports::local::{LocalAuthz, LocalCapDirectory, LocalPushRouter};
    use crate::rp::pdp::{Condition, Rule, Test};

    const CAP1: &str = "https://cap1.example";
    const RP1: &str = "https://rp1.example";
    const RP2: &str = "https://rp2.example";
    const RP3: &str = "https://rp3.example";
    const IDP1: &str = "https://idp1.example";
    const IDP2: &str = "https://idp2.example";
    const IDP3: &str = "https://idp3.example";

    fn location() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/device-location").unwrap()
    }

    fn alice() -> SubjectId {
        SubjectId::user("alice@example.com").unwrap()
    }

    struct Fed {
        authz: Arc<AuthzServer>,
        cap: Arc<CapService>,
        ring: Arc<KeyRing>,
        clock: SimClock,
        router: Arc<LocalPushRouter>,
    }

    impl Fed {
        fn new() -> Self {
            let clock = SimClock::new(1_700_000_000);
            let ids = Arc::new(IdGen::seeded(8));
            let mut cfg = AuthzConfig::new("https://authz.example");
            cfg.auto_consent = true;
            let authz = Arc::new(AuthzServer::new(cfg, Arc::new(clock.clone()), ids.clone()));
            authz.register_cap(CAP1);
            let mut ring = KeyRing::new();
            for issuer in [CAP1, IDP1, IDP2, IDP3] {
                ring.add_signer(issuer, derive_key_seed(issuer, 1));
            }
            let ring = Arc::new(ring);
            let router = LocalPushRouter::new();
            let cap = CapService::new(
                CapConfig {
                    issuer: CAP1.into(),
                    served: vec![ServedType {
                        ctx_type: location(),
                        scopes: scopes(["ip", "wifi-ap", "used:ip"]).unwrap(),
                        rule: DerivationRule::UsedIp,
                    }],
                    sources: [RP1, RP2, RP3].iter().map(|s| s.to_string()).collect(),
                    upstream: Vec::new(),
                    receive_endpoint: format!("{CAP1}/ctx-recv"),
                },
                CapDeps {
                    authz: LocalAuthz::new(authz.clone(), CAP1),
                    pusher: router.clone(),
                    upstream: None,
                    keyring: ring.clone(),
                    clock: Arc::new(clock.clone()),
                    ids,
                },
            )
            .unwrap();
            Fed {
                authz,
                cap,
                ring,
                clock,
                router,
            }
        }

        fn rp(&self, issuer: &str, idps: &[&str]) -> Arc<RpService> {
            let dir = Arc::new(LocalCapDirectory::new(issuer));
            dir.insert(self.cap.clone());
            let rp = RpService::new(
                RpConfig {
                    issuer: issuer.into(),
                    trusted_idps: idps.iter().map(|s| s.to_string()).collect(),
                    needs: vec![ContextNeed {
                        cap: CAP1.into(),
                        ctx_type: location(),
                        scopes: scopes(["used:ip"]).unwrap(),
                    }],
                    transmit: vec![TransmitTarget {
                        cap: CAP1.into(),
                        ctx_type: location(),
                    }],
                    policy: DecisionPolicy {
                        rules: vec![Rule {
                            name: "known-network".into(),
                            effect: Effect::Allow,
                            when: vec![Condition::Context {
                                cap: CAP1.into(),
                                ctx_type: location(),
                                key: "used:ip:{ip}".into(),
                                test: Test::Equals(json!(true)),
                            }],
                        }],
                        default: Effect::Deny,
                    },
                    staleness: 300,
                    receive_endpoint: format!("{issuer}/ctx-recv"),
                },
                RpDeps {
                    authz: LocalAuthz::new(self.authz.clone(), issuer),
                    caps: dir,
                    keyring: self.ring.clone(),
                    clock: Arc::new(self.clock.clone()),
                },
            );
            self.router.attach(format!("{issuer}/ctx-recv"), rp.clone());
            rp
        }

        fn id_token(&self, iss: &str, sub: &str, aud: &str) -> String {
            let claims = IdentityClaims {
                iss: iss.into(),
                sub: sub.into(),
                aud: aud.into(),
                iat: self.clock.now(),
                jti: format!("id-{iss}-{aud}"),
            };
            sign(&self.ring, iss, ID_TYP, &claims).unwrap()
        }

        fn share(&self, party: &str, names: &[&str]) {
            self.authz
                .set_policy(
                    &alice(),
                    PolicyRule {
                        requesting_party: party.into(),
                        ctx_type: location(),
                        scopes: scopes(names.iter().copied()).unwrap(),
                        effect: crate::authz::Effect::Allow,
                    },
                )
                .unwrap();
        }
    }

    fn request(token: Option<String>, ip: &str) -> AccessRequest {
        AccessRequest {
            identity_token: token,
            ip: ip.into(),
            device: Some("alice-no-Laptop".into()),
            path: "/resource/docs".into(),
        }
    }

    #[test]
    fn identity_verification_over_issuer_audience_pairs() {
        let fed = Fed::new();
        let rp1 = fed.rp(RP1, &[IDP1, IDP2]);
        let trusted = [IDP1, IDP2];
        for iss in [IDP1, IDP2, IDP3] {
            for aud in [RP1, RP2] {
                let ok = rp1.pip_get_identity(&fed.id_token(iss, "alice@example.com", aud)).is_ok();
                assert_eq!(ok, trusted.contains(&iss) && aud == RP1, "{iss} -> {aud}");
            }
        }
    }

    #[tokio::test]
    async fn no_identity_means_authenticate_first() {
        let fed = Fed::new();
        let rp1 = fed.rp(RP1, &[IDP1]);
        let d = rp1.handle_access(request(None, "192.0.2.1")).await;
        assert_eq!(d.effect, Effect::Deny);
        assert!(!d.identity.presented);
        assert_eq!(d.decision.reason, "authenticate first");
        let d = rp1.handle_access(request(Some("garbage".into()), "192.0.2.1")).await;
        assert!(d.identity.presented && !d.identity.verified);
    }

    #[tokio::test]
    async fn ctx_id_registration_is_per_user() {
        let fed = Fed::new();
        let rp1 = fed.rp(RP1, &[IDP1]);
        let a = fed.id_token(IDP1, "alice@example.com", RP1);
        let b = fed.id_token(IDP1, "bob@example.com", RP1);
        rp1.register_ctx_id(&a, CAP1, &location(), CtxId("ctx-a".into())).unwrap();
        rp1.register_ctx_id(&b, CAP1, &location(), CtxId("ctx-b".into())).unwrap();
        let again = rp1.register_ctx_id(&a, CAP1, &location(), CtxId("ctx-z".into())).unwrap();
        assert_eq!(again.ctx_id, CtxId("ctx-a".into()));
        assert_eq!(rp1.registered_ctx_id("alice@example.com", CAP1, &location()), Some(CtxId("ctx-a".into())));
        assert_eq!(rp1.registered_ctx_id("bob@example.com", CAP1, &location()), Some(CtxId("ctx-b".into())));
        assert_eq!(rp1.registered_ctx_id("carol@example.com", CAP1, &location()), None);
        assert!(matches!(
            rp1.register_ctx_id("nope", CAP1, &location(), CtxId("x".into())),
            Err(Error::Unauthenticated(_))
        ));
    }

    #[tokio::test]
    async fn acquisition_records_eleven_steps_and_subset_grant() {
        let fed = Fed::new();
        fed.cap.bootstrap(&alice()).await.unwrap();
        let ctx_id = fed.cap.ctx_id_for(&alice(), &location()).unwrap();
        fed.share(RP1, &["used:ip"]);
        let rp1 = fed.rp(RP1, &[IDP1]);
        rp1.register_ctx_id(&fed.id_token(IDP1, "alice@example.com", RP1), CAP1, &location(), ctx_id.clone())
            .unwrap();
        let need = ContextNeed {
            cap: CAP1.into(),
            ctx_type: location(),
            scopes: scopes(["used:ip", "wifi-ap"]).unwrap(),
        };
        let acq = rp1.acquire_context_access(&alice(), &need).await.unwrap();
        assert_eq!(acq.trace.steps(), (1..=11).collect::<Vec<u8>>());
        let AcquireOutcome::Granted { scopes: granted, .. } = &acq.outcome else { panic!("{acq:?}") };
        assert_eq!(granted, &scopes(["used:ip"]).unwrap());

        // RP3 has no rule.
        let rp3 = fed.rp(RP3, &[IDP1]);
        rp3.register_ctx_id(&fed.id_token(IDP1, "alice@example.com", RP3), CAP1, &location(), ctx_id)
            .unwrap();
        let acq = rp3.acquire_context_access(&alice(), &need).await.unwrap();
        assert!(matches!(acq.outcome, AcquireOutcome::Denied { .. }));
        assert_eq!(acq.trace.steps(), (1..=7).collect::<Vec<u8>>());
    }

    #[tokio::test]
    async fn context_from_one_rp_reaches_the_other() {
        let fed = Fed::new();
        fed.cap.bootstrap(&alice()).await.unwrap();
        let ctx_id = fed.cap.ctx_id_for(&alice(), &location()).unwrap();
        fed.share(RP1, &["used:ip"]);
        fed.share(RP2, &["used:ip"]);
        let rp1 = fed.rp(RP1, &[IDP1]);
        let rp2 = fed.rp(RP2, &[IDP3]);
        for (rp, idp) in [(&rp1, IDP1), (&rp2, IDP3)] {
            rp.register_ctx_id(&fed.id_token(idp, "alice@example.com", rp.issuer()), CAP1, &location(), ctx_id.clone())
                .unwrap();
        }
        // Seed a first sighting directly at the CAP on RP2's behalf.
        fed.cap
            .ingest(Observation {
                source: RP2.into(),
                subject: alice().with_device("alice-no-Laptop").unwrap(),
                ctx_type: location(),
                payload: BTreeMap::from([("ip".to_string(), json!("192.0.2.1"))]),
                observed_at: 0,
            })
            .await
            .unwrap();
        let token = fed.id_token(IDP1, "alice@example.com", RP1);
        let d = rp1.handle_access(request(Some(token.clone()), "192.0.2.1")).await;
        assert_eq!(d.effect, Effect::Allow, "{d:#?}");
        assert_eq!(d.decision.evidence[0].key, "used:ip:192.0.2.1");
        assert_eq!(d.observations.len(), 1);
        let d = rp1.handle_access(request(Some(token), "203.0.113.9")).await;
        assert_eq!(d.effect, Effect::Deny);
        assert_eq!(d.decision.evidence[0].status, EntryStatus::Absent);

        // Staleness: nothing new arrives for longer than the bound.
        fed.clock.advance(301);
        let view = rp1.pip_get_context("alice@example.com", CAP1, &location(), Some("alice-no-Laptop"));
        assert_eq!(view.status, EntryStatus::Stale);
        assert!(rp1.audit().deliveries.iter().all(|d| d.keys.iter().all(|k| k.starts_with("used:ip:"))));
    }
}
