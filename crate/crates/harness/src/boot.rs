//! Boots every service of a topology on loopback and tears it down again.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use ztf_client::{Agent, CapUserClient, Credentials, Directory, HttpAuthz, HttpCap, HttpCapDirectory, HttpPusher, IdpClient, OwnerClient, RpClient};
use ztf_core::authz::{AuthzConfig, AuthzServer};
use ztf_core::cap::{CapDeps, CapService};
use ztf_core::clock::{SharedClock, SimClock};
use ztf_core::codec::{derive_key_seed, KeyRing};
use ztf_core::idp::IdpService;
use ztf_core::ids::IdGen;
use ztf_core::rp::{RpDeps, RpService};
use ztf_server::{authz, cap, idp, rp, serve, spawn_periodic, Parties};

use crate::topology::TopologySpec;
use crate::HarnessError;

const FLUSH_PERIOD: Duration = Duration::from_secs(1);
const STOP_GRACE: Duration = Duration::from_secs(2);

/// Where one service listens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceInfo {
    pub name: String,
    pub origin: String,
    pub addr: SocketAddr,
}

struct Running {
    info: ServiceInfo,
    stop: Option<oneshot::Sender<()>>,
    server: Option<JoinHandle<std::io::Result<()>>>,
    background: Vec<JoinHandle<()>>,
}

/// A booted federation. Dropping it stops every service.
pub struct Federation {
    spec: TopologySpec,
    dir: Arc<Directory>,
    clock: SimClock,
    secrets: HashMap<String, String>,
    agent: Agent,
    services: Vec<Running>,
}

/// Shared secret of a party, derived from the federation seed.
pub fn party_secret(party: &str, seed: u64) -> String {
    derive_key_seed(&format!("{party}#secret"), seed)[..16]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn with_signers(public: &KeyRing, issuers: &[&str], seed: u64) -> Arc<KeyRing> {
    let mut ring = public.clone();
    for issuer in issuers {
        ring.add_signer(*issuer, derive_key_seed(issuer, seed));
    }
    Arc::new(ring)
}

async fn bind(name: &str, port: u16) -> Result<TcpListener, HarnessError> {
    TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| HarnessError::PortUnavailable {
            service: name.to_string(),
            port,
            reason: e.to_string(),
        })
}

impl Federation {
    pub async fn boot(spec: TopologySpec) -> Result<Federation, HarnessError> {
        let seed = spec.seed;

        let mut planned: Vec<(String, String, u16)> = Vec::new();
        if let Some(a) = &spec.authz {
            planned.push(("authz".into(), a.uri.clone(), a.port));
        }
        if let Some(i) = &spec.idp {
            planned.push(("idp".into(), i.uri.clone(), i.port));
        }
        for c in &spec.caps {
            planned.push(("cap".into(), c.config.issuer.clone(), c.port));
        }
        for r in &spec.rps {
            planned.push(("rp".into(), r.config.issuer.clone(), r.port));
        }
        let mut listeners = Vec::new();
        for (name, origin, port) in &planned {
            let l = bind(origin, *port).await?;
            let addr = l.local_addr().map_err(|e| HarnessError::Config(e.to_string()))?;
            listeners.push((
                ServiceInfo {
                    name: name.clone(),
                    origin: origin.clone(),
                    addr,
                },
                l,
            ));
        }

        let dir = Directory::new();
        for (info, _) in &listeners {
            dir.insert(info.origin.clone(), format!("http://{}", info.addr));
        }

        let mut signers: Vec<&str> = spec.caps.iter().map(|c| c.config.issuer.as_str()).collect();
        if let Some(i) = &spec.idp {
            signers.extend(i.issuers.iter().map(String::as_str));
        }
        let public = with_signers(&KeyRing::new(), &signers, seed).public();

        let mut parties: Vec<String> = spec.caps.iter().map(|c| c.config.issuer.clone()).collect();
        parties.extend(spec.rps.iter().map(|r| r.config.issuer.clone()));
        parties.extend(spec.sources.iter().cloned());
        parties.push(spec.operator.clone());
        let secrets: HashMap<String, String> = parties.iter().map(|p| (p.clone(), party_secret(p, seed))).collect();
        let table = Arc::new(Parties::new(secrets.clone()).with_operator(spec.operator.clone()));
        let users: Arc<HashMap<String, String>> =
            Arc::new(spec.users.iter().map(|u| (u.email.clone(), u.password.clone())).collect());

        let clock = SimClock::new(spec.clock_start);
        let shared_clock: SharedClock = Arc::new(clock.clone());
        let agent = Agent::new(dir.clone());
        let as_party = |p: &str| agent.acting_as(Credentials::new(p, secrets[p].clone()));
        let authz_uri = spec.authz.as_ref().map(|a| a.uri.clone()).unwrap_or_default();
        let ids = |i: usize| Arc::new(IdGen::seeded(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)));

        let mut services = Vec::new();
        for (index, (info, listener)) in listeners.into_iter().enumerate() {
            let mut background = Vec::new();
            let router = match info.name.as_str() {
                "authz" => {
                    let a = spec.authz.as_ref().expect("planned");
                    let mut config = AuthzConfig::new(a.uri.clone());
                    config.ticket_ttl = a.ticket_ttl;
                    config.rpt_ttl = a.rpt_ttl;
                    config.auto_consent = a.auto_consent;
                    let server = Arc::new(AuthzServer::new(config, shared_clock.clone(), ids(index)));
                    for c in &spec.caps {
                        server.register_cap(c.config.issuer.clone());
                    }
                    for u in &spec.users {
                        server.add_account(u.email.clone(), u.password.clone());
                    }
                    let sweeper = server.clone();
                    background.push(spawn_periodic(Duration::from_millis(a.sweep_interval_ms.max(1)), move || {
                        let revoked = sweeper.revocation_sweep();
                        if !revoked.is_empty() {
                            tracing::info!(count = revoked.len(), "revoked expired tokens");
                        }
                        async {}
                    }));
                    authz::router(authz::AuthzApp {
                        server,
                        parties: table.clone(),
                    })
                }
                "idp" => {
                    let i = spec.idp.as_ref().expect("planned");
                    let issuers: Vec<&str> = i.issuers.iter().map(String::as_str).collect();
                    let svc = IdpService::new(with_signers(&public, &issuers, seed), shared_clock.clone(), ids(index));
                    for issuer in &i.issuers {
                        svc.add_issuer(issuer.clone())?;
                        for u in &spec.users {
                            svc.add_account(issuer, &u.email, &u.password)?;
                        }
                    }
                    idp::router(idp::IdpApp {
                        idp: Arc::new(svc),
                        parties: table.clone(),
                    })
                }
                "cap" => {
                    let c = spec.cap(&info.origin).expect("planned");
                    let me = as_party(&c.config.issuer);
                    let svc = CapService::new(
                        c.config.clone(),
                        CapDeps {
                            authz: HttpAuthz::new(me.clone(), authz_uri.clone()),
                            pusher: HttpPusher::new(agent.clone()),
                            upstream: Some(HttpCapDirectory::new(me)),
                            keyring: with_signers(&public, &[c.config.issuer.as_str()], seed),
                            clock: shared_clock.clone(),
                            ids: ids(index),
                        },
                    )?;
                    let flusher = svc.clone();
                    background.push(spawn_periodic(FLUSH_PERIOD, move || {
                        let cap = flusher.clone();
                        async move {
                            cap.flush().await;
                        }
                    }));
                    cap::router(cap::CapApp {
                        cap: svc,
                        parties: table.clone(),
                        users: users.clone(),
                    })
                }
                _ => {
                    let r = spec.rp(&info.origin).expect("planned");
                    let me = as_party(&r.config.issuer);
                    let svc = RpService::new(
                        r.config.clone(),
                        RpDeps {
                            authz: HttpAuthz::new(me.clone(), authz_uri.clone()),
                            caps: HttpCapDirectory::new(me),
                            keyring: Arc::new(public.clone()),
                            clock: shared_clock.clone(),
                        },
                    );
                    rp::router(rp::RpApp {
                        rp: svc,
                        parties: table.clone(),
                    })
                }
            };
            let (tx, rx) = oneshot::channel::<()>();
            let server = tokio::spawn(serve(listener, router, async {
                let _ = rx.await;
            }));
            tracing::debug!(service = %info.origin, addr = %info.addr, "listening");
            services.push(Running {
                info,
                stop: Some(tx),
                server: Some(server),
                background,
            });
        }

        Ok(Federation {
            spec,
            dir,
            clock,
            secrets,
            agent,
            services,
        })
    }

    /// Stops every service and waits for its listener to close. Calling it
    /// again does nothing.
    pub async fn shutdown(&mut self) {
        for s in &mut self.services {
            for b in s.background.drain(..) {
                b.abort();
            }
            if let Some(tx) = s.stop.take() {
                let _ = tx.send(());
            }
            if let Some(server) = s.server.take() {
                let abort = server.abort_handle();
                if tokio::time::timeout(STOP_GRACE, server).await.is_err() {
                    abort.abort();
                }
            }
        }
    }

    pub fn is_running(&self) -> bool {
        self.services.iter().any(|s| s.server.is_some())
    }

    pub fn services(&self) -> Vec<ServiceInfo> {
        self.services.iter().map(|s| s.info.clone()).collect()
    }

    pub fn routes(&self) -> BTreeMap<String, String> {
        self.dir.routes()
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn agent_as(&self, party: &str) -> Result<Agent, HarnessError> {
        let secret = self
            .secrets
            .get(party)
            .ok_or_else(|| HarnessError::Config(format!("no credentials for {party}")))?;
        Ok(self.agent.acting_as(Credentials::new(party, secret.clone())))
    }

    pub fn operator(&self) -> Agent {
        self.agent_as(&self.spec.operator).expect("operator always has credentials")
    }

    fn authz_uri(&self) -> Result<&str, HarnessError> {
        self.spec
            .authz
            .as_ref()
            .map(|a| a.uri.as_str())
            .ok_or_else(|| HarnessError::Config("topology has no authorization server".into()))
    }

    pub fn authz_admin(&self) -> Result<Arc<HttpAuthz>, HarnessError> {
        Ok(HttpAuthz::new(self.operator(), self.authz_uri()?))
    }

    pub async fn owner(&self, email: &str) -> Result<OwnerClient, HarnessError> {
        let user = self
            .spec
            .user(email)
            .ok_or_else(|| HarnessError::Config(format!("unknown user {email}")))?;
        Ok(OwnerClient::login(self.agent.clone(), self.authz_uri()?, email, &user.password).await?)
    }

    pub fn cap_user(&self, cap: &str, email: &str) -> Result<CapUserClient, HarnessError> {
        let user = self
            .spec
            .user(email)
            .ok_or_else(|| HarnessError::Config(format!("unknown user {email}")))?;
        Ok(CapUserClient::new(self.agent.clone(), cap, email, user.password.clone()))
    }

    pub fn cap_admin(&self, cap: &str) -> Arc<HttpCap> {
        HttpCap::new(self.operator(), cap)
    }

    pub fn cap_as(&self, party: &str, cap: &str) -> Result<Arc<HttpCap>, HarnessError> {
        Ok(HttpCap::new(self.agent_as(party)?, cap))
    }

    pub fn rp(&self, uri: &str) -> RpClient {
        RpClient::new(self.operator(), uri)
    }

    pub fn idp(&self) -> Result<IdpClient, HarnessError> {
        let uri = self
            .spec
            .idp
            .as_ref()
            .map(|i| i.uri.clone())
            .ok_or_else(|| HarnessError::Config("topology has no IdP".into()))?;
        Ok(IdpClient::new(self.operator(), uri))
    }

    /// Pushes out everything the CAPs still hold, so the next step sees a
    /// settled federation.
    pub async fn quiesce(&self) -> Result<(), HarnessError> {
        for c in &self.spec.caps {
            let admin = self.cap_admin(&c.config.issuer);
            for attempt in 0..20 {
                if admin.flush().await?.pending == 0 {
                    break;
                }
                tokio::time::sleep(Duration::from_millis(10 << attempt.min(5))).await;
            }
        }
        Ok(())
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        for s in &mut self.services {
            for b in s.background.drain(..) {
                b.abort();
            }
            if let Some(tx) = s.stop.take() {
                let _ = tx.send(());
            }
            if let Some(server) = s.server.take() {
                server.abort();
            }
        }
    }
}
