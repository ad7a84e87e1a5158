//! Context attribute provider: folds observations into context resources,
//! registers them with the authorization server, answers context requests
//! under an RPT and streams updates to approved receivers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::codec::{decode_and_verify, KeyRing, SetEncoder};
use crate::error::{Error, Result};
use crate::ids::IdGen;
use crate::model::{
    filter_by_scopes, merge_contexts, ContextResource, ContextType, ContextValueSet, CtxId, Scope, ScopeSet, SubjectId,
};
use crate::ports::{AuthzApi, CapDirectory, ContextReply, SetPusher, SetReceiver};
use crate::stream::{
    Approval, Delivery, Receipt, StreamConfig, StreamRegistry, StreamRequest, StreamStatus, SubjectEntry,
};
use crate::uma::{self, Acquisition, AccessNeed};

/// How observations of one context type turn into context values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DerivationRule {
    /// Remembers the source networks each device was seen on.
    /// Vocabulary: `ip`. Produces `ip:current` and `used:ip:<addr>`.
    UsedIp,
    /// Compares installed versions with the latest release.
    /// Vocabulary: `version`. Produces `up-to-date` and `version:installed`.
    VersionCurrency { latest: String },
    /// Checks the access point a device is associated with.
    /// Vocabulary: `wifi-ap`. Produces `wifi-ap:current` and `wifi-ap:trusted`.
    WifiWhitelist { trusted: BTreeSet<String> },
    /// Values come only from upstream subscriptions.
    Aggregate,
}

impl DerivationRule {
    fn vocabulary(&self) -> &'static [&'static str] {
        match self {
            DerivationRule::UsedIp => &["ip"],
            DerivationRule::VersionCurrency { .. } => &["version"],
            DerivationRule::WifiWhitelist { .. } => &["wifi-ap"],
            DerivationRule::Aggregate => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedType {
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
    pub rule: DerivationRule,
}

/// Context this CAP pulls from another CAP and folds into one of its own types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamSubscription {
    pub cap: String,
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
    pub into: ContextType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapConfig {
    pub issuer: String,
    pub served: Vec<ServedType>,
    /// Parties allowed to submit observations.
    #[serde(default)]
    pub sources: BTreeSet<String>,
    #[serde(default)]
    pub upstream: Vec<UpstreamSubscription>,
    /// Where upstream CAPs push to.
    pub receive_endpoint: String,
}

impl CapConfig {
    fn validate(&self) -> Result<()> {
        for s in &self.served {
            if s.scopes.is_empty() {
                return Err(Error::Config(format!("{} declares no scopes", s.ctx_type)));
            }
        }
        for u in &self.upstream {
            let Some(target) = self.served(&u.into) else {
                return Err(Error::Config(format!("upstream target {} is not served", u.into)));
            };
            if let Some(s) = u.scopes.iter().find(|s| !target.scopes.contains(*s)) {
                return Err(Error::Config(format!("upstream scope {s} is not declared on {}", u.into)));
            }
        }
        Ok(())
    }

    pub fn served(&self, ctx_type: &ContextType) -> Option<&ServedType> {
        self.served.iter().find(|s| &s.ctx_type == ctx_type)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub source: String,
    pub subject: SubjectId,
    pub ctx_type: ContextType,
    pub payload: BTreeMap<String, Value>,
    #[serde(default)]
    pub observed_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx_id: Option<CtxId>,
    /// Values as derived for the access that carried the observation.
    pub derived: ContextValueSet,
    pub changed: bool,
    pub transmitted: Vec<Receipt>,
}

/// Compares dotted numeric versions, missing components counting as zero.
pub fn compare_versions(a: &str, b: &str) -> Result<Ordering> {
    let parse = |v: &str| -> Result<Vec<u64>> {
        v.trim_start_matches('v')
            .split('.')
            .map(|c| c.parse::<u64>().map_err(|_| Error::VocabularyViolation(format!("bad version {v:?}"))))
            .collect()
    };
    let (a, b) = (parse(a)?, parse(b)?);
    let n = a.len().max(b.len());
    let pad = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0);
    Ok((0..n)
        .map(|i| pad(&a, i).cmp(&pad(&b, i)))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal))
}

type ResourceKey = (String, ContextType);

fn key_of(subject: &SubjectId, ctx_type: &ContextType) -> ResourceKey {
    (subject.email().to_string(), ctx_type.clone())
}

struct CapState {
    registry: StreamRegistry,
    resources: BTreeMap<ResourceKey, ContextResource>,
    /// Device last seen for each resource; it names the subject of outgoing events.
    devices: HashMap<ResourceKey, String>,
    sightings: HashMap<(String, String), BTreeSet<String>>,
    pats: HashMap<String, String>,
    upstream_ids: HashMap<(String, String, ContextType), CtxId>,
    acquisitions: Vec<Acquisition>,
    seen_jti: HashSet<String>,
}

pub struct CapService {
    config: CapConfig,
    authz: Arc<dyn AuthzApi>,
    pusher: Arc<dyn SetPusher>,
    upstream: Option<Arc<dyn CapDirectory>>,
    encoder: SetEncoder,
    verifier: KeyRing,
    clock: SharedClock,
    ids: Arc<IdGen>,
    state: Mutex<CapState>,
    delivery_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    retrying: Mutex<HashSet<String>>,
    me: Weak<CapService>,
}

/// Dependencies of a [`CapService`].
pub struct CapDeps {
    pub authz: Arc<dyn AuthzApi>,
    pub pusher: Arc<dyn SetPusher>,
    /// Reaches upstream CAPs as this CAP; needed only with subscriptions.
    pub upstream: Option<Arc<dyn CapDirectory>>,
    pub keyring: Arc<KeyRing>,
    pub clock: SharedClock,
    pub ids: Arc<IdGen>,
}

const RETRY_BASE: Duration = Duration::from_millis(50);
const RETRY_ATTEMPTS: u32 = 8;

impl CapService {
    pub fn new(config: CapConfig, deps: CapDeps) -> Result<Arc<Self>> {
        config.validate()?;
        if !deps.keyring.can_sign(&config.issuer) {
            return Err(Error::NoSigningKey(config.issuer.clone()));
        }
        let registry = StreamRegistry::new(config.issuer.clone(), config.served.iter().map(|s| s.ctx_type.clone()));
        let verifier = deps.keyring.restricted_to(config.upstream.iter().map(|u| u.cap.as_str()));
        Ok(Arc::new_cyclic(|me| CapService {
            encoder: SetEncoder::new(deps.keyring.clone(), deps.clock.clone(), deps.ids.clone()),
            verifier,
            authz: deps.authz,
            pusher: deps.pusher,
            upstream: deps.upstream,
            clock: deps.clock,
            ids: deps.ids,
            state: Mutex::new(CapState {
                registry,
                resources: BTreeMap::new(),
                devices: HashMap::new(),
                sightings: HashMap::new(),
                pats: HashMap::new(),
                upstream_ids: HashMap::new(),
                acquisitions: Vec::new(),
                seen_jti: HashSet::new(),
            }),
            delivery_locks: Mutex::new(HashMap::new()),
            retrying: Mutex::new(HashSet::new()),
            me: me.clone(),
            config,
        }))
    }

    pub fn issuer(&self) -> &str {
        &self.config.issuer
    }

    pub fn config(&self) -> &CapConfig {
        &self.config
    }

    fn ensure_resource<'a>(&self, st: &'a mut CapState, owner: &SubjectId, ctx_type: &ContextType) -> Result<&'a mut ContextResource> {
        let served = self
            .config
            .served(ctx_type)
            .ok_or_else(|| Error::UnsupportedContextType(ctx_type.to_string()))?;
        let key = key_of(owner, ctx_type);
        if !st.resources.contains_key(&key) {
            let r = ContextResource::new(
                owner.owner(),
                ctx_type.clone(),
                served.scopes.clone(),
                ContextValueSet::new(),
                self.config.issuer.clone(),
            )?;
            st.resources.insert(key.clone(), r);
        }
        Ok(st.resources.get_mut(&key).expect("inserted above"))
    }

    fn event_subject(st: &CapState, owner: &SubjectId, ctx_type: &ContextType) -> SubjectId {
        let base = owner.owner();
        match st.devices.get(&key_of(owner, ctx_type)) {
            Some(d) => base.clone().with_device(d.clone()).unwrap_or(base),
            None => base,
        }
    }

    // --- registration --------------------------------------------------------

    /// Obtains a PAT for `owner` and registers every served type.
    pub async fn bootstrap(&self, owner: &SubjectId) -> Result<Vec<(ContextType, CtxId)>> {
        let pat = self.authz.issue_pat(owner).await?;
        self.state.lock().pats.insert(owner.email().to_string(), pat.token.clone());
        let mut out = Vec::new();
        for served in &self.config.served {
            let id = self.authz.register_resource(&pat.token, &served.ctx_type, &served.scopes).await?;
            let mut st = self.state.lock();
            self.ensure_resource(&mut st, owner, &served.ctx_type)?.assign_id(id.clone())?;
            out.push((served.ctx_type.clone(), id));
        }
        Ok(out)
    }

    /// The ctx_id of the owner's resource of `ctx_type`, as fetched by the user.
    pub fn ctx_id_for(&self, owner: &SubjectId, ctx_type: &ContextType) -> Result<CtxId> {
        self.state
            .lock()
            .resources
            .get(&key_of(owner, ctx_type))
            .and_then(|r| r.ctx_id().cloned())
            .ok_or_else(|| Error::UnknownContextType(ctx_type.to_string()))
    }

    pub fn ctx_ids_for(&self, owner: &SubjectId) -> Vec<(ContextType, CtxId)> {
        self.state
            .lock()
            .resources
            .iter()
            .filter(|((email, _), _)| email == owner.email())
            .filter_map(|((_, t), r)| Some((t.clone(), r.ctx_id()?.clone())))
            .collect()
    }

    pub fn resource(&self, owner: &SubjectId, ctx_type: &ContextType) -> Option<ContextResource> {
        self.state.lock().resources.get(&key_of(owner, ctx_type)).cloned()
    }

    fn resource_by_id(st: &CapState, ctx_id: &CtxId) -> Option<ContextResource> {
        st.resources.values().find(|r| r.ctx_id() == Some(ctx_id)).cloned()
    }

    // --- ingest --------------------------------------------------------------

    /// Folds an observation into the subject's resource and streams the change.
    pub async fn ingest(&self, obs: Observation) -> Result<IngestOutcome> {
        if !self.config.sources.contains(&obs.source) {
            return Err(Error::UnknownSource(obs.source));
        }
        let served = self
            .config
            .served(&obs.ctx_type)
            .ok_or_else(|| Error::UnsupportedContextType(obs.ctx_type.to_string()))?
            .clone();
        let vocab = served.rule.vocabulary();
        if let Some(k) = obs.payload.keys().find(|k| !vocab.contains(&k.as_str())) {
            return Err(Error::VocabularyViolation(format!("unexpected key {k:?}")));
        }
        let text = |name: &str| -> Result<String> {
            obs.payload
                .get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::VocabularyViolation(format!("missing string {name:?}")))
        };

        let (ctx_id, derived, changed) = {
            let mut st = self.state.lock();
            let key = key_of(&obs.subject, &obs.ctx_type);
            let device = obs.subject.device_name().unwrap_or("").to_string();
            let current = self.ensure_resource(&mut st, &obs.subject, &obs.ctx_type)?.values().clone();
            let mut stored = current.clone();
            let mut derived = ContextValueSet::new();
            match &served.rule {
                DerivationRule::UsedIp => {
                    let ip = text("ip")?;
                    let seen = st
                        .sightings
                        .entry((obs.subject.email().to_string(), device.clone()))
                        .or_default();
                    let previously = !seen.insert(ip.clone());
                    let seen = seen.clone();
                    derived.insert("ip:current", ip.clone())?;
                    derived.insert(format!("used:ip:{ip}"), previously)?;
                    let ip_scope = Scope::new("ip")?;
                    let used_scope = Scope::new("used:ip")?;
                    stored.retain(|k, _| !ip_scope.covers(k) && !used_scope.covers(k));
                    stored.insert("ip:current", ip)?;
                    for addr in seen {
                        stored.insert(format!("used:ip:{addr}"), true)?;
                    }
                }
                DerivationRule::VersionCurrency { latest } => {
                    let version = text("version")?;
                    let current = compare_versions(&version, latest)? != Ordering::Less;
                    derived.insert("up-to-date", current)?;
                    derived.insert("version:installed", version)?;
                    stored.insert("up-to-date", current)?;
                    stored.insert("version:installed", derived.get("version:installed").cloned().unwrap_or_default())?;
                }
                DerivationRule::WifiWhitelist { trusted } => {
                    let ap = text("wifi-ap")?;
                    derived.insert("wifi-ap:trusted", trusted.contains(&ap))?;
                    derived.insert("wifi-ap:current", ap.clone())?;
                    stored.insert("wifi-ap:trusted", trusted.contains(&ap))?;
                    stored.insert("wifi-ap:current", ap)?;
                }
                DerivationRule::Aggregate => {
                    return Err(Error::VocabularyViolation(format!(
                        "{} accepts no direct observations",
                        obs.ctx_type
                    )));
                }
            }
            let device_changed = !device.is_empty() && st.devices.get(&key) != Some(&device);
            if !device.is_empty() {
                st.devices.insert(key.clone(), device);
            }
            let resource = st.resources.get_mut(&key).expect("ensured above");
            let changed = stored != current || device_changed;
            resource.set_values(stored)?;
            (resource.ctx_id().cloned(), derived, changed)
        };

        let transmitted = if changed {
            self.fan_out(&obs.subject.owner(), &obs.ctx_type, None).await
        } else {
            Vec::new()
        };
        Ok(IngestOutcome {
            ctx_id,
            derived,
            changed,
            transmitted,
        })
    }

    /// Sends the current view of one resource to approved streams, after
    /// re-checking the RPT behind each approval.
    async fn fan_out(&self, owner: &SubjectId, ctx_type: &ContextType, only: Option<&str>) -> Vec<Receipt> {
        let proofs = self.state.lock().registry.approved_proofs(ctx_type, owner);
        for (stream_id, rpt) in proofs {
            if only.is_some_and(|o| o != stream_id) {
                continue;
            }
            let active = self.authz.introspect(&rpt).await.map(|i| i.active).unwrap_or(false);
            if !active {
                self.state.lock().registry.revoke_subject(&stream_id, owner);
            }
        }
        let results = {
            let mut st = self.state.lock();
            let Some(resource) = st.resources.get(&key_of(owner, ctx_type)).cloned() else {
                return Vec::new();
            };
            let subject = Self::event_subject(&st, owner, ctx_type);
            let issuer = self.config.issuer.clone();
            st.registry.on_context_update(&resource, &subject, only, |aud, values| {
                self.encoder.encode_event(&issuer, aud, &subject, ctx_type, values)
            })
        };
        let receipts: Vec<Receipt> = results.into_iter().filter_map(Result::ok).collect();
        let streams: BTreeSet<String> = receipts.iter().map(|r| r.stream_id.clone()).collect();
        for stream_id in streams {
            let _ = self.deliver(&stream_id).await;
        }
        receipts
    }

    /// Pushes everything queued on a push stream, in order.
    /// On failure the rest stays queued and a retry is scheduled.
    pub async fn deliver(&self, stream_id: &str) -> Result<usize> {
        let lock = self
            .delivery_locks
            .lock()
            .entry(stream_id.to_string())
            .or_default()
            .clone();
        let _guard = lock.lock().await;
        let mut sent = 0;
        loop {
            let next = self.state.lock().registry.next_pending(stream_id);
            let Some((endpoint, queued)) = next else { return Ok(sent) };
            match self.pusher.push(&endpoint, &queued.token).await {
                Ok(()) => {
                    self.state.lock().registry.acknowledge(stream_id, queued.seq);
                    sent += 1;
                }
                Err(e) => {
                    tracing::warn!(stream_id, %endpoint, error = %e, "push failed; will retry");
                    self.schedule_retry(stream_id);
                    return Err(Error::DeliveryFailed(e.to_string()));
                }
            }
        }
    }

    fn schedule_retry(&self, stream_id: &str) {
        let Ok(handle) = tokio::runtime::Handle::try_current() else { return };
        let Some(me) = self.me.upgrade() else { return };
        if !self.retrying.lock().insert(stream_id.to_string()) {
            return;
        }
        let stream_id = stream_id.to_string();
        handle.spawn(async move {
            for attempt in 0..RETRY_ATTEMPTS {
                tokio::time::sleep(RETRY_BASE * 2u32.pow(attempt)).await;
                me.retrying.lock().remove(&stream_id);
                match me.deliver(&stream_id).await {
                    Ok(_) => return,
                    Err(_) => {
                        // `deliver` re-registered us; take the slot back and keep going.
                        me.retrying.lock().insert(stream_id.clone());
                    }
                }
            }
            me.retrying.lock().remove(&stream_id);
        });
    }

    /// Retries every push stream with a backlog. Returns tokens delivered.
    pub async fn flush(&self) -> usize {
        let streams = self.state.lock().registry.push_streams_with_backlog();
        let mut sent = 0;
        for s in streams {
            sent += self.deliver(&s).await.unwrap_or(0);
        }
        sent
    }

    pub fn pending_count(&self) -> usize {
        self.state.lock().registry.pending_count()
    }

    // --- context requests ------------------------------------------------------

    /// Serves a context request: the scoped view under an active RPT, a
    /// ticket challenge otherwise.
    pub async fn handle_context_request(
        &self,
        requester: &str,
        ctx_id: &CtxId,
        scopes: &ScopeSet,
        rpt: Option<&str>,
    ) -> Result<ContextReply> {
        let resource = Self::resource_by_id(&self.state.lock(), ctx_id)
            .ok_or_else(|| Error::UnknownCtxId(ctx_id.to_string()))?;
        if let Some(rpt) = rpt {
            let info = self.authz.introspect(rpt).await?;
            let granted = info
                .scopes_for(ctx_id)
                .filter(|_| info.active && info.requesting_party.as_deref() == Some(requester));
            if let Some(granted) = granted {
                let view = filter_by_scopes(&resource, &granted);
                let set = if view.is_empty() {
                    None
                } else {
                    let subject = Self::event_subject(&self.state.lock(), resource.owner(), resource.ctx_type());
                    let (_, token) =
                        self.encoder
                            .encode_event(&self.config.issuer, requester, &subject, resource.ctx_type(), &view)?;
                    Some(token)
                };
                return Ok(ContextReply::Granted {
                    set,
                    introspected: true,
                    scopes: granted,
                });
            }
        }
        let pat = self
            .state
            .lock()
            .pats
            .get(resource.owner().email())
            .cloned()
            .ok_or(Error::InvalidPat)?;
        let ticket = self.authz.permission_ticket(&pat, ctx_id, scopes).await?;
        Ok(ContextReply::Challenge {
            ticket: ticket.ticket,
            as_uri: self.authz.uri(),
        })
    }

    // --- stream management -----------------------------------------------------

    pub fn create_stream(&self, receiver: &str, request: StreamRequest) -> Result<StreamConfig> {
        self.state.lock().registry.create_stream(receiver, request, &self.ids)
    }

    pub fn get_stream(&self, receiver: &str, stream_id: &str) -> Result<StreamConfig> {
        self.state.lock().registry.get(stream_id, receiver).cloned()
    }

    pub fn streams(&self) -> Vec<StreamConfig> {
        self.state.lock().registry.streams().cloned().collect()
    }

    pub fn stream_log(&self, stream_id: &str) -> Result<Vec<Receipt>> {
        Ok(self.state.lock().registry.log(stream_id)?.to_vec())
    }

    pub fn stream_subjects(&self, stream_id: &str) -> Result<Vec<SubjectEntry>> {
        self.state.lock().registry.subjects(stream_id)
    }

    /// Pauses or resumes a stream. Resuming resends any view that changed
    /// while paused and drains the backlog.
    pub async fn set_stream_status(&self, receiver: &str, stream_id: &str, status: StreamStatus) -> Result<StreamConfig> {
        let config = self.state.lock().registry.set_status(stream_id, receiver, status)?;
        if status == StreamStatus::Enabled {
            self.resync(&config).await;
            let _ = self.deliver(stream_id).await;
        }
        Ok(config)
    }

    pub fn delete_stream(&self, receiver: &str, stream_id: &str) -> Result<StreamConfig> {
        self.state.lock().registry.delete(stream_id, receiver)
    }

    pub fn poll(&self, receiver: &str, stream_id: &str) -> Result<Vec<String>> {
        self.state.lock().registry.poll(stream_id, receiver)
    }

    async fn resync(&self, config: &StreamConfig) {
        let owners: Vec<SubjectId> = self
            .state
            .lock()
            .registry
            .subjects(&config.stream_id)
            .map(|s| s.into_iter().map(|e| e.subject).collect())
            .unwrap_or_default();
        for owner in owners {
            for t in &config.requested_ctx_types {
                self.fan_out(&owner, t, Some(&config.stream_id)).await;
            }
        }
    }

    /// Adds a subject to a stream. The subject is approved only if the RPT is
    /// active, held by the stream's receiver, owned by the subject and grants
    /// scopes on the subject's resource of a type the stream carries.
    pub async fn add_subject(
        &self,
        receiver: &str,
        stream_id: &str,
        subject: &SubjectId,
        rpt: Option<&str>,
    ) -> Result<SubjectEntry> {
        let config = self.get_stream(receiver, stream_id)?;
        let approval = match rpt {
            None => Approval::Unproven,
            Some(rpt) => {
                let info = self.authz.introspect(rpt).await?;
                let valid = info.active
                    && info.requesting_party.as_deref() == Some(receiver)
                    && info.owner.as_ref().is_some_and(|o| o.user == subject.user);
                let mut granted = BTreeMap::new();
                if valid {
                    let st = self.state.lock();
                    for t in &config.requested_ctx_types {
                        let id = st.resources.get(&key_of(subject, t)).and_then(|r| r.ctx_id());
                        if let Some(scopes) = id.and_then(|id| info.scopes_for(id)) {
                            granted.insert(t.clone(), scopes);
                        }
                    }
                }
                if granted.is_empty() {
                    Approval::Rejected { rpt: rpt.to_string() }
                } else {
                    Approval::Approved {
                        rpt: rpt.to_string(),
                        granted,
                    }
                }
            }
        };
        let approved = matches!(approval, Approval::Approved { .. });
        let entry = self.state.lock().registry.add_subject(stream_id, subject, approval)?;
        if approved {
            for t in &config.requested_ctx_types {
                self.fan_out(&subject.owner(), t, Some(stream_id)).await;
            }
        }
        Ok(entry)
    }

    // --- upstream --------------------------------------------------------------

    /// Records the ctx_id the owner holds at an upstream CAP.
    pub fn register_upstream_ctx_id(&self, owner: &SubjectId, cap: &str, ctx_type: &ContextType, ctx_id: CtxId) -> Result<()> {
        if !self.config.upstream.iter().any(|u| u.cap == cap && &u.ctx_type == ctx_type) {
            return Err(Error::UnknownCap(cap.to_string()));
        }
        self.state
            .lock()
            .upstream_ids
            .insert((owner.email().to_string(), cap.to_string(), ctx_type.clone()), ctx_id);
        Ok(())
    }

    /// Runs the grant flow against every upstream CAP the owner registered a
    /// ctx_id for, then subscribes with a push stream to this CAP.
    pub async fn subscribe_upstream(&self, owner: &SubjectId) -> Result<Vec<Acquisition>> {
        let directory = self
            .upstream
            .clone()
            .ok_or_else(|| Error::Config("no upstream directory".into()))?;
        let mut out = Vec::new();
        for sub in &self.config.upstream {
            let key = (owner.email().to_string(), sub.cap.clone(), sub.ctx_type.clone());
            let Some(ctx_id) = self.state.lock().upstream_ids.get(&key).cloned() else { continue };
            let cap = directory.cap(&sub.cap)?;
            let acq = uma::acquire(
                AccessNeed {
                    party: &self.config.issuer,
                    subject: owner,
                    ctx_type: &sub.ctx_type,
                    ctx_id: &ctx_id,
                    scopes: &sub.scopes,
                },
                cap.as_ref(),
                self.authz.as_ref(),
            )
            .await?;
            if let Some(rpt) = acq.rpt() {
                let request = StreamRequest {
                    delivery: Delivery::Push {
                        endpoint: self.config.receive_endpoint.clone(),
                    },
                    requested_ctx_types: BTreeSet::from([sub.ctx_type.clone()]),
                };
                let stream_id = match cap.create_stream(request).await {
                    Ok(c) => c.stream_id,
                    Err(Error::DuplicateStream(id)) => id,
                    Err(e) => return Err(e),
                };
                cap.add_subject(&stream_id, owner, Some(rpt)).await?;
            }
            self.state.lock().acquisitions.push(acq.clone());
            out.push(acq);
        }
        Ok(out)
    }

    pub fn acquisitions(&self) -> Vec<Acquisition> {
        self.state.lock().acquisitions.clone()
    }

    /// Accepts a SET pushed by an upstream CAP and merges it locally.
    /// Returns the number of events that changed a resource.
    pub async fn receive_upstream(&self, token: &str) -> Result<usize> {
        let set = decode_and_verify(token, &self.config.issuer, &self.verifier)?;
        let mut touched = Vec::new();
        {
            let mut st = self.state.lock();
            if !st.seen_jti.insert(set.jti.clone()) {
                return Ok(0);
            }
            for (ctx_type, event) in &set.events {
                let Some(sub) = self
                    .config
                    .upstream
                    .iter()
                    .find(|u| u.cap == set.iss && &u.ctx_type == ctx_type)
                else {
                    continue;
                };
                let owner = event.subject.owner();
                let key = key_of(&owner, &sub.into);
                let base = self.ensure_resource(&mut st, &owner, &sub.into)?.clone();
                let merged = merge_contexts(&base, &event.values)?;
                if let Some(d) = event.subject.device_name() {
                    st.devices.entry(key.clone()).or_insert_with(|| d.to_string());
                }
                if merged != base {
                    st.resources.insert(key, merged);
                    touched.push((owner, sub.into.clone()));
                }
            }
        }
        for (owner, t) in &touched {
            self.fan_out(owner, t, None).await;
        }
        Ok(touched.len())
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }
}

#[async_trait]
impl SetReceiver for CapService {
    async fn receive(&self, token: &str) -> Result<()> {
        self.receive_upstream(token).await.map(|_| ())
    }
}
