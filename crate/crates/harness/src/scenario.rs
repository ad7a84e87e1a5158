//! Scenario scripts, the driver that runs them against a booted federation,
//! and the reports it produces.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ztf_client::wire::{AcquireReport, CtxIdEntry, UpstreamCtxId};
use ztf_core::authz::{AuthzEvent, ConsentPrompt, PolicyRule};
use ztf_core::cap::{IngestOutcome, Observation};
use ztf_core::error::Error;
use ztf_core::model::{scope_of, ContextType, ScopeSet, SubjectId};
use ztf_core::rp::{AccessDecision, CtxRegistration, Effect, RpAudit};
use ztf_core::uma::Acquisition;

use crate::boot::Federation;
use crate::HarnessError;

/// One scripted action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    /// Consent to every CAP, register resources, apply the topology's
    /// grants, link upstream contexts, and register ctx_ids at every RP.
    Enroll { user: String },
    /// Signs in at an IdP for one RP; the token is kept under `slot`.
    Login { slot: String, user: String, issuer: String, rp: String },
    /// Obtains a token without the user's credential.
    Forge { slot: String, user: String, issuer: String, rp: String },
    Access {
        label: String,
        rp: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<String>,
        ip: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<Effect>,
    },
    Observe {
        label: String,
        source: String,
        cap: String,
        ctx_type: ContextType,
        user: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        payload: BTreeMap<String, Value>,
    },
    /// Sets a rule, or removes it when its scope set is empty.
    PolicyEdit { user: String, rule: PolicyRule },
    Compromise { issuer: String, flag: bool },
    ClockAdvance { seconds: i64 },
}

impl Step {
    pub fn label(&self) -> String {
        match self {
            Step::Enroll { user } => format!("enroll {user}"),
            Step::Login { slot, .. } => format!("login {slot}"),
            Step::Forge { slot, .. } => format!("forge {slot}"),
            Step::Access { label, .. } | Step::Observe { label, .. } => label.clone(),
            Step::PolicyEdit { rule, .. } => format!("policy {} {}", rule.requesting_party, rule.ctx_type),
            Step::Compromise { issuer, flag } => format!("compromise {issuer} {flag}"),
            Step::ClockAdvance { seconds } => format!("clock +{seconds}s"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub steps: Vec<Step>,
}

impl ScenarioScript {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Which grant an RP holds per context, as `cap ctx_type`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantInUse {
    pub ctx_id: String,
    pub rpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub status: u16,
    pub decision: AccessDecision,
    pub grants: BTreeMap<String, GrantInUse>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Enrollment {
    pub consents: Vec<ConsentPrompt>,
    pub ctx_ids: BTreeMap<String, Vec<CtxIdEntry>>,
    pub upstream: Vec<Acquisition>,
    pub registrations: Vec<CtxRegistration>,
    pub acquisitions: BTreeMap<String, AcquireReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub label: String,
    pub step: Step,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Effect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<Effect>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access: Option<AccessOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<IngestOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrolled: Option<Enrollment>,
    /// SETs each RP has accepted once the step settled.
    pub deliveries: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: Value) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub verdict: Verdict,
    pub steps: Vec<StepRecord>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn step(&self, label: &str) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.label == label)
    }
}

struct Driver<'a> {
    fed: &'a Federation,
    slots: HashMap<String, String>,
}

fn grants_in_use(audit: &RpAudit) -> BTreeMap<String, GrantInUse> {
    let mut out = BTreeMap::new();
    for a in &audit.acquisitions {
        if let Some(rpt) = a.rpt() {
            out.insert(
                format!("{} {}", a.cap, a.ctx_type),
                GrantInUse {
                    ctx_id: a.ctx_id.to_string(),
                    rpt: rpt.to_string(),
                },
            );
        }
    }
    out
}

impl Driver<'_> {
    fn token(&self, slot: &str) -> Result<&str, HarnessError> {
        self.slots
            .get(slot)
            .map(String::as_str)
            .ok_or_else(|| HarnessError::Config(format!("no token in slot {slot}")))
    }

    async fn enroll(&self, email: &str) -> Result<Enrollment, HarnessError> {
        let fed = self.fed;
        let spec = fed.spec();
        let owner = fed.owner(email).await?;
        let mut out = Enrollment::default();

        for c in &spec.caps {
            let user = fed.cap_user(&c.config.issuer, email)?;
            let ids = match user.enroll().await {
                Err(Error::ConsentAbsent { prompt_id: Some(p) }) => {
                    out.consents.push(owner.respond_consent(&p, true).await?);
                    user.enroll().await?
                }
                other => other?,
            };
            out.ctx_ids.insert(c.config.issuer.clone(), ids);
        }
        out.consents.extend(owner.consent_prompts().await?.into_iter().filter(|p| p.automatic));

        for g in &spec.grants {
            owner
                .set_policy(&PolicyRule {
                    requesting_party: g.requesting_party.clone(),
                    ctx_type: g.ctx_type.clone(),
                    scopes: g.scopes.clone(),
                    effect: ztf_core::authz::Effect::Allow,
                })
                .await?;
        }

        let ctx_id_of = |cap: &str, ctx_type: &ContextType| {
            out.ctx_ids
                .get(cap)
                .and_then(|ids| ids.iter().find(|e| &e.ctx_type == ctx_type))
                .map(|e| e.ctx_id.clone())
                .ok_or_else(|| HarnessError::Config(format!("{email} has no {ctx_type} at {cap}")))
        };

        let mut upstream = Vec::new();
        for c in spec.caps.iter().filter(|c| !c.config.upstream.is_empty()) {
            let user = fed.cap_user(&c.config.issuer, email)?;
            for u in &c.config.upstream {
                let entry = UpstreamCtxId {
                    cap: u.cap.clone(),
                    ctx_type: u.ctx_type.clone(),
                    ctx_id: ctx_id_of(&u.cap, &u.ctx_type)?,
                };
                user.register_upstream(&entry).await?;
            }
            upstream.extend(user.subscribe_upstream().await?);
        }

        let mut registrations = Vec::new();
        let mut acquisitions = BTreeMap::new();
        for r in &spec.rps {
            let issuer = r
                .config
                .trusted_idps
                .first()
                .ok_or_else(|| HarnessError::Config(format!("{} trusts no IdP", r.config.issuer)))?;
            let password = spec.user(email).map(|u| u.password.clone());
            let token = fed.idp()?.token(issuer, email, password.as_deref(), &r.config.issuer).await?;
            let rp = fed.rp(&r.config.issuer);
            for need in &r.config.needs {
                let entry = UpstreamCtxId {
                    cap: need.cap.clone(),
                    ctx_type: need.ctx_type.clone(),
                    ctx_id: ctx_id_of(&need.cap, &need.ctx_type)?,
                };
                registrations.push(rp.register_ctx_id(&token, &entry).await?);
            }
            acquisitions.insert(r.config.issuer.clone(), rp.acquire(&token).await?);
        }
        out.upstream = upstream;
        out.registrations = registrations;
        out.acquisitions = acquisitions;
        Ok(out)
    }

    async fn deliveries(&self) -> Result<BTreeMap<String, usize>, HarnessError> {
        let mut out = BTreeMap::new();
        for r in &self.fed.spec().rps {
            let audit = self.fed.rp(&r.config.issuer).audit().await?;
            out.insert(r.config.issuer.clone(), audit.deliveries.len());
        }
        Ok(out)
    }

    async fn run_step(&mut self, index: usize, step: &Step) -> Result<StepRecord, HarnessError> {
        let fed = self.fed;
        let mut record = StepRecord {
            index,
            label: step.label(),
            step: step.clone(),
            expected: None,
            actual: None,
            passed: true,
            access: None,
            observed: None,
            enrolled: None,
            deliveries: BTreeMap::new(),
        };
        match step {
            Step::Enroll { user } => record.enrolled = Some(self.enroll(user).await?),
            Step::Login { slot, user, issuer, rp } => {
                let password = fed.spec().user(user).map(|u| u.password.clone());
                let token = fed.idp()?.token(issuer, user, password.as_deref(), rp).await?;
                self.slots.insert(slot.clone(), token);
            }
            Step::Forge { slot, user, issuer, rp } => {
                let token = fed.idp()?.token(issuer, user, None, rp).await?;
                self.slots.insert(slot.clone(), token);
            }
            Step::Access {
                rp,
                slot,
                ip,
                device,
                expect,
                ..
            } => {
                let token = slot.as_deref().map(|s| self.token(s)).transpose()?;
                let client = fed.rp(rp);
                let reply = client.access("/protected", token, ip, device.as_deref()).await?;
                fed.quiesce().await?;
                let audit = client.audit().await?;
                record.expected = *expect;
                record.actual = Some(reply.decision.effect);
                // Step-up counts as a denial: the harness has no second factor to offer.
                let effect = match reply.decision.effect {
                    Effect::StepUp => Effect::Deny,
                    e => e,
                };
                record.passed = expect.is_none_or(|e| e == effect);
                record.access = Some(AccessOutcome {
                    status: reply.status,
                    decision: reply.decision,
                    grants: grants_in_use(&audit),
                });
            }
            Step::Observe {
                source,
                cap,
                ctx_type,
                user,
                device,
                payload,
                ..
            } => {
                let mut subject = SubjectId::user(user.clone())?;
                if let Some(d) = device {
                    subject = subject.with_device(d.clone())?;
                }
                let obs = Observation {
                    source: source.clone(),
                    subject,
                    ctx_type: ctx_type.clone(),
                    payload: payload.clone(),
                    observed_at: ztf_core::clock::Clock::now(fed.clock()),
                };
                let outcome = ztf_core::ports::CapApi::observe(fed.cap_as(source, cap)?.as_ref(), obs).await?;
                record.observed = Some(outcome);
            }
            Step::PolicyEdit { user, rule } => {
                let owner = fed.owner(user).await?;
                if rule.scopes.is_empty() {
                    owner.remove_policy(&rule.requesting_party, &rule.ctx_type).await?;
                } else {
                    owner.set_policy(rule).await?;
                }
            }
            Step::Compromise { issuer, flag } => fed.idp()?.set_compromised(issuer, *flag).await?,
            Step::ClockAdvance { seconds } => {
                fed.clock().advance(*seconds);
                fed.authz_admin()?.sweep().await?;
            }
        }
        fed.quiesce().await?;
        record.deliveries = self.deliveries().await?;
        Ok(record)
    }
}

/// Runs each step in order, settling deliveries between steps.
pub async fn run_script(fed: &Federation, script: &ScenarioScript) -> Result<Vec<StepRecord>, HarnessError> {
    let mut driver = Driver {
        fed,
        slots: HashMap::new(),
    };
    let mut out = Vec::new();
    for (index, step) in script.steps.iter().enumerate() {
        let record = driver
            .run_step(index, step)
            .await
            .map_err(|e| HarnessError::ScenarioAborted {
                step: index,
                label: step.label(),
                reason: e.to_string(),
            })?;
        tracing::info!(step = index, label = %record.label, passed = record.passed, "step done");
        out.push(record);
    }
    Ok(out)
}

/// Every key each RP received must fall under a scope some RPT granted it
/// on that owner's resource.
pub async fn scope_confinement(fed: &Federation) -> Result<Check, HarnessError> {
    let log = fed.authz_admin()?.log().await?;
    let mut resources = HashMap::new();
    for e in &log {
        if let AuthzEvent::ResourceRegistered {
            ctx_id,
            owner,
            cap,
            ctx_type,
        } = e
        {
            resources.insert(ctx_id.clone(), (owner.clone(), cap.clone(), ctx_type.clone()));
        }
    }
    let mut granted: HashMap<(String, String, String, ContextType), ScopeSet> = HashMap::new();
    for e in &log {
        if let AuthzEvent::RptIssued {
            requesting_party, grants, ..
        } = e
        {
            for p in grants {
                if let Some((owner, cap, ctx_type)) = resources.get(&p.ctx_id) {
                    granted
                        .entry((requesting_party.clone(), owner.clone(), cap.clone(), ctx_type.clone()))
                        .or_default()
                        .extend(p.scopes.iter().cloned());
                }
            }
        }
    }
    let mut checked = 0usize;
    let mut violations = Vec::new();
    let empty = ScopeSet::new();
    for r in &fed.spec().rps {
        let audit = fed.rp(&r.config.issuer).audit().await?;
        for d in &audit.deliveries {
            let key = (r.config.issuer.clone(), d.subject.clone(), d.iss.clone(), d.ctx_type.clone());
            let allowed = granted.get(&key).unwrap_or(&empty);
            for k in &d.keys {
                checked += 1;
                if scope_of(k, allowed).is_none() {
                    violations.push(json!({"rp": r.config.issuer, "jti": d.jti, "key": k}));
                }
            }
        }
    }
    Ok(Check::new(
        "scope-confinement",
        violations.is_empty(),
        json!({"entries_checked": checked, "violations": violations}),
    ))
}
