//! Policy decision point. Pure: the decision depends only on the policy, the
//! verified identity claims, the request and a context snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::IdentityClaims;
use crate::error::{Error, Result};
use crate::model::{ContextType, ContextValueSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    Allow,
    Deny,
    StepUp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Test {
    Equals(Value),
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `key` may contain `{ip}`, `{device}` and `{user}`.
    Context {
        cap: String,
        ctx_type: ContextType,
        key: String,
        test: Test,
    },
    Claim {
        name: String,
        test: Test,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub effect: Effect,
    /// All must hold.
    pub when: Vec<Condition>,
}

/// Ordered rules, first match wins; `default` applies when none matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub rules: Vec<Rule>,
    #[serde(default = "deny")]
    pub default: Effect,
}

fn deny() -> Effect {
    Effect::Deny
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            rules: Vec::new(),
            default: Effect::Deny,
        }
    }
}

impl DecisionPolicy {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("decision policy: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// `(cap, ctx_type)` pairs the rules read.
    pub fn context_sources(&self) -> Vec<(String, ContextType)> {
        let mut out: Vec<(String, ContextType)> = Vec::new();
        for c in self.rules.iter().flat_map(|r| &r.when) {
            if let Condition::Context { cap, ctx_type, .. } = c {
                if !out.iter().any(|(a, b)| a == cap && b == ctx_type) {
                    out.push((cap.clone(), ctx_type.clone()));
                }
            }
        }
        out
    }
}

/// Request attributes a key template can refer to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFacts {
    pub user: String,
    pub ip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Present,
    /// The view exists but lacks the key.
    Absent,
    /// Older than the staleness bound.
    Stale,
    /// The context describes another device than the one making the request.
    DeviceMismatch,
    /// No grant for this context, or nothing received yet.
    NotAcquired,
}

/// What the PIP holds for one `(cap, ctx_type)` at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextView {
    pub status: EntryStatus,
    #[serde(default)]
    pub values: ContextValueSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_at: Option<i64>,
}

impl ContextView {
    pub fn missing(status: EntryStatus) -> Self {
        ContextView {
            status,
            values: ContextValueSet::new(),
            jti: None,
            received_at: None,
        }
    }
}

pub type ContextSnapshot = BTreeMap<(String, ContextType), ContextView>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsultedEntry {
    pub cap: String,
    pub ctx_type: ContextType,
    pub key: String,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimEntry {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub effect: Effect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    pub reason: String,
    pub claims: Vec<ClaimEntry>,
    pub evidence: Vec<ConsultedEntry>,
}

pub fn claim_entries(claims: &IdentityClaims) -> Vec<ClaimEntry> {
    [("iss", &claims.iss), ("sub", &claims.sub), ("aud", &claims.aud)]
        .into_iter()
        .map(|(n, v)| ClaimEntry {
            name: n.to_string(),
            value: v.clone(),
        })
        .collect()
}

fn expand(template: &str, facts: &RequestFacts) -> String {
    template
        .replace("{ip}", &facts.ip)
        .replace("{user}", &facts.user)
        .replace("{device}", facts.device.as_deref().unwrap_or(""))
}

fn lookup(snapshot: &ContextSnapshot, cap: &str, ctx_type: &ContextType, key: &str) -> ConsultedEntry {
    let view = snapshot.get(&(cap.to_string(), ctx_type.clone()));
    let (status, value, jti) = match view {
        None => (EntryStatus::NotAcquired, None, None),
        Some(v) if v.status != EntryStatus::Present => (v.status, None, v.jti.clone()),
        Some(v) => match v.values.get(key) {
            Some(value) => (EntryStatus::Present, Some(value.clone()), v.jti.clone()),
            None => (EntryStatus::Absent, None, v.jti.clone()),
        },
    };
    ConsultedEntry {
        cap: cap.to_string(),
        ctx_type: ctx_type.clone(),
        key: key.to_string(),
        status,
        value,
        jti,
    }
}

fn passes(test: &Test, value: Option<&Value>) -> bool {
    match test {
        Test::Equals(want) => value == Some(want),
        Test::Present => value.is_some(),
        Test::Absent => value.is_none(),
    }
}

/// Evaluates `policy` for a verified identity. Every context entry any rule
/// refers to is recorded in the evidence, in order of first reference.
pub fn decide(
    policy: &DecisionPolicy,
    claims: &IdentityClaims,
    facts: &RequestFacts,
    snapshot: &ContextSnapshot,
) -> Decision {
    let claim_list = claim_entries(claims);
    let mut evidence: Vec<ConsultedEntry> = Vec::new();
    let mut consult = |cap: &str, ctx_type: &ContextType, key: &str| -> ConsultedEntry {
        let entry = lookup(snapshot, cap, ctx_type, key);
        if !evidence
            .iter()
            .any(|e| e.cap == entry.cap && e.ctx_type == entry.ctx_type && e.key == entry.key)
        {
            evidence.push(entry.clone());
        }
        entry
    };
    let mut verdict: Option<&Rule> = None;
    for rule in &policy.rules {
        let mut holds = true;
        for cond in &rule.when {
            let ok = match cond {
                Condition::Context {
                    cap,
                    ctx_type,
                    key,
                    test,
                } => {
                    let entry = consult(cap, ctx_type, &expand(key, facts));
                    passes(test, entry.value.as_ref())
                }
                Condition::Claim { name, test } => {
                    let value = claim_list
                        .iter()
                        .find(|c| &c.name == name)
                        .map(|c| Value::String(c.value.clone()));
                    passes(test, value.as_ref())
                }
            };
            holds &= ok;
        }
        if holds && verdict.is_none() {
            verdict = Some(rule);
        }
    }
    match verdict {
        Some(rule) => Decision {
            effect: rule.effect,
            rule: Some(rule.name.clone()),
            reason: format!("rule {:?} matched", rule.name),
            claims: claim_list,
            evidence,
        },
        None => Decision {
            effect: policy.default,
            rule: None,
            reason: "no rule matched; default applies".into(),
            claims: claim_list,
            evidence,
        },
    }
}
