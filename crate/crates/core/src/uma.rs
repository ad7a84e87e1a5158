//! Requesting-party side of the grant flow: ask the CAP, take the ticket to
//! the authorization server, come back with the RPT.
//!
//! Relying parties use it for their own context needs, and a CAP uses it
//! when it subscribes to another CAP.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::authz::{ClaimsDocument, GrantOutcome};
use crate::error::Result;
use crate::model::{ContextType, CtxId, ScopeSet, SubjectId};
use crate::ports::{AuthzApi, CapApi, ContextReply};

/// One numbered step of the grant flow, with the evidence observed for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowStep {
    pub step: u8,
    pub from: String,
    pub to: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub evidence: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTrace(pub Vec<FlowStep>);

impl FlowTrace {
    pub fn record(&mut self, step: u8, from: &str, to: &str, action: &str, evidence: Value) {
        self.0.push(FlowStep {
            step,
            from: from.to_string(),
            to: to.to_string(),
            action: action.to_string(),
            evidence,
        });
    }

    pub fn steps(&self) -> Vec<u8> {
        self.0.iter().map(|s| s.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AcquireOutcome {
    Granted {
        rpt: String,
        scopes: ScopeSet,
        /// The context returned on the final request, if any was in scope.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        set: Option<String>,
    },
    Denied {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acquisition {
    pub cap: String,
    pub ctx_type: ContextType,
    pub ctx_id: CtxId,
    pub requested: ScopeSet,
    pub outcome: AcquireOutcome,
    pub trace: FlowTrace,
}

impl Acquisition {
    pub fn rpt(&self) -> Option<&str> {
        match &self.outcome {
            AcquireOutcome::Granted { rpt, .. } => Some(rpt),
            AcquireOutcome::Denied { .. } => None,
        }
    }
}

/// What the requester wants, and on whose behalf.
pub struct AccessNeed<'a> {
    pub party: &'a str,
    pub subject: &'a SubjectId,
    pub ctx_type: &'a ContextType,
    pub ctx_id: &'a CtxId,
    pub scopes: &'a ScopeSet,
}

/// Runs the whole flow, recording all eleven steps when it succeeds.
pub async fn acquire(need: AccessNeed<'_>, cap: &dyn CapApi, authz: &dyn AuthzApi) -> Result<Acquisition> {
    let party = need.party;
    let cap_uri = cap.uri();
    let as_uri = authz.uri();
    let mut trace = FlowTrace::default();
    let done = |trace: FlowTrace, outcome: AcquireOutcome| Acquisition {
        cap: cap_uri.clone(),
        ctx_type: need.ctx_type.clone(),
        ctx_id: need.ctx_id.clone(),
        requested: need.scopes.clone(),
        outcome,
        trace,
    };

    trace.record(1, party, party, "identify user", json!({ "subject": need.subject }));
    trace.record(
        2,
        party,
        party,
        "determine context type and scopes",
        json!({ "ctx_type": need.ctx_type, "scopes": need.scopes }),
    );
    trace.record(
        3,
        party,
        &cap_uri,
        "request context without RPT",
        json!({ "ctx_id": need.ctx_id, "scopes": need.scopes }),
    );
    let ticket = match cap.request_context(need.ctx_id, need.scopes, None).await? {
        ContextReply::Challenge { ticket, as_uri: named } => {
            trace.record(4, &cap_uri, &named, "fetch permission ticket", json!({ "ticket": ticket }));
            trace.record(5, &cap_uri, party, "401 with permission ticket", json!({ "as_uri": named }));
            ticket
        }
        ContextReply::Granted { .. } => {
            return Ok(done(
                trace,
                AcquireOutcome::Denied {
                    reason: "CAP answered an unauthorized request".into(),
                },
            ));
        }
    };

    let claims = ClaimsDocument::for_party(party);
    trace.record(6, party, &as_uri, "present ticket and claims", json!({ "claims": claims }));
    let outcome = authz.grant_rpt(&ticket, &claims).await?;
    let (rpt, evaluation) = match outcome {
        GrantOutcome::Granted { rpt, evaluation } => (rpt, evaluation),
        GrantOutcome::Denied { reason, evaluation } => {
            trace.record(
                7,
                &as_uri,
                &as_uri,
                "evaluate owner policy",
                json!({ "evaluation": evaluation, "decision": "deny" }),
            );
            return Ok(done(trace, AcquireOutcome::Denied { reason }));
        }
    };
    trace.record(
        7,
        &as_uri,
        &as_uri,
        "evaluate owner policy",
        json!({ "evaluation": evaluation, "decision": "permit" }),
    );
    trace.record(
        8,
        &as_uri,
        party,
        "issue RPT",
        json!({ "rpt": rpt.token, "grants": rpt.grants, "expires_at": rpt.expires_at }),
    );

    trace.record(9, party, &cap_uri, "request context with RPT", json!({ "ctx_id": need.ctx_id }));
    match cap.request_context(need.ctx_id, need.scopes, Some(&rpt.token)).await? {
        ContextReply::Granted {
            set,
            introspected,
            scopes,
        } => {
            trace.record(10, &cap_uri, &as_uri, "verify RPT", json!({ "introspected": introspected }));
            trace.record(
                11,
                &cap_uri,
                party,
                "provide contexts limited to granted scopes",
                json!({ "scopes": scopes, "delivered": set.is_some() }),
            );
            Ok(done(
                trace,
                AcquireOutcome::Granted {
                    rpt: rpt.token,
                    scopes,
                    set,
                },
            ))
        }
        ContextReply::Challenge { .. } => Ok(done(
            trace,
            AcquireOutcome::Denied {
                reason: "CAP rejected the RPT".into(),
            },
        )),
    }
}
