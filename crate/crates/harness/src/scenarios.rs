//! The built-in scenarios on the default topology, and their checks.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use ztf_core::rp::pdp::ConsultedEntry;
use ztf_core::rp::{Effect, EntryStatus};

use crate::boot::Federation;
use crate::scenario::{run_script, scope_confinement, Check, ScenarioReport, ScenarioScript, Step, StepRecord, Verdict};
use crate::topology::*;
use crate::HarnessError;

pub const DEVICE_HEALTH: &str = "device-health";
pub const CROSS_RP_SHARING: &str = "cross-rp-sharing";
pub const IDP_SWITCH: &str = "idp-switch";
pub const COMPROMISED_IDP: &str = "compromised-idp";
pub const EMPTY: &str = "empty";

pub const SCENARIOS: [&str; 4] = [DEVICE_HEALTH, CROSS_RP_SHARING, IDP_SWITCH, COMPROMISED_IDP];

const ALICE: &str = "alice@example.com";
const LAPTOP: &str = "alice-no-Laptop";
const NET_X: &str = "192.0.2.1";
const NET_Y: &str = "203.0.113.9";
const NET_Z: &str = "198.51.100.7";
const ATTACKER_NET: &str = "203.0.113.66";
const ATTACKER_DEVICE: &str = "mallory-pc";

fn enroll() -> Step {
    Step::Enroll { user: ALICE.into() }
}

fn login(slot: &str, issuer: &str, rp: &str) -> Step {
    Step::Login {
        slot: slot.into(),
        user: ALICE.into(),
        issuer: issuer.into(),
        rp: rp.into(),
    }
}

fn access(label: &str, rp: &str, slot: &str, ip: &str, device: &str, expect: Effect) -> Step {
    Step::Access {
        label: label.into(),
        rp: rp.into(),
        slot: Some(slot.into()),
        ip: ip.into(),
        device: Some(device.into()),
        expect: Some(expect),
    }
}

fn agent_reports(label: &str, version: &str) -> Step {
    Step::Observe {
        label: label.into(),
        source: CAP2_AGENT.into(),
        cap: CAP2.into(),
        ctx_type: device_health(),
        user: ALICE.into(),
        device: Some(LAPTOP.into()),
        payload: BTreeMap::from([("version".to_string(), json!(version))]),
    }
}

fn associates(label: &str, ap: &str) -> Step {
    Step::Observe {
        label: label.into(),
        source: CAP3_WIFI.into(),
        cap: CAP3.into(),
        ctx_type: wifi_ap(),
        user: ALICE.into(),
        device: Some(LAPTOP.into()),
        payload: BTreeMap::from([("wifi-ap".to_string(), json!(ap))]),
    }
}

/// The script behind a built-in scenario name.
pub fn script(name: &str) -> Option<ScenarioScript> {
    let steps = match name {
        DEVICE_HEALTH => vec![
            enroll(),
            associates("laptop joins corp-ap-1", "corp-ap-1"),
            agent_reports("agent reports 2.3.0", "2.3.0"),
            login("rp2", IDP3, RP2),
            access("rp2 outdated device", RP2, "rp2", NET_X, LAPTOP, Effect::Deny),
            agent_reports("agent reports 2.4.1", "2.4.1"),
            access("rp2 updated device", RP2, "rp2", NET_X, LAPTOP, Effect::Allow),
        ],
        CROSS_RP_SHARING => vec![
            enroll(),
            associates("laptop joins corp-ap-1", "corp-ap-1"),
            agent_reports("agent reports 2.4.1", "2.4.1"),
            login("rp2", IDP3, RP2),
            access("rp2 from X", RP2, "rp2", NET_X, LAPTOP, Effect::Allow),
            access("rp2 from Z", RP2, "rp2", NET_Z, LAPTOP, Effect::Allow),
            login("rp1", IDP1, RP1),
            access("rp1 from X", RP1, "rp1", NET_X, LAPTOP, Effect::Allow),
            access("rp1 from Y", RP1, "rp1", NET_Y, LAPTOP, Effect::Deny),
        ],
        IDP_SWITCH => vec![
            enroll(),
            associates("laptop joins corp-ap-1", "corp-ap-1"),
            agent_reports("agent reports 2.4.1", "2.4.1"),
            login("rp2", IDP3, RP2),
            access("rp2 from X", RP2, "rp2", NET_X, LAPTOP, Effect::Allow),
            login("via-idp2", IDP2, RP1),
            access("rp1 via IdP2", RP1, "via-idp2", NET_X, LAPTOP, Effect::Allow),
            login("via-idp1", IDP1, RP1),
            access("rp1 via IdP1", RP1, "via-idp1", NET_X, LAPTOP, Effect::Allow),
        ],
        COMPROMISED_IDP => vec![
            enroll(),
            associates("laptop joins corp-ap-1", "corp-ap-1"),
            agent_reports("agent reports 2.4.1", "2.4.1"),
            login("rp2", IDP3, RP2),
            access("rp2 legitimate", RP2, "rp2", NET_X, LAPTOP, Effect::Allow),
            Step::Compromise {
                issuer: IDP3.into(),
                flag: true,
            },
            Step::Forge {
                slot: "forged".into(),
                user: ALICE.into(),
                issuer: IDP3.into(),
                rp: RP2.into(),
            },
            access("rp2 forged identity", RP2, "forged", ATTACKER_NET, ATTACKER_DEVICE, Effect::Deny),
            Step::Compromise {
                issuer: IDP3.into(),
                flag: false,
            },
        ],
        EMPTY => Vec::new(),
        _ => return None,
    };
    Some(ScenarioScript {
        name: name.to_string(),
        description: String::new(),
        steps,
    })
}

fn evidence(step: Option<&StepRecord>) -> &[ConsultedEntry] {
    step.and_then(|s| s.access.as_ref())
        .map(|a| a.decision.decision.evidence.as_slice())
        .unwrap_or_default()
}

fn cites(step: Option<&StepRecord>, cap: &str, key: &str, status: EntryStatus, value: Option<Value>) -> bool {
    evidence(step)
        .iter()
        .any(|e| e.cap == cap && e.key == key && e.status == status && (value.is_none() || e.value == value))
}

fn find<'a>(steps: &'a [StepRecord], label: &str) -> Option<&'a StepRecord> {
    steps.iter().find(|s| s.label == label)
}

fn delivered_observations(step: &StepRecord) -> usize {
    step.access
        .as_ref()
        .map(|a| a.decision.observations.iter().filter(|o| o.delivered).count())
        .unwrap_or(0)
}

/// A decision as JSON with the `iss` claim taken out.
fn without_iss(step: Option<&StepRecord>) -> Option<Value> {
    let decision = &step?.access.as_ref()?.decision.decision;
    let mut v = serde_json::to_value(decision).ok()?;
    v["claims"].as_array_mut()?.retain(|c| c["name"] != "iss");
    Some(v)
}

fn scenario_checks(name: &str, steps: &[StepRecord]) -> Vec<Check> {
    match name {
        DEVICE_HEALTH => {
            let denied = find(steps, "rp2 outdated device");
            let allowed = find(steps, "rp2 updated device");
            vec![
                Check::new(
                    "denial-cites-outdated-device",
                    cites(denied, CAP2, "up-to-date", EntryStatus::Present, Some(json!(false))),
                    json!(evidence(denied)),
                ),
                Check::new(
                    "allow-after-agent-update",
                    cites(allowed, CAP2, "up-to-date", EntryStatus::Present, Some(json!(true))),
                    json!(evidence(allowed)),
                ),
            ]
        }
        CROSS_RP_SHARING => {
            let key = format!("used:ip:{NET_X}");
            let from_x = find(steps, "rp1 from X");
            let before = steps.iter().position(|s| s.label == "rp2 from X");
            let after = steps.iter().position(|s| s.label == "rp2 from Z");
            let chain = match (before, after) {
                (Some(b), Some(a)) if b > 0 => {
                    let received = steps[a].deliveries.get(RP1).copied().unwrap_or(0)
                        - steps[b - 1].deliveries.get(RP1).copied().unwrap_or(0);
                    let emitted: usize = steps[b..=a].iter().map(delivered_observations).sum();
                    (received == emitted && emitted > 0, json!({"received_at_rp1": received, "emitted_by_rp2": emitted}))
                }
                _ => (false, Value::Null),
            };
            vec![
                Check::new(
                    "rp1-cites-used-ip-from-cap1",
                    cites(from_x, CAP1, &key, EntryStatus::Present, Some(json!(true))),
                    json!(evidence(from_x)),
                ),
                Check::new("chain-count", chain.0, chain.1),
            ]
        }
        IDP_SWITCH => {
            let before = find(steps, "rp1 via IdP2");
            let after = find(steps, "rp1 via IdP1");
            let issuer = |s: Option<&StepRecord>| s.and_then(|s| s.access.as_ref()).and_then(|a| a.decision.identity.issuer.clone());
            let grants = |s: Option<&StepRecord>| s.and_then(|s| s.access.as_ref()).map(|a| a.grants.clone());
            let same_grants = grants(before).is_some_and(|g| !g.is_empty()) && grants(before) == grants(after);
            vec![
                Check::new(
                    "issuer-switched",
                    issuer(before).as_deref() == Some(IDP2) && issuer(after).as_deref() == Some(IDP1),
                    json!({"before": issuer(before), "after": issuer(after)}),
                ),
                Check::new(
                    "trace-identical-except-iss",
                    without_iss(before).is_some() && without_iss(before) == without_iss(after),
                    Value::Null,
                ),
                Check::new("ctx-id-and-rpt-unchanged", same_grants, json!(grants(after))),
            ]
        }
        COMPROMISED_IDP => {
            let forged = find(steps, "rp2 forged identity");
            let access = forged.and_then(|s| s.access.as_ref());
            let stage1 = access.is_some_and(|a| a.decision.identity.verified && a.decision.identity.issuer.as_deref() == Some(IDP3));
            let stage2 = access.is_some_and(|a| a.decision.effect == Effect::Deny);
            let anomalous = |cap: &str| evidence(forged).iter().any(|e| e.cap == cap && e.status != EntryStatus::Present);
            vec![
                Check::new("stage1-forged-identity-verifies", stage1, json!(access.map(|a| &a.decision.identity))),
                Check::new("stage2-context-denies", stage2, json!(access.map(|a| &a.decision.decision.reason))),
                Check::new(
                    "trace-cites-anomalous-context",
                    anomalous(CAP1) && anomalous(CAP2),
                    json!(evidence(forged)),
                ),
            ]
        }
        _ => Vec::new(),
    }
}

/// Runs a script on a freshly booted federation and judges the result.
pub async fn run(fed: &Federation, script: &ScenarioScript) -> Result<ScenarioReport, HarnessError> {
    let steps = run_script(fed, script).await?;
    let mut checks = Vec::new();
    if !steps.is_empty() {
        checks.push(Check::new(
            "step-expectations",
            steps.iter().all(|s| s.passed),
            json!(steps.iter().filter(|s| !s.passed).map(|s| &s.label).collect::<Vec<_>>()),
        ));
        checks.extend(scenario_checks(&script.name, &steps));
        checks.push(scope_confinement(fed).await?);
    }
    let verdict = if checks.iter().all(|c| c.passed) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(ScenarioReport {
        scenario: script.name.clone(),
        seed: fed.spec().seed,
        verdict,
        steps,
        checks,
    })
}

pub async fn run_named(fed: &Federation, name: &str) -> Result<ScenarioReport, HarnessError> {
    let script = script(name).ok_or_else(|| HarnessError::UnknownScenario(name.to_string()))?;
    run(fed, &script).await
}
