//! Declarative description of a federation: which services run, what they
//! serve and consume, who trusts whom, and the accounts that exist.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use ztf_core::cap::{CapConfig, DerivationRule, ServedType, UpstreamSubscription};
use ztf_core::model::{scopes, ContextType, ScopeSet};
use ztf_core::rp::pdp::{Condition, Rule, Test};
use ztf_core::rp::{ContextNeed, DecisionPolicy, Effect, RpConfig, TransmitTarget};

use crate::HarnessError;

pub const AUTHZ: &str = "https://authz.example";
pub const IDP: &str = "https://idp.example";
pub const IDP1: &str = "https://idp1.example";
pub const IDP2: &str = "https://idp2.example";
pub const IDP3: &str = "https://idp3.example";
pub const CAP1: &str = "https://cap1.example";
pub const CAP2: &str = "https://cap2.example";
pub const CAP3: &str = "https://cap3.example";
pub const RP1: &str = "https://rp1.example";
pub const RP2: &str = "https://rp2.example";
pub const CAP2_AGENT: &str = "https://agent.cap2.example";
pub const CAP3_WIFI: &str = "https://wifi.cap3.example";
pub const OPERATOR: &str = "https://operator.example";

pub fn device_location() -> ContextType {
    ContextType::new(format!("{CAP1}/ctxtype/device-location")).unwrap()
}

pub fn device_health() -> ContextType {
    ContextType::new(format!("{CAP2}/ctxtype/device-health")).unwrap()
}

pub fn wifi_ap() -> ContextType {
    ContextType::new(format!("{CAP3}/ctxtype/wifi-ap")).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthzSpec {
    pub uri: String,
    #[serde(default)]
    pub port: u16,
    #[serde(default = "ticket_ttl")]
    pub ticket_ttl: i64,
    #[serde(default = "rpt_ttl")]
    pub rpt_ttl: i64,
    /// Milliseconds between revocation sweeps.
    #[serde(default = "sweep_ms")]
    pub sweep_interval_ms: u64,
    #[serde(default)]
    pub auto_consent: bool,
}

fn ticket_ttl() -> i64 {
    120
}

fn rpt_ttl() -> i64 {
    3600
}

fn sweep_ms() -> u64 {
    10_000
}

/// One IdP stub process hosting several issuers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpSpec {
    pub uri: String,
    #[serde(default)]
    pub port: u16,
    pub issuers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapSpec {
    #[serde(flatten)]
    pub config: CapConfig,
    #[serde(default)]
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpSpec {
    #[serde(flatten)]
    pub config: RpConfig,
    #[serde(default)]
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSpec {
    pub email: String,
    pub password: String,
    #[serde(default)]
    pub devices: Vec<String>,
}

/// A share every user sets up at enrollment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantSpec {
    pub requesting_party: String,
    pub ctx_type: ContextType,
    pub scopes: ScopeSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "clock_start")]
    pub clock_start: i64,
    #[serde(default = "operator")]
    pub operator: String,
    #[serde(default)]
    pub authz: Option<AuthzSpec>,
    #[serde(default)]
    pub idp: Option<IdpSpec>,
    #[serde(default)]
    pub caps: Vec<CapSpec>,
    #[serde(default)]
    pub rps: Vec<RpSpec>,
    /// Observation sources that are neither CAPs nor RPs.
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub grants: Vec<GrantSpec>,
}

fn clock_start() -> i64 {
    1_619_696_843
}

fn operator() -> String {
    OPERATOR.to_string()
}

impl TopologySpec {
    pub fn empty() -> Self {
        TopologySpec {
            seed: 0,
            clock_start: clock_start(),
            operator: operator(),
            authz: None,
            idp: None,
            caps: Vec::new(),
            rps: Vec::new(),
            sources: Vec::new(),
            users: Vec::new(),
            grants: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn service_count(&self) -> usize {
        self.authz.is_some() as usize + self.idp.is_some() as usize + self.caps.len() + self.rps.len()
    }

    pub fn cap(&self, uri: &str) -> Option<&CapSpec> {
        self.caps.iter().find(|c| c.config.issuer == uri)
    }

    pub fn rp(&self, uri: &str) -> Option<&RpSpec> {
        self.rps.iter().find(|r| r.config.issuer == uri)
    }

    pub fn user(&self, email: &str) -> Option<&UserSpec> {
        self.users.iter().find(|u| u.email == email)
    }

    /// The default layout: one authorization server, an IdP stub hosting
    /// IdP1-IdP3, CAP1-CAP3 and RP1 (trusting IdP1, IdP2) and RP2 (trusting IdP3).
    pub fn default_topology() -> Self {
        let set = |names: &[&str]| scopes(names.iter().copied()).unwrap();
        let cap1 = CapConfig {
            issuer: CAP1.into(),
            served: vec![ServedType {
                ctx_type: device_location(),
                scopes: set(&["ip", "wifi-ap", "used:ip"]),
                rule: DerivationRule::UsedIp,
            }],
            sources: [RP1, RP2].iter().map(|s| s.to_string()).collect(),
            upstream: vec![UpstreamSubscription {
                cap: CAP3.into(),
                ctx_type: wifi_ap(),
                scopes: set(&["wifi-ap"]),
                into: device_location(),
            }],
            receive_endpoint: format!("{CAP1}/ctx-recv"),
        };
        let cap2 = CapConfig {
            issuer: CAP2.into(),
            served: vec![ServedType {
                ctx_type: device_health(),
                scopes: set(&["up-to-date", "version"]),
                rule: DerivationRule::VersionCurrency { latest: "2.4.1".into() },
            }],
            sources: [CAP2_AGENT.to_string()].into(),
            upstream: Vec::new(),
            receive_endpoint: format!("{CAP2}/ctx-recv"),
        };
        let cap3 = CapConfig {
            issuer: CAP3.into(),
            served: vec![ServedType {
                ctx_type: wifi_ap(),
                scopes: set(&["wifi-ap"]),
                rule: DerivationRule::WifiWhitelist {
                    trusted: ["corp-ap-1".to_string(), "corp-ap-2".to_string()].into(),
                },
            }],
            sources: [CAP3_WIFI.to_string()].into(),
            upstream: Vec::new(),
            receive_endpoint: format!("{CAP3}/ctx-recv"),
        };

        let location = |key: &str, test: Test| Condition::Context {
            cap: CAP1.into(),
            ctx_type: device_location(),
            key: key.into(),
            test,
        };
        let health = |test: Test| Condition::Context {
            cap: CAP2.into(),
            ctx_type: device_health(),
            key: "up-to-date".into(),
            test,
        };
        let rule = |name: &str, effect: Effect, when: Vec<Condition>| Rule {
            name: name.into(),
            effect,
            when,
        };
        let rp1 = RpConfig {
            issuer: RP1.into(),
            trusted_idps: vec![IDP1.into(), IDP2.into()],
            needs: vec![ContextNeed {
                cap: CAP1.into(),
                ctx_type: device_location(),
                scopes: set(&["used:ip"]),
            }],
            transmit: vec![TransmitTarget {
                cap: CAP1.into(),
                ctx_type: device_location(),
            }],
            policy: DecisionPolicy {
                rules: vec![rule(
                    "known-network",
                    Effect::Allow,
                    vec![location("used:ip:{ip}", Test::Equals(json!(true)))],
                )],
                default: Effect::Deny,
            },
            staleness: 300,
            receive_endpoint: format!("{RP1}/ctx-recv"),
        };
        let rp2 = RpConfig {
            issuer: RP2.into(),
            trusted_idps: vec![IDP3.into()],
            needs: vec![
                ContextNeed {
                    cap: CAP1.into(),
                    ctx_type: device_location(),
                    scopes: set(&["used:ip", "wifi-ap"]),
                },
                ContextNeed {
                    cap: CAP2.into(),
                    ctx_type: device_health(),
                    scopes: set(&["up-to-date"]),
                },
            ],
            transmit: vec![TransmitTarget {
                cap: CAP1.into(),
                ctx_type: device_location(),
            }],
            policy: DecisionPolicy {
                rules: vec![
                    rule("outdated-device", Effect::Deny, vec![health(Test::Equals(json!(false)))]),
                    rule("unknown-device-health", Effect::Deny, vec![health(Test::Absent)]),
                    rule(
                        "known-network",
                        Effect::Allow,
                        vec![location("used:ip:{ip}", Test::Equals(json!(true)))],
                    ),
                    rule(
                        "trusted-access-point",
                        Effect::Allow,
                        vec![location("wifi-ap:trusted", Test::Equals(json!(true)))],
                    ),
                ],
                default: Effect::Deny,
            },
            staleness: 300,
            receive_endpoint: format!("{RP2}/ctx-recv"),
        };

        let grant = |party: &str, ctx_type: ContextType, names: &[&str]| GrantSpec {
            requesting_party: party.into(),
            ctx_type,
            scopes: set(names),
        };
        TopologySpec {
            seed: 2021,
            clock_start: clock_start(),
            operator: operator(),
            authz: Some(AuthzSpec {
                uri: AUTHZ.into(),
                port: 0,
                ticket_ttl: ticket_ttl(),
                rpt_ttl: rpt_ttl(),
                sweep_interval_ms: sweep_ms(),
                auto_consent: false,
            }),
            idp: Some(IdpSpec {
                uri: IDP.into(),
                port: 0,
                issuers: vec![IDP1.into(), IDP2.into(), IDP3.into()],
            }),
            caps: [cap1, cap2, cap3].into_iter().map(|config| CapSpec { config, port: 0 }).collect(),
            rps: [rp1, rp2].into_iter().map(|config| RpSpec { config, port: 0 }).collect(),
            sources: vec![CAP2_AGENT.into(), CAP3_WIFI.into()],
            users: vec![UserSpec {
                email: "alice@example.com".into(),
                password: "alice-pw".into(),
                devices: vec!["alice-no-Laptop".into()],
            }],
            grants: vec![
                grant(RP1, device_location(), &["used:ip"]),
                grant(RP2, device_location(), &["used:ip", "wifi-ap"]),
                grant(RP2, device_health(), &["up-to-date"]),
                grant(CAP1, wifi_ap(), &["wifi-ap"]),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology_round_trips_and_counts() {
        let t = TopologySpec::default_topology();
        assert_eq!(t.service_count(), 7);
        let text = serde_json::to_string_pretty(&t).unwrap();
        assert_eq!(serde_json::from_str::<TopologySpec>(&text).unwrap(), t);
        assert_eq!(serde_json::from_str::<TopologySpec>("{}").unwrap().service_count(), 0);
    }

    #[test]
    fn every_grant_fits_a_declared_resource() {
        let t = TopologySpec::default_topology();
        for g in &t.grants {
            let served = t
                .caps
                .iter()
                .find_map(|c| c.config.served(&g.ctx_type))
                .unwrap_or_else(|| panic!("{} not served", g.ctx_type));
            assert!(g.scopes.is_subset(&served.scopes));
        }
    }
}
