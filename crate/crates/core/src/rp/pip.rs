//! Policy information point: verified federated context per subject, and
//! the log of everything delivered.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_and_verify, KeyRing};
use crate::error::Result;
use crate::model::{ContextType, ContextValueSet, SubjectId};
use crate::rp::pdp::{ContextView, EntryStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipEntry {
    pub subject: SubjectId,
    pub values: ContextValueSet,
    pub received_at: i64,
    pub jti: String,
}

/// One event as it arrived, for audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub jti: String,
    pub iss: String,
    pub aud: String,
    pub ctx_type: ContextType,
    pub subject: String,
    pub keys: Vec<String>,
    pub received_at: i64,
}

#[derive(Debug)]
pub struct Pip {
    audience: String,
    keyring: KeyRing,
    staleness: i64,
    entries: HashMap<(String, String, ContextType), PipEntry>,
    seen: HashSet<String>,
    deliveries: Vec<DeliveryRecord>,
}

impl Pip {
    /// `keyring` should hold only the CAPs this party federates with.
    pub fn new(audience: impl Into<String>, keyring: KeyRing, staleness: i64) -> Self {
        Pip {
            audience: audience.into(),
            keyring,
            staleness,
            entries: HashMap::new(),
            seen: HashSet::new(),
            deliveries: Vec::new(),
        }
    }

    /// Verifies and stores a SET. Returns `false` for a replayed jti.
    pub fn ingest(&mut self, token: &str, now: i64) -> Result<bool> {
        let set = decode_and_verify(token, &self.audience, &self.keyring)?;
        if !self.seen.insert(set.jti.clone()) {
            return Ok(false);
        }
        for (ctx_type, event) in set.events {
            self.deliveries.push(DeliveryRecord {
                jti: set.jti.clone(),
                iss: set.iss.clone(),
                aud: set.aud.clone(),
                ctx_type: ctx_type.clone(),
                subject: event.subject.email().to_string(),
                keys: event.values.keys().cloned().collect(),
                received_at: now,
            });
            self.entries.insert(
                (event.subject.email().to_string(), set.iss.clone(), ctx_type),
                PipEntry {
                    subject: event.subject,
                    values: event.values,
                    received_at: now,
                    jti: set.jti.clone(),
                },
            );
        }
        Ok(true)
    }

    /// The context of `user` from `cap`, as usable for a request from `device`.
    pub fn view(&self, user: &str, cap: &str, ctx_type: &ContextType, device: Option<&str>, now: i64) -> ContextView {
        let Some(e) = self.entries.get(&(user.to_string(), cap.to_string(), ctx_type.clone())) else {
            return ContextView::missing(EntryStatus::NotAcquired);
        };
        let status = if now - e.received_at > self.staleness {
            EntryStatus::Stale
        } else if e.subject.device_name().is_some() && e.subject.device_name() != device {
            EntryStatus::DeviceMismatch
        } else {
            EntryStatus::Present
        };
        ContextView {
            status,
            values: if status == EntryStatus::Present {
                e.values.clone()
            } else {
                ContextValueSet::new()
            },
            jti: Some(e.jti.clone()),
            received_at: Some(e.received_at),
        }
    }

    pub fn entry(&self, user: &str, cap: &str, ctx_type: &ContextType) -> Option<&PipEntry> {
        self.entries.get(&(user.to_string(), cap.to_string(), ctx_type.clone()))
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.deliveries
    }
}
