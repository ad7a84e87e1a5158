//! Identity provider stub. One service can host several issuers, each with
//! its own account table and signing key.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::clock::SharedClock;
use crate::codec::{sign, IdentityClaims, KeyRing, ID_TYP};
use crate::error::{Error, Result};
use crate::ids::IdGen;
use crate::model::Identifier;

#[derive(Debug, Default)]
struct Issuer {
    accounts: HashMap<String, String>,
    compromised: bool,
}

pub struct IdpService {
    keyring: Arc<KeyRing>,
    clock: SharedClock,
    ids: Arc<IdGen>,
    issuers: RwLock<BTreeMap<String, Issuer>>,
}

impl IdpService {
    pub fn new(keyring: Arc<KeyRing>, clock: SharedClock, ids: Arc<IdGen>) -> Self {
        IdpService {
            keyring,
            clock,
            ids,
            issuers: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn add_issuer(&self, issuer: impl Into<String>) -> Result<()> {
        let issuer = issuer.into();
        if !self.keyring.can_sign(&issuer) {
            return Err(Error::NoSigningKey(issuer));
        }
        self.issuers.write().entry(issuer).or_default();
        Ok(())
    }

    pub fn add_account(&self, issuer: &str, email: &str, secret: &str) -> Result<()> {
        Identifier::email(email)?;
        let mut issuers = self.issuers.write();
        let entry = issuers
            .get_mut(issuer)
            .ok_or_else(|| Error::UnknownIssuer(issuer.to_string()))?;
        entry.accounts.insert(email.to_string(), secret.to_string());
        Ok(())
    }

    pub fn issuers(&self) -> Vec<String> {
        self.issuers.read().keys().cloned().collect()
    }

    /// Signs an identity token for `user` addressed to `audience`. A
    /// compromised issuer skips the credential check entirely.
    pub fn authenticate_and_issue(&self, issuer: &str, user: &str, credential: Option<&str>, audience: &str) -> Result<String> {
        {
            let issuers = self.issuers.read();
            let entry = issuers
                .get(issuer)
                .ok_or_else(|| Error::UnknownIssuer(issuer.to_string()))?;
            if !entry.compromised {
                let expected = entry.accounts.get(user).ok_or(Error::BadCredential)?;
                if credential != Some(expected.as_str()) {
                    return Err(Error::BadCredential);
                }
            }
        }
        Identifier::email(user)?;
        let claims = IdentityClaims {
            iss: issuer.to_string(),
            sub: user.to_string(),
            aud: audience.to_string(),
            iat: self.clock.now(),
            jti: self.ids.next("id"),
        };
        sign(&self.keyring, issuer, ID_TYP, &claims)
    }

    pub fn set_compromised(&self, issuer: &str, flag: bool) -> Result<()> {
        self.issuers
            .write()
            .get_mut(issuer)
            .map(|i| i.compromised = flag)
            .ok_or_else(|| Error::UnknownIssuer(issuer.to_string()))
    }

    pub fn is_compromised(&self, issuer: &str) -> bool {
        self.issuers.read().get(issuer).is_some_and(|i| i.compromised)
    }
}
