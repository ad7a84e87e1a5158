//! Signed compact JWTs: Security Event Tokens carrying context events, and the
//! identity tokens issued by identity providers.
//!
//! Every issuer in the federation signs with one Ed25519 key. Verification keys
//! are distributed as static key files and looked up by the `kid` header.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::ids::IdGen;
use crate::model::{ContextType, ContextValueSet, SubjectId};

pub const ALG: &str = "EdDSA";
pub const SET_TYP: &str = "secevent+jwt";
pub const ID_TYP: &str = "JWT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoseHeader {
    pub alg: String,
    pub kid: String,
    pub typ: String,
}

/// Signing key for the local issuer plus verification keys for every trusted issuer.
#[derive(Clone, Default)]
pub struct KeyRing {
    signing: BTreeMap<String, (String, SigningKey)>,
    by_kid: BTreeMap<String, (String, VerifyingKey)>,
    by_issuer: BTreeMap<String, String>,
}

impl std::fmt::Debug for KeyRing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyRing")
            .field("signing", &self.signing.keys().collect::<Vec<_>>())
            .field("trusted", &self.by_issuer.keys().collect::<Vec<_>>())
            .finish()
    }
}

pub fn default_kid(issuer: &str) -> String {
    format!("{issuer}#ed25519")
}

/// Derives a stable 32-byte key seed for `issuer` from a federation seed.
pub fn derive_key_seed(issuer: &str, federation_seed: u64) -> [u8; 32] {
    let mut mixed = federation_seed;
    for b in issuer.bytes() {
        mixed = mixed.rotate_left(5) ^ u64::from(b);
        mixed = mixed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(mixed);
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    seed
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a signing key for `issuer`; its verification key is trusted as well.
    pub fn add_signer(&mut self, issuer: impl Into<String>, seed: [u8; 32]) -> VerifyingKey {
        let issuer = issuer.into();
        let key = SigningKey::from_bytes(&seed);
        let kid = default_kid(&issuer);
        let verifying = key.verifying_key();
        self.signing.insert(issuer.clone(), (kid.clone(), key));
        self.trust_with_kid(issuer, kid, verifying);
        verifying
    }

    /// Trusts `key` as the single active verification key of `issuer`.
    pub fn trust(&mut self, issuer: impl Into<String>, key: VerifyingKey) {
        let issuer = issuer.into();
        let kid = default_kid(&issuer);
        self.trust_with_kid(issuer, kid, key);
    }

    fn trust_with_kid(&mut self, issuer: String, kid: String, key: VerifyingKey) {
        if let Some(old) = self.by_issuer.insert(issuer.clone(), kid.clone()) {
            self.by_kid.remove(&old);
        }
        self.by_kid.insert(kid, (issuer, key));
    }

    pub fn forget(&mut self, issuer: &str) {
        if let Some(kid) = self.by_issuer.remove(issuer) {
            self.by_kid.remove(&kid);
        }
        self.signing.remove(issuer);
    }

    pub fn verifying_key(&self, issuer: &str) -> Option<VerifyingKey> {
        let kid = self.by_issuer.get(issuer)?;
        self.by_kid.get(kid).map(|(_, k)| *k)
    }

    pub fn trusted_issuers(&self) -> impl Iterator<Item = &String> {
        self.by_issuer.keys()
    }

    pub fn can_sign(&self, issuer: &str) -> bool {
        self.signing.contains_key(issuer)
    }

    /// A copy trusting only `issuers` (signing keys are kept).
    pub fn restricted_to<'a>(&self, issuers: impl IntoIterator<Item = &'a str>) -> KeyRing {
        let keep: std::collections::BTreeSet<&str> = issuers.into_iter().collect();
        let mut out = KeyRing {
            signing: self.signing.clone(),
            ..KeyRing::default()
        };
        for (issuer, kid) in &self.by_issuer {
            if keep.contains(issuer.as_str()) {
                let (_, key) = self.by_kid[kid];
                out.trust_with_kid(issuer.clone(), kid.clone(), key);
            }
        }
        out
    }

    /// A copy holding only public material.
    pub fn public(&self) -> KeyRing {
        KeyRing {
            signing: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_file(&self) -> KeyFile {
        KeyFile {
            signing: self
                .signing
                .iter()
                .map(|(issuer, (kid, key))| SigningEntry {
                    issuer: issuer.clone(),
                    kid: kid.clone(),
                    seed: URL_SAFE_NO_PAD.encode(key.to_bytes()),
                })
                .collect(),
            trusted: self
                .by_issuer
                .iter()
                .map(|(issuer, kid)| TrustedEntry {
                    issuer: issuer.clone(),
                    kid: kid.clone(),
                    public_key: URL_SAFE_NO_PAD.encode(self.by_kid[kid].1.to_bytes()),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &KeyFile) -> Result<KeyRing> {
        let mut ring = KeyRing::new();
        for entry in &file.trusted {
            let bytes: [u8; 32] = decode_fixed(&entry.public_key)?;
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|e| Error::Config(format!("bad public key for {}: {e}", entry.issuer)))?;
            ring.trust_with_kid(entry.issuer.clone(), entry.kid.clone(), key);
        }
        for entry in &file.signing {
            let seed: [u8; 32] = decode_fixed(&entry.seed)?;
            let key = SigningKey::from_bytes(&seed);
            ring.trust_with_kid(entry.issuer.clone(), entry.kid.clone(), key.verifying_key());
            ring.signing.insert(entry.issuer.clone(), (entry.kid.clone(), key));
        }
        Ok(ring)
    }

    pub fn load(path: &Path) -> Result<KeyRing> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: KeyFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        KeyRing::from_file(&file)
    }
}

fn decode_fixed<const N: usize>(text: &str) -> Result<[u8; N]> {
    URL_SAFE_NO_PAD
        .decode(text)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Config("key material must be 32 base64url bytes".into()))
}

/// On-disk key distribution format.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFile {
    #[serde(default)]
    pub signing: Vec<SigningEntry>,
    #[serde(default)]
    pub trusted: Vec<TrustedEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigningEntry {
    pub issuer: String,
    pub kid: String,
    pub seed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedEntry {
    pub issuer: String,
    pub kid: String,
    pub public_key: String,
}

/// Signs `claims` as a compact JWS under `issuer`'s key.
pub fn sign<T: Serialize>(keyring: &KeyRing, issuer: &str, typ: &str, claims: &T) -> Result<String> {
    let (kid, key) = keyring
        .signing
        .get(issuer)
        .ok_or_else(|| Error::NoSigningKey(issuer.to_string()))?;
    let header = JoseHeader {
        alg: ALG.into(),
        kid: kid.clone(),
        typ: typ.into(),
    };
    let header = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&header).expect("header serializes"));
    let payload = serde_json::to_vec(claims).map_err(|e| Error::MalformedToken(e.to_string()))?;
    let signing_input = format!("{header}.{}", URL_SAFE_NO_PAD.encode(payload));
    let signature = key.sign(signing_input.as_bytes());
    Ok(format!(
        "{signing_input}.{}",
        URL_SAFE_NO_PAD.encode(signature.to_bytes())
    ))
}

/// Verifies the signature of a compact JWS and returns its header and raw payload.
///
/// The payload `iss` must name the issuer that owns the signing key.
pub fn verify_signature(token: &str, keyring: &KeyRing) -> Result<(JoseHeader, Value)> {
    let mut parts = token.split('.');
    let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(Error::MalformedToken("expected three segments".into()));
    };
    let header: JoseHeader = URL_SAFE_NO_PAD
        .decode(h)
        .ok()
        .and_then(|bytes| serde_json::from_slice(&bytes).ok())
        .ok_or_else(|| Error::MalformedToken("undecodable header".into()))?;
    if header.alg != ALG {
        return Err(Error::MalformedToken(format!("unsupported alg {}", header.alg)));
    }
    let (issuer, key) = keyring
        .by_kid
        .get(&header.kid)
        .ok_or_else(|| Error::UnknownIssuer(header.kid.clone()))?;
    let sig_bytes: [u8; 64] = URL_SAFE_NO_PAD
        .decode(s)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or(Error::BadSignature)?;
    let signing_input = &token[..h.len() + 1 + p.len()];
    key.verify(signing_input.as_bytes(), &Signature::from_bytes(&sig_bytes))
        .map_err(|_| Error::BadSignature)?;

    let payload: Value = URL_SAFE_NO_PAD
        .decode(p)
        .ok()
        .and_then(|bytes| serde_json::from_slice(&bytes).ok())
        .ok_or_else(|| Error::MalformedToken("undecodable payload".into()))?;
    match payload.get("iss").and_then(Value::as_str) {
        Some(iss) if iss == issuer => Ok((header, payload)),
        Some(iss) => Err(Error::UnknownIssuer(iss.to_string())),
        None => Err(Error::MalformedToken("missing iss".into())),
    }
}

/// Verifies signature and audience, then deserializes the claims.
pub fn verify<T: DeserializeOwned>(token: &str, expected_audience: &str, keyring: &KeyRing) -> Result<T> {
    let (_, payload) = verify_signature(token, keyring)?;
    let aud = payload
        .get("aud")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedToken("missing aud".into()))?;
    if aud != expected_audience {
        return Err(Error::AudienceMismatch {
            expected: expected_audience.to_string(),
            found: aud.to_string(),
        });
    }
    serde_json::from_value(payload).map_err(|e| Error::MalformedToken(e.to_string()))
}

/// One context event: the subject block plus scope-qualified entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub subject: SubjectId,
    #[serde(flatten)]
    pub values: ContextValueSet,
}

/// A Security Event Token carrying context events keyed by context type URI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityEventToken {
    pub aud: String,
    pub iat: i64,
    pub iss: String,
    pub jti: String,
    pub events: BTreeMap<ContextType, EventPayload>,
}

impl SecurityEventToken {
    /// The single event of a one-event token.
    pub fn sole_event(&self) -> Option<(&ContextType, &EventPayload)> {
        let mut it = self.events.iter();
        match (it.next(), it.next()) {
            (Some(e), None) => Some(e),
            _ => None,
        }
    }
}

/// Encodes context events as signed SETs, one event per token.
#[derive(Clone)]
pub struct SetEncoder {
    keyring: Arc<KeyRing>,
    clock: SharedClock,
    ids: Arc<IdGen>,
}

impl SetEncoder {
    pub fn new(keyring: Arc<KeyRing>, clock: SharedClock, ids: Arc<IdGen>) -> Self {
        SetEncoder { keyring, clock, ids }
    }

    pub fn keyring(&self) -> &KeyRing {
        &self.keyring
    }

    /// Builds and signs a token; returns the parsed form alongside the compact string.
    pub fn encode_event(
        &self,
        issuer: &str,
        audience: &str,
        subject: &SubjectId,
        ctx_type: &ContextType,
        values: &ContextValueSet,
    ) -> Result<(SecurityEventToken, String)> {
        if values.is_empty() {
            return Err(Error::EmptyEvent);
        }
        if !self.keyring.can_sign(issuer) {
            return Err(Error::NoSigningKey(issuer.to_string()));
        }
        let set = SecurityEventToken {
            aud: audience.to_string(),
            iat: self.clock.now(),
            iss: issuer.to_string(),
            jti: self.ids.next("set"),
            events: BTreeMap::from([(
                ctx_type.clone(),
                EventPayload {
                    subject: subject.clone(),
                    values: values.clone(),
                },
            )]),
        };
        let compact = sign(&self.keyring, issuer, SET_TYP, &set)?;
        Ok((set, compact))
    }
}

/// Verifies a SET's signature and audience and parses it.
pub fn decode_and_verify(token: &str, expected_audience: &str, keyring: &KeyRing) -> Result<SecurityEventToken> {
    let set: SecurityEventToken = verify(token, expected_audience, keyring)?;
    if set.events.is_empty() {
        return Err(Error::MalformedToken("no events".into()));
    }
    Ok(set)
}

/// Claims of a federated identity token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityClaims {
    pub iss: String,
    pub sub: String,
    pub aud: String,
    pub iat: i64,
    pub jti: String,
}

pub fn decode_identity(token: &str, expected_audience: &str, keyring: &KeyRing) -> Result<IdentityClaims> {
    verify(token, expected_audience, keyring)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use serde_json::json;

    const CAP1: &str = "https://cap1.example";
    const RP1: &str = "https://rp1.example";

    fn encoder(ring: KeyRing) -> SetEncoder {
        SetEncoder::new(Arc::new(ring), Arc::new(SimClock::new(1_619_696_843)), Arc::new(IdGen::seeded(1)))
    }

    fn cap1_ring() -> KeyRing {
        let mut ring = KeyRing::new();
        ring.add_signer(CAP1, derive_key_seed(CAP1, 42));
        ring
    }

    fn alice() -> SubjectId {
        SubjectId::user("alice@example.com").unwrap().with_device("alice-no-Laptop").unwrap()
    }

    fn location() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/device-location").unwrap()
    }

    fn payload_of(token: &str) -> Value {
        let p = token.split('.').nth(1).unwrap();
        serde_json::from_slice(&URL_SAFE_NO_PAD.decode(p).unwrap()).unwrap()
    }

    #[test]
    fn encodes_the_reference_context_document() {
        let enc = encoder(cap1_ring());
        let values = ContextValueSet::new().with("used:ip:192.0.2.1", true).unwrap();
        let (set, token) = enc.encode_event(CAP1, RP1, &alice(), &location(), &values).unwrap();
        let mut payload = payload_of(&token);
        assert_eq!(payload["jti"], json!(set.jti));
        assert_eq!(payload["iat"], json!(1_619_696_843));
        payload.as_object_mut().unwrap().remove("jti");
        payload.as_object_mut().unwrap().remove("iat");
        assert_eq!(
            payload,
            json!({
                "aud": "https://rp1.example",
                "iss": "https://cap1.example",
                "events": {
                    "https://cap1.example/ctxtype/device-location": {
                        "subject": {
                            "user": {"format": "email", "email": "alice@example.com"},
                            "device": {"format": "cn", "cn": "alice-no-Laptop"}
                        },
                        "used:ip:192.0.2.1": true
                    }
                }
            })
        );
        let header: JoseHeader = serde_json::from_slice(
            &URL_SAFE_NO_PAD.decode(token.split('.').next().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(header.typ, SET_TYP);
        assert_eq!(header.alg, "EdDSA");
    }

    #[test]
    fn decode_reads_back_the_event() {
        let ring = cap1_ring();
        let enc = encoder(ring.clone());
        let values = ContextValueSet::new().with("used:ip:192.0.2.1", true).unwrap();
        let (set, token) = enc.encode_event(CAP1, RP1, &alice(), &location(), &values).unwrap();
        let parsed = decode_and_verify(&token, RP1, &ring.public()).unwrap();
        assert_eq!(parsed, set);
        assert_eq!(
            parsed.events[&location()].values.get("used:ip:192.0.2.1"),
            Some(&json!(true))
        );
        assert_eq!(
            decode_and_verify(&token, "https://rp2.example", &ring),
            Err(Error::AudienceMismatch {
                expected: "https://rp2.example".into(),
                found: RP1.into()
            })
        );
    }

    #[test]
    fn encode_requires_key_and_values() {
        let enc = encoder(KeyRing::new());
        let values = ContextValueSet::new().with("ip:current", "192.0.2.1").unwrap();
        assert_eq!(
            enc.encode_event(CAP1, RP1, &alice(), &location(), &values).unwrap_err(),
            Error::NoSigningKey(CAP1.into())
        );
        let enc = encoder(cap1_ring());
        assert_eq!(
            enc.encode_event(CAP1, RP1, &alice(), &location(), &ContextValueSet::new()).unwrap_err(),
            Error::EmptyEvent
        );
    }

    #[test]
    fn jti_values_are_fresh() {
        let enc = encoder(cap1_ring());
        let values = ContextValueSet::new().with("ip:current", "192.0.2.1").unwrap();
        let jtis: std::collections::HashSet<String> = (0..1000)
            .map(|_| enc.encode_event(CAP1, RP1, &alice(), &location(), &values).unwrap().0.jti)
            .collect();
        assert_eq!(jtis.len(), 1000);
    }

    #[test]
    fn unknown_or_wrong_key_is_rejected() {
        let ring = cap1_ring();
        let enc = encoder(ring);
        let values = ContextValueSet::new().with("ip:current", "192.0.2.1").unwrap();
        let (_, token) = enc.encode_event(CAP1, RP1, &alice(), &location(), &values).unwrap();

        assert!(matches!(decode_and_verify(&token, RP1, &KeyRing::new()), Err(Error::UnknownIssuer(_))));

        // Same issuer name, different key.
        let mut impostor = KeyRing::new();
        impostor.trust(CAP1, SigningKey::from_bytes(&[9u8; 32]).verifying_key());
        assert_eq!(decode_and_verify(&token, RP1, &impostor), Err(Error::BadSignature));

        // A key trusted under one issuer name cannot vouch for another iss claim.
        let mut liar = KeyRing::new();
        liar.add_signer("https://cap9.example", [3u8; 32]);
        let forged = sign(&liar, "https://cap9.example", SET_TYP, &json!({"iss": CAP1, "aud": RP1})).unwrap();
        assert_eq!(
            verify_signature(&forged, &liar).unwrap_err(),
            Error::UnknownIssuer(CAP1.into())
        );
    }

    #[test]
    fn malformed_inputs() {
        let ring = cap1_ring();
        for bad in ["", "a.b", "a.b.c.d", "!!!.e30.AA"] {
            assert!(matches!(decode_and_verify(bad, RP1, &ring), Err(Error::MalformedToken(_))), "{bad}");
        }
    }

    #[test]
    fn keyring_file_round_trip() {
        let mut ring = cap1_ring();
        ring.trust("https://idp1.example", SigningKey::from_bytes(&[5u8; 32]).verifying_key());
        let file = ring.to_file();
        let back = KeyRing::from_file(&file).unwrap();
        assert_eq!(back.to_file(), file);
        assert!(back.can_sign(CAP1));
        assert_eq!(
            back.verifying_key("https://idp1.example"),
            ring.verifying_key("https://idp1.example")
        );
        let public = ring.public();
        assert!(!public.can_sign(CAP1));
        let restricted = ring.restricted_to(["https://idp1.example"]);
        assert_eq!(restricted.trusted_issuers().collect::<Vec<_>>(), vec!["https://idp1.example"]);
    }

    #[test]
    fn identity_tokens_verify_with_audience() {
        let mut ring = KeyRing::new();
        ring.add_signer("https://idp1.example", derive_key_seed("https://idp1.example", 1));
        let claims = IdentityClaims {
            iss: "https://idp1.example".into(),
            sub: "alice@example.com".into(),
            aud: RP1.into(),
            iat: 10,
            jti: "id-1".into(),
        };
        let token = sign(&ring, "https://idp1.example", ID_TYP, &claims).unwrap();
        assert_eq!(decode_identity(&token, RP1, &ring).unwrap(), claims);
        assert!(matches!(
            decode_identity(&token, "https://rp2.example", &ring),
            Err(Error::AudienceMismatch { .. })
        ));
    }
}
