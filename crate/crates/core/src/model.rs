//! Shared vocabulary: subjects, context types, scopes and context values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// A typed identifier, serialized as `{"format": "email", "email": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum Identifier {
    Email { email: String },
    Cn { cn: String },
}

impl Identifier {
    pub fn email(value: impl Into<String>) -> Result<Self> {
        let email = value.into();
        match email.split_once('@') {
            Some((local, domain)) if !local.is_empty() && !domain.is_empty() => {
                Ok(Identifier::Email { email })
            }
            _ => Err(Error::InvalidSubject(format!("not an email address: {email:?}"))),
        }
    }

    pub fn cn(value: impl Into<String>) -> Result<Self> {
        let cn = value.into();
        if cn.trim().is_empty() {
            return Err(Error::InvalidSubject("empty common name".into()));
        }
        Ok(Identifier::Cn { cn })
    }

    pub fn format(&self) -> &'static str {
        match self {
            Identifier::Email { .. } => "email",
            Identifier::Cn { .. } => "cn",
        }
    }

    pub fn value(&self) -> &str {
        match self {
            Identifier::Email { email } => email,
            Identifier::Cn { cn } => cn,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Identifier::Email { email } => Identifier::email(email.clone()).map(|_| ()),
            Identifier::Cn { cn } => Identifier::cn(cn.clone()).map(|_| ()),
        }
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.format(), self.value())
    }
}

/// The subject of a context: a user and, optionally, the device they operate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSubject")]
pub struct SubjectId {
    pub user: Identifier,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<Identifier>,
}

#[derive(Deserialize)]
struct RawSubject {
    user: Identifier,
    #[serde(default)]
    device: Option<Identifier>,
}

impl TryFrom<RawSubject> for SubjectId {
    type Error = Error;

    fn try_from(raw: RawSubject) -> Result<Self> {
        if !matches!(raw.user, Identifier::Email { .. }) {
            return Err(Error::InvalidSubject("user must use the email format".into()));
        }
        raw.user.validate()?;
        if let Some(device) = &raw.device {
            device.validate()?;
        }
        Ok(SubjectId {
            user: raw.user,
            device: raw.device,
        })
    }
}

impl SubjectId {
    pub fn user(email: impl Into<String>) -> Result<Self> {
        Ok(SubjectId {
            user: Identifier::email(email)?,
            device: None,
        })
    }

    pub fn with_device(mut self, cn: impl Into<String>) -> Result<Self> {
        self.device = Some(Identifier::cn(cn)?);
        Ok(self)
    }

    pub fn email(&self) -> &str {
        self.user.value()
    }

    pub fn device_name(&self) -> Option<&str> {
        self.device.as_ref().map(Identifier::value)
    }

    /// The same subject without its device part.
    pub fn owner(&self) -> SubjectId {
        SubjectId {
            user: self.user.clone(),
            device: None,
        }
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.device {
            Some(device) => write!(f, "{} ({})", self.user.value(), device.value()),
            None => f.write_str(self.user.value()),
        }
    }
}

/// Absolute URI naming a kind of context, e.g. `https://cap1.example/ctxtype/device-location`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextType(String);

impl ContextType {
    pub fn new(uri: impl Into<String>) -> Result<Self> {
        let uri = uri.into();
        if !is_absolute_uri(&uri) {
            return Err(Error::InvalidContextType(uri));
        }
        Ok(ContextType(uri))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Last path segment, used for display only.
    pub fn short_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }
}

impl TryFrom<String> for ContextType {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        ContextType::new(value)
    }
}

impl From<ContextType> for String {
    fn from(value: ContextType) -> Self {
        value.0
    }
}

impl fmt::Display for ContextType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn is_absolute_uri(uri: &str) -> bool {
    let Some((scheme, rest)) = uri.split_once("://") else {
        return false;
    };
    let scheme_ok = scheme
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic())
        && scheme
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
    let host = rest.split('/').next().unwrap_or_default();
    scheme_ok && !host.is_empty() && !uri.chars().any(char::is_whitespace)
}

/// A named slice of a context resource that grants are expressed in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scope(String);

impl Scope {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidScope(name));
        }
        Ok(Scope(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whether `key` is `self` or `self` followed by `:` and a discriminator.
    pub fn covers(&self, key: &str) -> bool {
        key.strip_prefix(self.0.as_str())
            .is_some_and(|rest| rest.is_empty() || rest.starts_with(':'))
    }
}

impl TryFrom<String> for Scope {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Scope::new(value)
    }
}

impl From<Scope> for String {
    fn from(value: Scope) -> Self {
        value.0
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type ScopeSet = BTreeSet<Scope>;

/// Parses a list of scope names.
pub fn scopes<I, S>(names: I) -> Result<ScopeSet>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    names.into_iter().map(Scope::new).collect()
}

/// The declared scope a key belongs to: the longest declared scope covering it.
pub fn scope_of<'a>(key: &str, declared: &'a ScopeSet) -> Option<&'a Scope> {
    declared
        .iter()
        .filter(|scope| scope.covers(key))
        .max_by_key(|scope| scope.as_str().len())
}

/// Scope-qualified context entries, e.g. `"used:ip:192.0.2.1": true`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextValueSet(BTreeMap<String, Value>);

impl ContextValueSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry. Only booleans, strings and numbers are context values.
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) -> Result<Option<Value>> {
        let key = key.into();
        let value = value.into();
        if key.is_empty() || key == "subject" {
            return Err(Error::UnknownScope(key));
        }
        if !matches!(value, Value::Bool(_) | Value::String(_) | Value::Number(_)) {
            return Err(Error::VocabularyViolation(format!(
                "value for {key:?} must be a boolean, string or number"
            )));
        }
        Ok(self.0.insert(key, value))
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Result<Self> {
        self.insert(key, value)?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    pub fn retain(&mut self, f: impl FnMut(&String, &mut Value) -> bool) {
        self.0.retain(f)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Whether every entry is subordinate to one of `declared`.
    pub fn check_scopes(&self, declared: &ScopeSet) -> Result<()> {
        match self.0.keys().find(|key| scope_of(key, declared).is_none()) {
            Some(key) => Err(Error::UnknownScope(key.clone())),
            None => Ok(()),
        }
    }
}

impl FromIterator<(String, Value)> for ContextValueSet {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        ContextValueSet(iter.into_iter().collect())
    }
}

impl IntoIterator for ContextValueSet {
    type Item = (String, Value);
    type IntoIter = std::collections::btree_map::IntoIter<String, Value>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Identifier of one owner's resource of one context type at one CAP.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CtxId(pub String);

impl CtxId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CtxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One user's context of one type at one CAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextResource {
    ctx_id: Option<CtxId>,
    owner: SubjectId,
    ctx_type: ContextType,
    scopes: ScopeSet,
    values: ContextValueSet,
    cap_origin: String,
}

impl ContextResource {
    pub fn new(
        owner: SubjectId,
        ctx_type: ContextType,
        scopes: ScopeSet,
        values: ContextValueSet,
        cap_origin: impl Into<String>,
    ) -> Result<Self> {
        if scopes.is_empty() {
            return Err(Error::EmptyScopes);
        }
        values.check_scopes(&scopes)?;
        Ok(ContextResource {
            ctx_id: None,
            owner: owner.owner(),
            ctx_type,
            scopes,
            values,
            cap_origin: cap_origin.into(),
        })
    }

    pub fn ctx_id(&self) -> Option<&CtxId> {
        self.ctx_id.as_ref()
    }

    /// Records the identifier issued by the authorization server. Once set it never changes.
    pub fn assign_id(&mut self, id: CtxId) -> Result<()> {
        match &self.ctx_id {
            Some(existing) if *existing != id => Err(Error::Config(format!(
                "resource already carries ctx_id {existing}"
            ))),
            _ => {
                self.ctx_id = Some(id);
                Ok(())
            }
        }
    }

    pub fn owner(&self) -> &SubjectId {
        &self.owner
    }

    pub fn ctx_type(&self) -> &ContextType {
        &self.ctx_type
    }

    pub fn scopes(&self) -> &ScopeSet {
        &self.scopes
    }

    pub fn values(&self) -> &ContextValueSet {
        &self.values
    }

    pub fn cap_origin(&self) -> &str {
        &self.cap_origin
    }

    /// Replaces the values wholesale.
    pub fn set_values(&mut self, values: ContextValueSet) -> Result<()> {
        values.check_scopes(&self.scopes)?;
        self.values = values;
        Ok(())
    }
}

/// The entries of `resource` whose scope is in `allowed`.
///
/// Unknown scopes in `allowed` simply match nothing.
pub fn filter_by_scopes(resource: &ContextResource, allowed: &ScopeSet) -> ContextValueSet {
    resource
        .values
        .iter()
        .filter(|(key, _)| scope_of(key, &resource.scopes).is_some_and(|s| allowed.contains(s)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Folds upstream entries into `base`, upstream winning on key collision.
pub fn merge_contexts(base: &ContextResource, upstream: &ContextValueSet) -> Result<ContextResource> {
    upstream.check_scopes(&base.scopes)?;
    let mut merged = base.clone();
    for (key, value) in upstream.iter() {
        merged.values.0.insert(key.clone(), value.clone());
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn location_type() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/device-location").unwrap()
    }

    fn resource(values: ContextValueSet) -> ContextResource {
        ContextResource::new(
            SubjectId::user("alice@example.com").unwrap(),
            location_type(),
            scopes(["ip", "wifi-ap", "used:ip"]).unwrap(),
            values,
            "https://cap1.example",
        )
        .unwrap()
    }

    #[test]
    fn subject_serializes_with_typed_formats() {
        let subject = SubjectId::user("alice@example.com")
            .unwrap()
            .with_device("alice-no-Laptop")
            .unwrap();
        let json = serde_json::to_value(&subject).unwrap();
        assert_eq!(
            json,
            json!({
                "user": {"format": "email", "email": "alice@example.com"},
                "device": {"format": "cn", "cn": "alice-no-Laptop"}
            })
        );
        let back: SubjectId = serde_json::from_value(json).unwrap();
        assert_eq!(back, subject);
    }

    #[test]
    fn subject_rejects_bad_formats() {
        assert!(SubjectId::user("alice").is_err());
        assert!(SubjectId::user("alice@example.com").unwrap().with_device("  ").is_err());
        let device_as_user = json!({"user": {"format": "cn", "cn": "laptop"}});
        assert!(serde_json::from_value::<SubjectId>(device_as_user).is_err());
        let bad_email = json!({"user": {"format": "email", "email": "nobody"}});
        assert!(serde_json::from_value::<SubjectId>(bad_email).is_err());
    }

    #[test]
    fn context_type_must_be_absolute() {
        assert!(ContextType::new("device-location").is_err());
        assert!(ContextType::new("https:///x").is_err());
        assert!(ContextType::new("https://cap1.example/ctxtype/a b").is_err());
        assert_eq!(location_type().short_name(), "device-location");
    }

    #[test]
    fn scope_rejects_whitespace() {
        assert!(Scope::new("").is_err());
        assert!(Scope::new("used ip").is_err());
        assert!(Scope::new("used:ip").is_ok());
    }

    #[test]
    fn longest_declared_prefix_wins() {
        let declared = scopes(["used", "used:ip", "ip"]).unwrap();
        assert_eq!(scope_of("used:ip:192.0.2.1", &declared).unwrap().as_str(), "used:ip");
        assert_eq!(scope_of("used:device", &declared).unwrap().as_str(), "used");
        assert_eq!(scope_of("ip", &declared).unwrap().as_str(), "ip");
        assert!(scope_of("ipv6:x", &declared).is_none());
    }

    #[test]
    fn filter_keeps_only_granted_scope() {
        let r = resource(
            ContextValueSet::new()
                .with("used:ip:192.0.2.1", true)
                .unwrap()
                .with("ip:current", "192.0.2.1")
                .unwrap(),
        );
        let filtered = filter_by_scopes(&r, &scopes(["used:ip"]).unwrap());
        assert_eq!(filtered, ContextValueSet::new().with("used:ip:192.0.2.1", true).unwrap());
        assert!(filter_by_scopes(&r, &ScopeSet::new()).is_empty());
        assert!(filter_by_scopes(&r, &scopes(["nonexistent"]).unwrap()).is_empty());
        // input untouched
        assert_eq!(r.values().len(), 2);
    }

    #[test]
    fn filter_matches_exhaustive_membership_oracle() {
        let entries = [
            ("ip:current", json!("192.0.2.1")),
            ("ip:previous", json!("198.51.100.7")),
            ("ip", json!("192.0.2.1")),
            ("wifi-ap:trusted", json!(true)),
            ("wifi-ap:current", json!("ap-lab-1")),
            ("used:ip:192.0.2.1", json!(true)),
            ("used:ip:198.51.100.7", json!(false)),
            ("used:ip:203.0.113.9", json!(true)),
        ];
        let values: ContextValueSet = entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        let r = resource(values);
        let allowed = scopes(["ip", "wifi-ap"]).unwrap();

        // Oracle: test every entry against every allowed scope by plain string rules,
        // rejecting anything that belongs to the longer `used:ip` scope.
        let mut expected = ContextValueSet::new();
        for (key, value) in &entries {
            let mut hit = false;
            for scope in ["ip", "wifi-ap"] {
                let direct = *key == scope || key.starts_with(&format!("{scope}:"));
                let shadowed = key.starts_with("used:ip");
                if direct && !shadowed {
                    hit = true;
                }
            }
            if hit {
                expected.insert(*key, value.clone()).unwrap();
            }
        }
        assert_eq!(expected.len(), 5);
        assert_eq!(filter_by_scopes(&r, &allowed), expected);
        assert!(filter_by_scopes(&r, &allowed).keys().all(|k| !k.starts_with("used:ip")));
    }

    #[test]
    fn merge_adds_and_overwrites() {
        let base = resource(ContextValueSet::new().with("used:ip:192.0.2.1", true).unwrap());
        let upstream = ContextValueSet::new().with("wifi-ap:trusted", true).unwrap();
        let merged = merge_contexts(&base, &upstream).unwrap();
        assert_eq!(merged.values().len(), 2);
        assert_eq!(merged.ctx_type(), base.ctx_type());
        assert_eq!(merged.owner(), base.owner());

        assert_eq!(merge_contexts(&base, &ContextValueSet::new()).unwrap(), base);

        let bad = ContextValueSet::new().with("gps:lat", 1.5).unwrap();
        assert_eq!(merge_contexts(&base, &bad), Err(Error::UnknownScope("gps:lat".into())));
    }

    #[test]
    fn merge_collision_matches_sequential_replay() {
        let base = resource(
            ContextValueSet::new()
                .with("used:ip:192.0.2.1", true)
                .unwrap()
                .with("ip:current", "192.0.2.1")
                .unwrap(),
        );
        let upstream = ContextValueSet::new()
            .with("used:ip:192.0.2.1", false)
            .unwrap()
            .with("wifi-ap:trusted", true)
            .unwrap();
        let merged = merge_contexts(&base, &upstream).unwrap();

        // Oracle: replay every insertion in order into a plain map.
        let mut replay = std::collections::BTreeMap::new();
        for (k, v) in base.values().iter().chain(upstream.iter()) {
            replay.insert(k.clone(), v.clone());
        }
        let replayed: ContextValueSet = replay.into_iter().collect();
        assert_eq!(merged.values(), &replayed);
        assert_eq!(merged.values().get("used:ip:192.0.2.1"), Some(&json!(false)));
    }

    #[test]
    fn resource_invariants() {
        let owner = SubjectId::user("alice@example.com").unwrap();
        assert_eq!(
            ContextResource::new(owner.clone(), location_type(), ScopeSet::new(), ContextValueSet::new(), "x"),
            Err(Error::EmptyScopes)
        );
        let stray = ContextValueSet::new().with("gps:lat", 1).unwrap();
        assert!(ContextResource::new(owner, location_type(), scopes(["ip"]).unwrap(), stray, "x").is_err());

        let mut r = resource(ContextValueSet::new());
        r.assign_id(CtxId("ctx-1".into())).unwrap();
        r.assign_id(CtxId("ctx-1".into())).unwrap();
        assert!(r.assign_id(CtxId("ctx-2".into())).is_err());
    }

    fn arb_entries() -> impl Strategy<Value = Vec<(usize, String, bool)>> {
        prop::collection::vec((0usize..4, "[a-z0-9.]{1,6}", any::<bool>()), 0..12)
    }

    fn arb_subset() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), 4)
    }

    const UNIVERSE: [&str; 4] = ["ip", "wifi-ap", "used:ip", "used"];

    fn build(entries: &[(usize, String, bool)]) -> ContextResource {
        let values: ContextValueSet = entries
            .iter()
            .map(|(s, d, v)| (format!("{}:{}", UNIVERSE[*s], d), Value::Bool(*v)))
            .collect();
        ContextResource::new(
            SubjectId::user("alice@example.com").unwrap(),
            location_type(),
            scopes(UNIVERSE).unwrap(),
            values,
            "https://cap1.example",
        )
        .unwrap()
    }

    fn pick(mask: &[bool]) -> ScopeSet {
        UNIVERSE
            .iter()
            .zip(mask)
            .filter(|(_, on)| **on)
            .map(|(s, _)| Scope::new(*s).unwrap())
            .collect()
    }

    proptest! {
        #[test]
        fn full_scope_filter_is_identity(entries in arb_entries()) {
            let r = build(&entries);
            prop_assert_eq!(&filter_by_scopes(&r, r.scopes()), r.values());
        }

        #[test]
        fn filter_is_monotone(entries in arb_entries(), a in arb_subset(), b in arb_subset()) {
            let r = build(&entries);
            let small = pick(&a);
            let large: ScopeSet = small.union(&pick(&b)).cloned().collect();
            let fs = filter_by_scopes(&r, &small);
            let fl = filter_by_scopes(&r, &large);
            for (k, v) in fs.iter() {
                prop_assert_eq!(fl.get(k), Some(v));
            }
        }

        #[test]
        fn filter_is_idempotent(entries in arb_entries(), a in arb_subset()) {
            let r = build(&entries);
            let allowed = pick(&a);
            let once = filter_by_scopes(&r, &allowed);
            let mut again = r.clone();
            again.set_values(once.clone()).unwrap();
            prop_assert_eq!(filter_by_scopes(&again, &allowed), once);
        }

        #[test]
        fn merge_is_associative_under_replay(x in arb_entries(), y in arb_entries(), z in arb_entries()) {
            let base = build(&x);
            let u1 = build(&y).values().clone();
            let u2 = build(&z).values().clone();
            let stepwise = merge_contexts(&merge_contexts(&base, &u1).unwrap(), &u2).unwrap();
            let combined = merge_contexts(&u1_resource(&base, &u1), &u2).unwrap();
            let mut joined = u1.clone();
            for (k, v) in u2.iter() { joined.insert(k.clone(), v.clone()).unwrap(); }
            let at_once = merge_contexts(&base, &joined).unwrap();
            prop_assert_eq!(stepwise.values(), at_once.values());
            prop_assert_eq!(combined.values(), at_once.values());
        }
    }

    fn u1_resource(base: &ContextResource, u1: &ContextValueSet) -> ContextResource {
        merge_contexts(base, u1).unwrap()
    }
}
