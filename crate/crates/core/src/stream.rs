//! Transmitter-side stream registry: stream configuration, subject approval
//! and ordered per-stream delivery queues.
//!
//! The registry is a plain state machine. Pushing tokens over the network is
//! the caller's job: it drains [`StreamRegistry::next_pending`] and
//! acknowledges each token once the receiver accepted it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::SecurityEventToken;
use crate::error::{Error, Result};
use crate::ids::IdGen;
use crate::model::{filter_by_scopes, ContextResource, ContextType, ContextValueSet, Identifier, ScopeSet, SubjectId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Delivery {
    Push { endpoint: String },
    Poll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamStatus {
    Enabled,
    Paused,
}

/// What a receiver submits to open a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRequest {
    pub delivery: Delivery,
    pub requested_ctx_types: BTreeSet<ContextType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stream_id: String,
    pub transmitter: String,
    pub receiver: String,
    pub delivery: Delivery,
    pub requested_ctx_types: BTreeSet<ContextType>,
    pub status: StreamStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectState {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject: SubjectId,
    pub state: SubjectState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpt_ref: Option<String>,
    /// Scopes the proving RPT grants, per context type carried by the stream.
    #[serde(default)]
    pub granted: BTreeMap<ContextType, ScopeSet>,
}

/// Outcome of checking an authorization proof for a subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Approval {
    /// No proof was presented.
    Unproven,
    Approved {
        rpt: String,
        granted: BTreeMap<ContextType, ScopeSet>,
    },
    Rejected {
        rpt: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub stream_id: String,
    pub seq: u64,
    pub jti: String,
    pub subject: String,
}

/// A token waiting for push delivery or for the receiver to poll.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queued {
    pub seq: u64,
    pub jti: String,
    pub token: String,
}

#[derive(Debug)]
struct StreamState {
    config: StreamConfig,
    subjects: BTreeMap<Identifier, SubjectEntry>,
    queue: VecDeque<Queued>,
    next_seq: u64,
    log: Vec<Receipt>,
    last_view: HashMap<(Identifier, ContextType), ContextValueSet>,
}

#[derive(Debug)]
pub struct StreamRegistry {
    transmitter: String,
    served: BTreeSet<ContextType>,
    streams: BTreeMap<String, StreamState>,
}

impl StreamRegistry {
    pub fn new(transmitter: impl Into<String>, served: impl IntoIterator<Item = ContextType>) -> Self {
        StreamRegistry {
            transmitter: transmitter.into(),
            served: served.into_iter().collect(),
            streams: BTreeMap::new(),
        }
    }

    pub fn create_stream(&mut self, receiver: &str, request: StreamRequest, ids: &IdGen) -> Result<StreamConfig> {
        if request.requested_ctx_types.is_empty() {
            return Err(Error::InvalidStreamConfig("no context types requested".into()));
        }
        if let Some(t) = request.requested_ctx_types.iter().find(|t| !self.served.contains(*t)) {
            return Err(Error::UnsupportedContextType(t.to_string()));
        }
        if let Delivery::Push { endpoint } = &request.delivery {
            if !crate::model::is_absolute_uri(endpoint) {
                return Err(Error::InvalidStreamConfig(format!("bad push endpoint {endpoint:?}")));
            }
        }
        if let Some(existing) = self.streams.values().find(|s| {
            s.config.receiver == receiver && s.config.requested_ctx_types == request.requested_ctx_types
        }) {
            return Err(Error::DuplicateStream(existing.config.stream_id.clone()));
        }
        let config = StreamConfig {
            stream_id: ids.next("stream"),
            transmitter: self.transmitter.clone(),
            receiver: receiver.to_string(),
            delivery: request.delivery,
            requested_ctx_types: request.requested_ctx_types,
            status: StreamStatus::Enabled,
        };
        self.streams.insert(
            config.stream_id.clone(),
            StreamState {
                config: config.clone(),
                subjects: BTreeMap::new(),
                queue: VecDeque::new(),
                next_seq: 0,
                log: Vec::new(),
                last_view: HashMap::new(),
            },
        );
        Ok(config)
    }

    fn stream(&self, stream_id: &str) -> Result<&StreamState> {
        self.streams
            .get(stream_id)
            .ok_or_else(|| Error::UnknownStream(stream_id.to_string()))
    }

    fn stream_mut(&mut self, stream_id: &str) -> Result<&mut StreamState> {
        self.streams
            .get_mut(stream_id)
            .ok_or_else(|| Error::UnknownStream(stream_id.to_string()))
    }

    /// Looks up a stream on behalf of `receiver`; other parties see nothing.
    pub fn get(&self, stream_id: &str, receiver: &str) -> Result<&StreamConfig> {
        let s = self.stream(stream_id)?;
        if s.config.receiver != receiver {
            return Err(Error::UnknownStream(stream_id.to_string()));
        }
        Ok(&s.config)
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamConfig> {
        self.streams.values().map(|s| &s.config)
    }

    pub fn set_status(&mut self, stream_id: &str, receiver: &str, status: StreamStatus) -> Result<StreamConfig> {
        self.get(stream_id, receiver)?;
        let s = self.stream_mut(stream_id)?;
        s.config.status = status;
        Ok(s.config.clone())
    }

    /// Removes the stream, dropping anything still queued.
    pub fn delete(&mut self, stream_id: &str, receiver: &str) -> Result<StreamConfig> {
        self.get(stream_id, receiver)?;
        Ok(self.streams.remove(stream_id).expect("checked above").config)
    }

    pub fn subject(&self, stream_id: &str, subject: &SubjectId) -> Option<&SubjectEntry> {
        self.streams.get(stream_id)?.subjects.get(&subject.user)
    }

    pub fn subjects(&self, stream_id: &str) -> Result<Vec<SubjectEntry>> {
        Ok(self.stream(stream_id)?.subjects.values().cloned().collect())
    }

    /// Adds `subject` to the stream with the outcome of the authorization check.
    ///
    /// An approved entry is returned unchanged on repeated adds; a pending or
    /// rejected entry is re-evaluated when a new proof is presented.
    pub fn add_subject(&mut self, stream_id: &str, subject: &SubjectId, approval: Approval) -> Result<SubjectEntry> {
        let s = self.stream_mut(stream_id)?;
        if s.config.status != StreamStatus::Enabled {
            return Err(Error::StreamPaused);
        }
        let key = subject.user.clone();
        if let Some(existing) = s.subjects.get(&key) {
            if existing.state == SubjectState::Approved || approval == Approval::Unproven {
                return Ok(existing.clone());
            }
        }
        let entry = match approval {
            Approval::Unproven => SubjectEntry {
                subject: subject.owner(),
                state: SubjectState::Pending,
                rpt_ref: None,
                granted: BTreeMap::new(),
            },
            Approval::Approved { rpt, granted } => SubjectEntry {
                subject: subject.owner(),
                state: SubjectState::Approved,
                rpt_ref: Some(rpt),
                granted,
            },
            Approval::Rejected { rpt } => SubjectEntry {
                subject: subject.owner(),
                state: SubjectState::Rejected,
                rpt_ref: Some(rpt),
                granted: BTreeMap::new(),
            },
        };
        s.subjects.insert(key, entry.clone());
        Ok(entry)
    }

    /// Withdraws approval, e.g. after the proving RPT was revoked.
    pub fn revoke_subject(&mut self, stream_id: &str, subject: &SubjectId) {
        if let Some(entry) = self
            .streams
            .get_mut(stream_id)
            .and_then(|s| s.subjects.get_mut(&subject.user))
        {
            entry.state = SubjectState::Rejected;
            entry.granted.clear();
        }
    }

    /// Queues a signed token for `subject`.
    pub fn transmit(
        &mut self,
        stream_id: &str,
        subject: &SubjectId,
        set: &SecurityEventToken,
        token: String,
    ) -> Result<Receipt> {
        let s = self.stream_mut(stream_id)?;
        match s.subjects.get(&subject.user) {
            Some(entry) if entry.state == SubjectState::Approved => {}
            _ => return Err(Error::SubjectNotApproved),
        }
        if s.config.status == StreamStatus::Paused {
            return Err(Error::StreamPaused);
        }
        if set.aud != s.config.receiver {
            return Err(Error::AudienceMismatch {
                expected: s.config.receiver.clone(),
                found: set.aud.clone(),
            });
        }
        let seq = s.next_seq;
        s.next_seq += 1;
        s.queue.push_back(Queued {
            seq,
            jti: set.jti.clone(),
            token,
        });
        let receipt = Receipt {
            stream_id: stream_id.to_string(),
            seq,
            jti: set.jti.clone(),
            subject: subject.email().to_string(),
        };
        s.log.push(receipt.clone());
        Ok(receipt)
    }

    /// The oldest undelivered token of a push stream, if the stream is enabled.
    pub fn next_pending(&self, stream_id: &str) -> Option<(String, Queued)> {
        let s = self.streams.get(stream_id)?;
        match (&s.config.delivery, s.config.status) {
            (Delivery::Push { endpoint }, StreamStatus::Enabled) => {
                s.queue.front().map(|q| (endpoint.clone(), q.clone()))
            }
            _ => None,
        }
    }

    /// Drops the head of the queue once the receiver accepted it.
    pub fn acknowledge(&mut self, stream_id: &str, seq: u64) {
        if let Some(s) = self.streams.get_mut(stream_id) {
            if s.queue.front().is_some_and(|q| q.seq == seq) {
                s.queue.pop_front();
            }
        }
    }

    pub fn pending_count(&self) -> usize {
        self.streams
            .values()
            .filter(|s| matches!(s.config.delivery, Delivery::Push { .. }))
            .map(|s| s.queue.len())
            .sum()
    }

    pub fn push_streams_with_backlog(&self) -> Vec<String> {
        self.streams
            .values()
            .filter(|s| matches!(s.config.delivery, Delivery::Push { .. }) && !s.queue.is_empty())
            .map(|s| s.config.stream_id.clone())
            .collect()
    }

    /// Returns and drains everything queued on a poll stream.
    pub fn poll(&mut self, stream_id: &str, receiver: &str) -> Result<Vec<String>> {
        self.get(stream_id, receiver)?;
        let s = self.stream_mut(stream_id)?;
        if s.config.delivery != Delivery::Poll {
            return Err(Error::WrongDeliveryMode);
        }
        Ok(s.queue.drain(..).map(|q| q.token).collect())
    }

    pub fn log(&self, stream_id: &str) -> Result<&[Receipt]> {
        Ok(&self.stream(stream_id)?.log)
    }

    /// Subjects holding an RPT on some enabled stream that carries `ctx_type`.
    pub fn approved_proofs(&self, ctx_type: &ContextType, owner: &SubjectId) -> Vec<(String, String)> {
        self.streams
            .values()
            .filter(|s| s.config.requested_ctx_types.contains(ctx_type))
            .filter_map(|s| {
                let e = s.subjects.get(&owner.user)?;
                match (&e.state, &e.rpt_ref) {
                    (SubjectState::Approved, Some(rpt)) => Some((s.config.stream_id.clone(), rpt.clone())),
                    _ => None,
                }
            })
            .collect()
    }

    /// Transmits the scope-filtered view of `resource` on every enabled stream
    /// that carries its type and has the owner approved.
    ///
    /// Streams whose filtered view is empty or identical to the last view sent
    /// are skipped. `only` restricts the fan-out to one stream.
    pub fn on_context_update<F>(
        &mut self,
        resource: &ContextResource,
        subject: &SubjectId,
        only: Option<&str>,
        mut encode: F,
    ) -> Vec<Result<Receipt>>
    where
        F: FnMut(&str, &ContextValueSet) -> Result<(SecurityEventToken, String)>,
    {
        let owner = resource.owner().user.clone();
        let targets: Vec<(String, String, ScopeSet)> = self
            .streams
            .values()
            .filter(|s| only.is_none_or(|id| id == s.config.stream_id))
            .filter(|s| s.config.status == StreamStatus::Enabled)
            .filter(|s| s.config.requested_ctx_types.contains(resource.ctx_type()))
            .filter_map(|s| {
                let entry = s.subjects.get(&owner)?;
                if entry.state != SubjectState::Approved {
                    return None;
                }
                let granted = entry.granted.get(resource.ctx_type())?;
                Some((s.config.stream_id.clone(), s.config.receiver.clone(), granted.clone()))
            })
            .collect();

        let mut out = Vec::new();
        for (stream_id, receiver, granted) in targets {
            let view = filter_by_scopes(resource, &granted);
            let view_key = (owner.clone(), resource.ctx_type().clone());
            let s = self.streams.get_mut(&stream_id).expect("target exists");
            if view.is_empty() || s.last_view.get(&view_key) == Some(&view) {
                continue;
            }
            let result = encode(&receiver, &view)
                .and_then(|(set, token)| self.transmit(&stream_id, subject, &set, token));
            if result.is_ok() {
                let s = self.streams.get_mut(&stream_id).expect("target exists");
                s.last_view.insert(view_key, view);
            }
            out.push(result);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::codec::{derive_key_seed, decode_and_verify, KeyRing, SetEncoder};
    use crate::model::scopes;
    use std::sync::Arc;

    const CAP1: &str = "https://cap1.example";
    const RP1: &str = "https://rp1.example";
    const RP2: &str = "https://rp2.example";

    fn location() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/device-location").unwrap()
    }
    fn health() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/device-health").unwrap()
    }
    fn wifi() -> ContextType {
        ContextType::new("https://cap1.example/ctxtype/wifi").unwrap()
    }
    fn alice() -> SubjectId {
        SubjectId::user("alice@example.com").unwrap()
    }

    fn registry() -> StreamRegistry {
        StreamRegistry::new(CAP1, [location(), health(), wifi()])
    }

    fn encoder() -> SetEncoder {
        let mut ring = KeyRing::new();
        ring.add_signer(CAP1, derive_key_seed(CAP1, 3));
        SetEncoder::new(Arc::new(ring), Arc::new(SimClock::new(100)), Arc::new(IdGen::seeded(3)))
    }

    fn push_request(types: &[ContextType]) -> StreamRequest {
        StreamRequest {
            delivery: Delivery::Push {
                endpoint: "https://rp1.example/ctx-recv".into(),
            },
            requested_ctx_types: types.iter().cloned().collect(),
        }
    }

    fn approve(granted: &[(ContextType, &[&str])]) -> Approval {
        Approval::Approved {
            rpt: "rpt-1".into(),
            granted: granted
                .iter()
                .map(|(t, s)| (t.clone(), scopes(s.iter().copied()).unwrap()))
                .collect(),
        }
    }

    fn resource(values: ContextValueSet) -> ContextResource {
        ContextResource::new(alice(), location(), scopes(["ip", "wifi-ap", "used:ip"]).unwrap(), values, CAP1)
            .unwrap()
    }

    fn set_for(enc: &SetEncoder, aud: &str, n: i64) -> (SecurityEventToken, String) {
        let values = ContextValueSet::new().with("ip:seq", n).unwrap();
        enc.encode_event(CAP1, aud, &alice(), &location(), &values).unwrap()
    }

    #[test]
    fn create_stream_registers_enabled_push_stream() {
        let ids = IdGen::seeded(1);
        let mut reg = registry();
        let cfg = reg.create_stream(RP1, push_request(&[location()]), &ids).unwrap();
        assert_eq!(cfg.status, StreamStatus::Enabled);
        assert_eq!(cfg.receiver, RP1);
        assert_eq!(cfg.delivery, Delivery::Push { endpoint: "https://rp1.example/ctx-recv".into() });
        assert!(reg.subjects(&cfg.stream_id).unwrap().is_empty());
    }

    #[test]
    fn create_stream_validation() {
        let ids = IdGen::seeded(1);
        let mut reg = registry();
        assert!(matches!(
            reg.create_stream(RP1, push_request(&[]), &ids),
            Err(Error::InvalidStreamConfig(_))
        ));
        let other = ContextType::new("https://cap9.example/ctxtype/x").unwrap();
        assert!(matches!(
            reg.create_stream(RP1, push_request(&[other]), &ids),
            Err(Error::UnsupportedContextType(_))
        ));
        let bad_endpoint = StreamRequest {
            delivery: Delivery::Push { endpoint: "ctx-recv".into() },
            requested_ctx_types: [location()].into(),
        };
        assert!(reg.create_stream(RP1, bad_endpoint, &ids).is_err());
    }

    #[test]
    fn duplicate_streams_match_replay_count() {
        let ids = IdGen::seeded(1);
        let mut reg = registry();
        let log: Vec<(&str, Vec<ContextType>)> = vec![
            (RP1, vec![location()]),
            (RP1, vec![location()]),
            (RP2, vec![location()]),
            (RP1, vec![location(), health()]),
            (RP2, vec![location()]),
            (RP1, vec![health(), location()]),
        ];
        let mut duplicates = 0;
        for (receiver, types) in &log {
            match reg.create_stream(receiver, push_request(types), &ids) {
                Ok(_) => {}
                Err(Error::DuplicateStream(_)) => duplicates += 1,
                Err(e) => panic!("{e}"),
            }
        }
        // Oracle: distinct (receiver, type set) pairs in the request log.
        let distinct: BTreeSet<(&str, BTreeSet<ContextType>)> = log
            .iter()
            .map(|(r, t)| (*r, t.iter().cloned().collect()))
            .collect();
        assert_eq!(reg.streams().count(), distinct.len());
        assert_eq!(duplicates, log.len() - distinct.len());
    }

    #[test]
    fn subjects_without_proof_stay_pending_and_receive_nothing() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let id = reg.create_stream(RP1, push_request(&[location()]), &ids).unwrap().stream_id;
        let entry = reg.add_subject(&id, &alice(), Approval::Unproven).unwrap();
        assert_eq!(entry.state, SubjectState::Pending);
        let (set, token) = set_for(&enc, RP1, 1);
        assert_eq!(reg.transmit(&id, &alice(), &set, token), Err(Error::SubjectNotApproved));
        assert!(reg.next_pending(&id).is_none());
        assert!(reg.log(&id).unwrap().is_empty());

        let approved = reg.add_subject(&id, &alice(), approve(&[(location(), &["ip"])])).unwrap();
        assert_eq!(approved.state, SubjectState::Approved);
        // Repeat add returns the approved entry unchanged.
        let again = reg.add_subject(&id, &alice(), Approval::Rejected { rpt: "x".into() }).unwrap();
        assert_eq!(again, approved);
        assert!(matches!(
            reg.add_subject("nope", &alice(), Approval::Unproven),
            Err(Error::UnknownStream(_))
        ));
    }

    #[test]
    fn transmissions_keep_order_and_audience() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let id = reg.create_stream(RP1, push_request(&[location()]), &ids).unwrap().stream_id;
        reg.add_subject(&id, &alice(), approve(&[(location(), &["ip"])])).unwrap();

        let (wrong, token) = set_for(&enc, RP2, 0);
        assert!(matches!(reg.transmit(&id, &alice(), &wrong, token), Err(Error::AudienceMismatch { .. })));

        let mut sent = Vec::new();
        for n in 0..5 {
            let (set, token) = set_for(&enc, RP1, n);
            sent.push(set.jti.clone());
            reg.transmit(&id, &alice(), &set, token).unwrap();
        }
        // Receiver side: drain in order as a push loop would.
        let mut received = Vec::new();
        while let Some((endpoint, q)) = reg.next_pending(&id) {
            assert_eq!(endpoint, "https://rp1.example/ctx-recv");
            let set = decode_and_verify(&q.token, RP1, enc.keyring()).unwrap();
            received.push(set.jti);
            reg.acknowledge(&id, q.seq);
        }
        let log: Vec<String> = reg.log(&id).unwrap().iter().map(|r| r.jti.clone()).collect();
        assert_eq!(received, log);
        assert_eq!(received, sent);
    }

    #[test]
    fn pause_retains_queue_and_resume_continues() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let id = reg.create_stream(RP1, push_request(&[location()]), &ids).unwrap().stream_id;
        reg.add_subject(&id, &alice(), approve(&[(location(), &["ip"])])).unwrap();
        for n in 0..3 {
            let (set, token) = set_for(&enc, RP1, n);
            reg.transmit(&id, &alice(), &set, token).unwrap();
        }
        reg.set_status(&id, RP1, StreamStatus::Paused).unwrap();
        assert!(reg.next_pending(&id).is_none());
        let (set, token) = set_for(&enc, RP1, 9);
        assert_eq!(reg.transmit(&id, &alice(), &set, token), Err(Error::StreamPaused));
        reg.set_status(&id, RP1, StreamStatus::Enabled).unwrap();
        let mut seqs = Vec::new();
        while let Some((_, q)) = reg.next_pending(&id) {
            seqs.push(q.seq);
            reg.acknowledge(&id, q.seq);
        }
        assert_eq!(seqs, vec![0, 1, 2]);
        reg.delete(&id, RP1).unwrap();
        assert!(matches!(reg.log(&id), Err(Error::UnknownStream(_))));
    }

    #[test]
    fn poll_drains_in_order() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let request = StreamRequest {
            delivery: Delivery::Poll,
            requested_ctx_types: [location()].into(),
        };
        let id = reg.create_stream(RP1, request, &ids).unwrap().stream_id;
        assert!(reg.poll(&id, RP1).unwrap().is_empty());
        reg.add_subject(&id, &alice(), approve(&[(location(), &["ip"])])).unwrap();
        let mut tokens = Vec::new();
        for n in 0..3 {
            let (set, token) = set_for(&enc, RP1, n);
            tokens.push(token.clone());
            reg.transmit(&id, &alice(), &set, token).unwrap();
        }
        assert!(reg.next_pending(&id).is_none(), "poll streams are never pushed");
        assert_eq!(reg.poll(&id, RP1).unwrap(), tokens);
        assert!(reg.poll(&id, RP1).unwrap().is_empty());
        assert!(matches!(reg.poll(&id, RP2), Err(Error::UnknownStream(_))));

        let push = reg.create_stream(RP2, push_request(&[location()]), &ids).unwrap().stream_id;
        assert_eq!(reg.poll(&push, RP2), Err(Error::WrongDeliveryMode));
    }

    #[test]
    fn interleaved_poll_reconciles_with_log() {
        let ids = IdGen::seeded(5);
        let enc = encoder();
        let mut reg = registry();
        let request = StreamRequest {
            delivery: Delivery::Poll,
            requested_ctx_types: [location()].into(),
        };
        let id = reg.create_stream(RP1, request, &ids).unwrap().stream_id;
        reg.add_subject(&id, &alice(), approve(&[(location(), &["ip"])])).unwrap();
        let mut polled = Vec::new();
        for n in 0..100 {
            let (set, token) = set_for(&enc, RP1, n);
            reg.transmit(&id, &alice(), &set, token).unwrap();
            if n % 7 == 3 || n % 11 == 0 {
                polled.extend(reg.poll(&id, RP1).unwrap());
            }
        }
        polled.extend(reg.poll(&id, RP1).unwrap());
        let jtis: Vec<String> = polled
            .iter()
            .map(|t| decode_and_verify(t, RP1, enc.keyring()).unwrap().jti)
            .collect();
        let log: Vec<String> = reg.log(&id).unwrap().iter().map(|r| r.jti.clone()).collect();
        assert_eq!(jtis, log);
        assert_eq!(jtis.iter().collect::<BTreeSet<_>>().len(), 100);
    }

    #[test]
    fn update_fans_out_with_per_stream_scopes() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let s1 = reg.create_stream(RP1, push_request(&[location()]), &ids).unwrap().stream_id;
        let s2 = reg.create_stream(RP2, push_request(&[location()]), &ids).unwrap().stream_id;
        reg.add_subject(&s1, &alice(), approve(&[(location(), &["ip", "wifi-ap"])])).unwrap();
        reg.add_subject(&s2, &alice(), approve(&[(location(), &["used:ip"])])).unwrap();
        let r = resource(
            ContextValueSet::new()
                .with("used:ip:192.0.2.1", true).unwrap()
                .with("ip:current", "192.0.2.1").unwrap()
                .with("wifi-ap:trusted", true).unwrap(),
        );
        let subject = alice().with_device("alice-no-Laptop").unwrap();
        let receipts = reg.on_context_update(&r, &subject, None, |aud, v| {
            enc.encode_event(CAP1, aud, &subject, r.ctx_type(), v)
        });
        assert_eq!(receipts.len(), 2);
        let (_, q1) = reg.next_pending(&s1).unwrap();
        let (_, q2) = reg.next_pending(&s2).unwrap();
        let t1 = decode_and_verify(&q1.token, RP1, enc.keyring()).unwrap();
        let t2 = decode_and_verify(&q2.token, RP2, enc.keyring()).unwrap();
        let k1: Vec<_> = t1.events[&location()].values.keys().cloned().collect();
        let k2: Vec<_> = t2.events[&location()].values.keys().cloned().collect();
        assert_eq!(k1, vec!["ip:current", "wifi-ap:trusted"]);
        assert_eq!(k2, vec!["used:ip:192.0.2.1"]);

        // Unchanged views are not re-sent.
        let again = reg.on_context_update(&r, &subject, None, |aud, v| {
            enc.encode_event(CAP1, aud, &subject, r.ctx_type(), v)
        });
        assert!(again.is_empty());
    }

    #[test]
    fn update_for_unrequested_type_sends_nothing() {
        let ids = IdGen::seeded(1);
        let enc = encoder();
        let mut reg = registry();
        let s1 = reg.create_stream(RP1, push_request(&[health()]), &ids).unwrap().stream_id;
        reg.add_subject(&s1, &alice(), approve(&[(health(), &["ip"])])).unwrap();
        let r = resource(ContextValueSet::new().with("ip:current", "192.0.2.1").unwrap());
        let out = reg.on_context_update(&r, &alice(), None, |aud, v| {
            enc.encode_event(CAP1, aud, &alice(), r.ctx_type(), v)
        });
        assert!(out.is_empty());
    }

    #[test]
    fn update_transmits_exactly_to_approved_streams() {
        // Oracle: brute force over every approval combination of three streams.
        let enc = encoder();
        let receivers = [RP1, RP2, "https://rp3.example"];
        for mask in 0u8..8 {
            let ids = IdGen::seeded(u64::from(mask));
            let mut reg = registry();
            let mut expected = BTreeSet::new();
            for (i, receiver) in receivers.iter().enumerate() {
                let id = reg.create_stream(receiver, push_request(&[location()]), &ids).unwrap().stream_id;
                let approval = if mask & (1 << i) != 0 {
                    expected.insert(id.clone());
                    approve(&[(location(), &["ip"])])
                } else if i % 2 == 0 {
                    Approval::Unproven
                } else {
                    Approval::Rejected { rpt: "bad".into() }
                };
                reg.add_subject(&id, &alice(), approval).unwrap();
            }
            let r = resource(ContextValueSet::new().with("ip:current", "192.0.2.1").unwrap());
            let receipts = reg.on_context_update(&r, &alice(), None, |aud, v| {
                enc.encode_event(CAP1, aud, &alice(), r.ctx_type(), v)
            });
            let hit: BTreeSet<String> = receipts.into_iter().map(|r| r.unwrap().stream_id).collect();
            assert_eq!(hit, expected, "mask {mask:03b}");
        }
    }
}
