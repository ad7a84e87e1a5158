//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed.
//!
//! Every oracle here is computed independently of the code under test.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use ztf_core::authz::{AuthzConfig, AuthzEvent, AuthzServer, ClaimsDocument, Effect, GrantOutcome, PolicyRule};
use ztf_core::clock::SimClock;
use ztf_core::codec::{decode_and_verify, derive_key_seed, KeyRing, SetEncoder};
use ztf_core::error::Error;
use ztf_core::ids::IdGen;
use ztf_core::model::{ContextType, ContextValueSet, CtxId, Scope, ScopeSet, SubjectId};
use ztf_core::uma::Acquisition;
use ztf_harness::scenarios::{self, COMPROMISED_IDP, CROSS_RP_SHARING, DEVICE_HEALTH, IDP_SWITCH, SCENARIOS};
use ztf_harness::{Federation, ScenarioReport, TopologySpec};

const DEVICE_HEALTH_BUDGET: Duration = Duration::from_secs(5);
const UMA_BUDGET: Duration = Duration::from_secs(60);
const UMA_PAIRS: usize = 10_000;
const CODEC_ROUND_TRIPS: usize = 1_000;
const UNIVERSE: [&str; 4] = ["ip", "wifi-ap", "used:ip", "version"];

const CAP: &str = "https://cap1.example";
const RP1: &str = "https://rp1.example";
const RP2: &str = "https://rp2.example";
const PARTIES: [&str; 3] = [RP1, RP2, "https://rp3.example"];

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        name,
        passed,
        detail: detail.into(),
    }
}

// --- scenarios ---------------------------------------------------------------

struct ScenarioRun {
    report: ScenarioReport,
    elapsed: Duration,
    /// Entries checked and violations found by the delivery-log audit below.
    confinement: (usize, Vec<String>),
}

/// A key is inside a granted scope when it is the scope itself or extends it
/// with a `:` qualifier.
fn key_in(key: &str, granted: &HashSet<String>) -> bool {
    granted.iter().any(|s| key == s || key.starts_with(&format!("{s}:")))
}

/// Joins the authorization server's RPT log with every RP's delivery log.
async fn audit_deliveries(fed: &Federation) -> (usize, Vec<String>) {
    let log = fed.authz_admin().unwrap().log().await.unwrap();
    let mut owner_of: HashMap<CtxId, (String, String, ContextType)> = HashMap::new();
    let mut granted: HashMap<(String, String, String, ContextType), HashSet<String>> = HashMap::new();
    for e in &log {
        match e {
            AuthzEvent::ResourceRegistered {
                ctx_id,
                owner,
                cap,
                ctx_type,
            } => {
                owner_of.insert(ctx_id.clone(), (owner.clone(), cap.clone(), ctx_type.clone()));
            }
            AuthzEvent::RptIssued {
                requesting_party, grants, ..
            } => {
                for g in grants {
                    let (owner, cap, ctx_type) = owner_of[&g.ctx_id].clone();
                    granted
                        .entry((requesting_party.clone(), owner, cap, ctx_type))
                        .or_default()
                        .extend(g.scopes.iter().map(|s| s.as_str().to_string()));
                }
            }
            _ => {}
        }
    }
    let mut checked = 0;
    let mut violations = Vec::new();
    let none = HashSet::new();
    for rp in &fed.spec().rps {
        let rp = &rp.config.issuer;
        for d in fed.rp(rp).audit().await.unwrap().deliveries {
            let allowed = granted
                .get(&(rp.clone(), d.subject.clone(), d.iss.clone(), d.ctx_type.clone()))
                .unwrap_or(&none);
            for k in &d.keys {
                checked += 1;
                if !key_in(k, allowed) {
                    violations.push(format!("{rp} got {k} from {} ({})", d.iss, d.jti));
                }
            }
        }
    }
    (checked, violations)
}

async fn run_scenario(name: &str) -> ScenarioRun {
    let started = Instant::now();
    let mut topology = TopologySpec::default_topology();
    if let Some(a) = topology.authz.as_mut() {
        a.auto_consent = true;
    }
    let mut fed = Federation::boot(topology).await.expect("default topology boots");
    let report = scenarios::run_named(&fed, name).await.expect("scenario runs");
    let confinement = audit_deliveries(&fed).await;
    fed.shutdown().await;
    ScenarioRun {
        report,
        elapsed: started.elapsed(),
        confinement,
    }
}

fn failed_checks(r: &ScenarioReport) -> String {
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        format!("{} checks passed", r.checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    }
}

// --- grant flow ----------------------------------------------------------------

/// Expected sender and receiver roles of each numbered step.
const FLOW: [(u8, &str, &str); 11] = [
    (1, "rp", "rp"),
    (2, "rp", "rp"),
    (3, "rp", "cap"),
    (4, "cap", "as"),
    (5, "cap", "rp"),
    (6, "rp", "as"),
    (7, "as", "as"),
    (8, "as", "rp"),
    (9, "rp", "cap"),
    (10, "cap", "as"),
    (11, "cap", "rp"),
];

fn flow_conforms(a: &Acquisition, party: &str, authz: &str) -> bool {
    let role = |uri: &str| match uri {
        u if u == party => "rp",
        u if u == authz => "as",
        u if u == a.cap => "cap",
        _ => "?",
    };
    a.rpt().is_some()
        && a.trace.0.len() == FLOW.len()
        && a.trace
            .0
            .iter()
            .zip(FLOW)
            .all(|(s, (n, from, to))| s.step == n && role(&s.from) == from && role(&s.to) == to)
}

fn grant_flow(runs: &[ScenarioRun], authz: &str) -> Outcome {
    let mut traces = 0;
    let mut bad = Vec::new();
    for run in runs {
        for step in &run.report.steps {
            let Some(enrolled) = &step.enrolled else { continue };
            for (rp, report) in &enrolled.acquisitions {
                for a in &report.acquisitions {
                    traces += 1;
                    if !flow_conforms(a, rp, authz) {
                        bad.push(format!("{rp}->{} steps {:?}", a.cap, a.trace.steps()));
                    }
                }
            }
        }
    }
    outcome(
        "grant flow records eleven ordered steps",
        traces > 0 && bad.is_empty(),
        format!("{traces} traces, {} nonconforming {:?}", bad.len(), bad.first()),
    )
}

// --- UMA properties -------------------------------------------------------------

fn mask_to_scopes(mask: u8) -> ScopeSet {
    UNIVERSE
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, s)| Scope::new(*s).unwrap())
        .collect()
}

fn scopes_to_mask(scopes: &ScopeSet) -> u8 {
    scopes
        .iter()
        .map(|s| 1u8 << UNIVERSE.iter().position(|u| *u == s.as_str()).expect("scope from universe"))
        .fold(0, |a, b| a | b)
}

struct Uma {
    server: AuthzServer,
    clock: SimClock,
    owner: SubjectId,
    ctx_type: ContextType,
    ctx_id: CtxId,
}

fn uma_fixture(seed: u64, rpt_ttl: i64) -> Uma {
    let clock = SimClock::new(1_619_696_843);
    let mut config = AuthzConfig::new("https://authz.example");
    config.auto_consent = true;
    config.rpt_ttl = rpt_ttl;
    let server = AuthzServer::new(config, Arc::new(clock.clone()), Arc::new(IdGen::seeded(seed)));
    server.register_cap(CAP);
    let owner = SubjectId::user("alice@example.com").unwrap();
    let pat = server.issue_pat(CAP, &owner).unwrap();
    let ctx_type = ContextType::new("https://cap1.example/ctxtype/device-location").unwrap();
    let ctx_id = server.register_resource(&pat.token, &ctx_type, &mask_to_scopes(0b1111)).unwrap();
    Uma {
        server,
        clock,
        owner,
        ctx_type,
        ctx_id,
    }
}

impl Uma {
    fn set_policy(&self, party: &str, mask: u8) {
        self.server
            .set_policy(
                &self.owner,
                PolicyRule {
                    requesting_party: party.to_string(),
                    ctx_type: self.ctx_type.clone(),
                    scopes: mask_to_scopes(mask),
                    effect: Effect::Allow,
                },
            )
            .unwrap();
    }

    /// Ticket plus redemption; returns the ticket and the granted mask, if any.
    fn request(&self, party: &str, mask: u8) -> (String, Option<(String, u8)>) {
        let ticket = self
            .server
            .issue_permission_ticket(CAP, &self.ctx_id, &mask_to_scopes(mask))
            .unwrap()
            .ticket;
        let granted = match self.server.grant_rpt(&ticket, &ClaimsDocument::for_party(party)).unwrap() {
            GrantOutcome::Granted { rpt, .. } => {
                assert!(rpt.grants.iter().all(|g| g.ctx_id == self.ctx_id));
                let mask = rpt.grants.iter().map(|g| scopes_to_mask(&g.scopes)).fold(0, |a, b| a | b);
                Some((rpt.token, mask))
            }
            GrantOutcome::Denied { .. } => None,
        };
        (ticket, granted)
    }
}

struct UmaTally {
    mismatches: usize,
    double_spends: usize,
    empty_policy_trials: usize,
    empty_policy_grants: usize,
}

fn uma_pairs(seed: u64) -> UmaTally {
    let uma = uma_fixture(seed, 3600);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut policy: HashMap<&str, u8> = HashMap::new();
    let mut tally = UmaTally {
        mismatches: 0,
        double_spends: 0,
        empty_policy_trials: 0,
        empty_policy_grants: 0,
    };
    for _ in 0..UMA_PAIRS {
        let party = PARTIES[rng.gen_range(0..PARTIES.len())];
        let p: u8 = rng.gen_range(0..16);
        let r: u8 = rng.gen_range(1..16);
        uma.set_policy(party, p);
        policy.insert(party, p);
        let (ticket, granted) = uma.request(party, r);
        let expected = p & r;
        let got = granted.as_ref().map(|(_, m)| *m).unwrap_or(0);
        if got != expected {
            tally.mismatches += 1;
        }
        if p == 0 {
            tally.empty_policy_trials += 1;
            tally.empty_policy_grants += usize::from(granted.is_some());
        }
        match uma.server.grant_rpt(&ticket, &ClaimsDocument::for_party(party)) {
            Err(Error::TicketConsumed) => {}
            _ => tally.double_spends += 1,
        }
    }
    tally
}

/// What a timeline run observed: the active set after each event, and the
/// server's own log.
#[derive(PartialEq)]
struct Timeline {
    active_after: Vec<Vec<bool>>,
    log: Vec<AuthzEvent>,
    resurrections: usize,
    stale_after_sweep: usize,
}

fn replay_timeline(seed: u64, events: usize) -> Timeline {
    let uma = uma_fixture(seed, 1800);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let mut policy: HashMap<&str, u8> = HashMap::new();
    let mut rpts: Vec<(String, &str, u8)> = Vec::new();
    let mut ever_inactive: Vec<bool> = Vec::new();
    let mut t = Timeline {
        active_after: Vec::new(),
        log: Vec::new(),
        resurrections: 0,
        stale_after_sweep: 0,
    };
    for _ in 0..events {
        let party = PARTIES[rng.gen_range(0..PARTIES.len())];
        let roll: u8 = rng.gen_range(0..100);
        let swept = match roll {
            0..=29 => {
                let p = rng.gen_range(0..16);
                uma.set_policy(party, p);
                policy.insert(party, p);
                false
            }
            30..=69 => {
                if let (_, Some((token, mask))) = uma.request(party, rng.gen_range(1..16)) {
                    rpts.push((token, party, mask));
                    ever_inactive.push(false);
                }
                false
            }
            70..=84 => {
                uma.server.revocation_sweep();
                true
            }
            _ => {
                uma.clock.advance(rng.gen_range(0..600));
                false
            }
        };
        let active: Vec<bool> = rpts.iter().map(|(tok, ..)| uma.server.introspect(tok).active).collect();
        for (i, a) in active.iter().enumerate() {
            if *a && ever_inactive[i] {
                t.resurrections += 1;
            }
            ever_inactive[i] |= !a;
            if swept && *a {
                let (_, party, mask) = &rpts[i];
                let allowed = policy.get(party).copied().unwrap_or(0);
                if mask & !allowed != 0 {
                    t.stale_after_sweep += 1;
                }
            }
        }
        t.active_after.push(active);
    }
    t.log = uma.server.log();
    t
}

fn uma_conformance(seed: u64) -> Outcome {
    let started = Instant::now();
    let tally = uma_pairs(seed);
    let first = replay_timeline(seed, 2_000);
    let second = replay_timeline(seed, 2_000);
    let revoked = first.active_after.last().map(|a| a.iter().filter(|x| !**x).count()).unwrap_or(0);
    let elapsed = started.elapsed();
    let passed = tally.mismatches == 0
        && tally.double_spends == 0
        && tally.empty_policy_trials > 0
        && tally.empty_policy_grants == 0
        && first.resurrections == 0
        && first.stale_after_sweep == 0
        && revoked > 0
        && first == second
        && elapsed < UMA_BUDGET;
    outcome(
        "uma conformance: grants = policy & request, single-use tickets, deny by default, monotone revocation",
        passed,
        format!(
            "{UMA_PAIRS} pairs, {} mismatches, {} double spends, {}/{} empty-policy grants, \
             {} resurrections, {} stale after sweep, {revoked} revoked, replay identical: {}, {:.2} s < {} s",
            tally.mismatches,
            tally.double_spends,
            tally.empty_policy_grants,
            tally.empty_policy_trials,
            first.resurrections,
            first.stale_after_sweep,
            first == second,
            elapsed.as_secs_f64(),
            UMA_BUDGET.as_secs(),
        ),
    )
}

// --- codec ----------------------------------------------------------------------

fn codec_fixture() -> (SetEncoder, KeyRing) {
    let mut ring = KeyRing::new();
    ring.add_signer(CAP, derive_key_seed(CAP, 2021));
    let public = ring.public();
    let enc = SetEncoder::new(
        Arc::new(ring),
        Arc::new(SimClock::new(1_619_696_843)),
        Arc::new(IdGen::seeded(7)),
    );
    (enc, public)
}

fn random_word(rng: &mut ChaCha20Rng, alphabet: &[u8], len: std::ops::Range<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

fn codec_round_trips(seed: u64) -> Outcome {
    const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const LABEL: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789.";
    let (enc, public) = codec_fixture();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut jtis = HashSet::new();
    for i in 0..CODEC_ROUND_TRIPS {
        let email = format!("{}@{}.example", random_word(&mut rng, LOWER, 1..10), random_word(&mut rng, LOWER, 1..8));
        let mut subject = SubjectId::user(email).unwrap();
        if rng.gen_bool(0.5) {
            subject = subject.with_device(format!("dev-{}", random_word(&mut rng, LABEL, 1..12))).unwrap();
        }
        let ctx_type = ContextType::new(format!("{CAP}/ctxtype/{}", random_word(&mut rng, LOWER, 1..12))).unwrap();
        let mut values = ContextValueSet::new();
        for _ in 0..rng.gen_range(1..6) {
            let key = format!("{}:{}", UNIVERSE[rng.gen_range(0..4)], random_word(&mut rng, LABEL, 1..12));
            let value = match rng.gen_range(0..3) {
                0 => Value::from(rng.gen_bool(0.5)),
                1 => Value::from(rng.gen_range(-1000i64..1000)),
                _ => Value::from(random_word(&mut rng, LABEL, 0..10)),
            };
            values.insert(key, value).unwrap();
        }
        let (sent, token) = enc.encode_event(CAP, RP1, &subject, &ctx_type, &values).unwrap();
        jtis.insert(sent.jti.clone());
        let ok = match decode_and_verify(&token, RP1, &public) {
            Ok(got) => {
                let event = got.events.get(&ctx_type);
                got.iss == CAP
                    && got.aud == RP1
                    && got.events.len() == 1
                    && event.is_some_and(|e| e.subject == subject && e.values == values)
            }
            Err(_) => false,
        };
        let rejects_other_audience = decode_and_verify(&token, RP2, &public).is_err();
        let rejects_without_key = decode_and_verify(&token, RP1, &KeyRing::new()).is_err();
        if !(ok && rejects_other_audience && rejects_without_key) {
            failures.push(i);
        }
    }
    outcome(
        "codec round trip on random tokens",
        failures.is_empty() && jtis.len() == CODEC_ROUND_TRIPS,
        format!(
            "{CODEC_ROUND_TRIPS} tokens, {} failures, {} distinct jti",
            failures.len(),
            jtis.len()
        ),
    )
}

fn codec_mutations() -> Outcome {
    let (enc, public) = codec_fixture();
    let subject = SubjectId::user("alice@example.com").unwrap().with_device("alice-no-Laptop").unwrap();
    let ctx_type = ContextType::new("https://cap1.example/ctxtype/device-location").unwrap();
    let values = ContextValueSet::new().with("used:ip:192.0.2.1", true).unwrap();
    let (_, token) = enc.encode_event(CAP, RP1, &subject, &ctx_type, &values).unwrap();
    let baseline = decode_and_verify(&token, RP1, &public).is_ok();
    let mut tried = 0usize;
    let mut accepted = 0usize;
    let bytes = token.as_bytes();
    for i in 0..bytes.len() {
        for b in 0x21u8..0x7f {
            if b == bytes[i] {
                continue;
            }
            let mut mutated = bytes.to_vec();
            mutated[i] = b;
            tried += 1;
            if decode_and_verify(std::str::from_utf8(&mutated).unwrap(), RP1, &public).is_ok() {
                accepted += 1;
            }
        }
    }
    outcome(
        "codec rejects every single-byte mutation",
        baseline && tried > 0 && accepted == 0,
        format!("{} byte token, {tried} mutations, {accepted} verified", bytes.len()),
    )
}

// --- driver ---------------------------------------------------------------------

async fn suite() -> Vec<Outcome> {
    let mut runs = Vec::new();
    for name in SCENARIOS {
        runs.push(run_scenario(name).await);
    }
    let by_name: BTreeMap<&str, &ScenarioRun> = runs.iter().map(|r| (r.report.scenario.as_str(), r)).collect();
    let mut out = Vec::new();

    let dh = by_name[DEVICE_HEALTH];
    out.push(outcome(
        "device-health scenario",
        dh.report.passed() && dh.elapsed < DEVICE_HEALTH_BUDGET,
        format!(
            "{}, {:.2} s < {} s",
            failed_checks(&dh.report),
            dh.elapsed.as_secs_f64(),
            DEVICE_HEALTH_BUDGET.as_secs()
        ),
    ));
    for (name, label) in [
        (CROSS_RP_SHARING, "cross-rp-sharing scenario"),
        (IDP_SWITCH, "idp-switch scenario"),
        (COMPROMISED_IDP, "compromised-idp scenario"),
    ] {
        let r = by_name[name];
        out.push(outcome(label, r.report.passed(), failed_checks(&r.report)));
    }

    let uma = tokio::task::spawn_blocking(|| uma_conformance(2021)).await.unwrap();
    out.push(uma);

    let checked: usize = runs.iter().map(|r| r.confinement.0).sum();
    let violations: Vec<&String> = runs.iter().flat_map(|r| &r.confinement.1).collect();
    out.push(outcome(
        "scope confinement over every delivered SET",
        checked > 0 && violations.is_empty(),
        format!("{checked} entries audited, {} outside grants {:?}", violations.len(), violations.first()),
    ));

    let (trips, mutations) = tokio::task::spawn_blocking(|| (codec_round_trips(2021), codec_mutations()))
        .await
        .unwrap();
    out.push(trips);
    out.push(mutations);

    let authz = TopologySpec::default_topology().authz.map(|a| a.uri).unwrap_or_default();
    out.push(grant_flow(&runs, &authz));
    out
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let results = rt.block_on(suite());
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
