use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::*;

macro_rules! ctx {
    ($w:expr) => {
        ReplayContext { store: &$w.store, dataset: &$w.dataset, oracles: &$w.oracles, env: &$w.env }
    };
}
use crate::dataset::DatasetItem;
use crate::ledger::{ChallengeOutcome, PropertySpec};

struct World {
    _dir: tempfile::TempDir,
    ledger: Ledger,
    store: Store,
    dataset: Dataset,
    oracles: OracleRegistry,
    env: ExecutionEnv,
    arbiters: Vec<Keypair>,
    validator: Keypair,
    audit_id: Digest,
}

impl World {
    fn audit(&self) -> Audit {
        Audit::open(&self.ledger, &self.audit_id).unwrap()
    }

    /// Claim, collect and publish one batch; returns the pack.
    fn validate(&mut self, audit: &mut Audit, k: u64) -> EvidencePack {
        let claims = audit.claim_batch(&self.validator.public(), k, Instant::now()).unwrap();
        let pack = audit
            .collect_evidence(&claims, &self.dataset, &self.oracles, &self.env, self.validator.public(), 2)
            .unwrap();
        audit.publish(&mut self.ledger, &self.store, &pack, &claims, &self.validator).unwrap();
        pack
    }

    fn round(&mut self, audit: &mut Audit, k: u64) -> Result<RoundOutcome, ProtocolError> {
        let pack = self.validate(audit, k);
        let ctx = ReplayContext { store: &self.store, dataset: &self.dataset, oracles: &self.oracles, env: &self.env };
        let arbiters: Vec<&Keypair> = self.arbiters.iter().take(2).collect();
        audit.submit_round(&mut self.ledger, &ctx, &pack, &arbiters)
    }
}

/// `n` items; `bad_license` items carry a license outside the allowlist and
/// `bad_deps` items pin a dependency with a known advisory.
fn world(n: u64, bad_license: &[u64], bad_deps: &[u64], eps: (f64, f64)) -> World {
    let items = (0..n)
        .map(|i| {
            let mut m = BTreeMap::new();
            let license = if bad_license.contains(&i) { "GPL-3.0-only" } else { "MIT" };
            m.insert("license".to_string(), license.to_string());
            let deps = if bad_deps.contains(&i) {
                r#"[{"ecosystem":"npm","package":"left-pad","version":"1.2.0"}]"#
            } else {
                "[]"
            };
            m.insert("dependencies".to_string(), deps.to_string());
            DatasetItem::new(i, format!("item-{i}"), m)
        })
        .collect();
    let dataset = Dataset::from_items(items).unwrap();
    let oracles = OracleRegistry::builtin();
    let lic = oracles.find_property("license_resolves").unwrap();
    let dep = oracles.find_property("dependency_health").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut ledger = Ledger::open(dir.path().join("ledger.jsonl")).unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let sponsor = Keypair::from_seed([1; 32]);
    let arbiters: Vec<Keypair> = (2..5).map(|b| Keypair::from_seed([b; 32])).collect();
    let payload = RegistrationPayload {
        root_hash: dataset.root_hash(),
        urls: vec![],
        population_size: n,
        properties: vec![
            PropertySpec::new("license_resolves", eps.0, 0.05, lic.oracle_digest),
            PropertySpec::new("dependency_health", eps.1, 0.05, dep.oracle_digest),
        ],
        license_allowlist: vec!["MIT".into()],
        arbiters: arbiters.iter().map(|k| k.public()).collect(),
        quorum: 2,
        sponsor: sponsor.public(),
        sequence: 0,
    };
    let env = execution_env(&payload, None);
    let sigs = sign_payload(&payload, &[&sponsor]).unwrap();
    let audit_id = ledger.register_audit(payload, sigs).unwrap().audit_id;
    let beacon = Digest::of(b"test beacon");
    let lock = crate::ledger::SeedLockPayload {
        audit_id,
        beacon,
        seed: crate::schedule::derive_seed(audit_id.as_bytes(), beacon.as_bytes()).unwrap(),
    };
    let sigs = sign_payload(&lock, &[&sponsor]).unwrap();
    ledger.lock_seed(&audit_id, &beacon, sigs).unwrap();
    World { _dir: dir, ledger, store, dataset, oracles, env, arbiters, validator: Keypair::from_seed([9; 32]), audit_id }
}

#[test]
fn status_before_any_round_is_vacuous() {
    let w = world(20, &[], &[], (0.2, 0.2));
    let rows = status(w.ledger.audit(&w.audit_id).unwrap());
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.t, 0);
        assert_eq!(r.interval, ConfidenceInterval::VACUOUS);
        assert_eq!(r.state, PropertyState::Pending);
        assert_eq!(r.t2epsilon, None);
    }
}

#[test]
fn concurrent_claims_are_distinct_and_consecutive() {
    let w = world(100, &[], &[], (0.2, 0.2));
    let audit = Mutex::new(w.audit());
    let a = Keypair::from_seed([7; 32]).public();
    let b = Keypair::from_seed([8; 32]).public();
    let claims = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for who in [a, b] {
            let (audit, claims) = (&audit, &claims);
            s.spawn(move || {
                for _ in 0..20 {
                    let c = audit.lock().unwrap().claim_next_index(&who, Instant::now()).unwrap();
                    claims.lock().unwrap().push(c);
                }
            });
        }
    });
    let mut claims = claims.into_inner().unwrap();
    claims.sort_by_key(|c| c.position);
    let positions: Vec<u64> = claims.iter().map(|c| c.position).collect();
    assert_eq!(positions, (0..40).collect::<Vec<_>>());
    let mut indices: Vec<u64> = claims.iter().map(|c| c.index).collect();
    indices.sort_unstable();
    indices.dedup();
    assert_eq!(indices.len(), 40);
    let expected = crate::schedule::schedule_prefix(&w.audit().seed(), 100, 40).unwrap();
    assert_eq!(claims.iter().map(|c| c.index).collect::<Vec<_>>(), expected);
}

#[test]
fn claims_reject_reclaims_and_expire() {
    let w = world(5, &[], &[], (0.2, 0.2));
    let mut audit = w.audit().with_lease(Duration::from_secs(60));
    let v = w.validator.public();
    let now = Instant::now();
    let c = audit.claim_next_index(&v, now).unwrap();
    assert_eq!(audit.claim_position(c.position, &v, now).unwrap_err().category(), "already-claimed");
    let later = now + Duration::from_secs(61);
    assert_eq!(audit.claim_position(c.position, &v, later).unwrap().position, c.position);
    let rest = audit.claim_batch(&v, 10, later).unwrap();
    assert_eq!(rest.len(), 4);
    assert_eq!(audit.claim_next_index(&v, later).unwrap_err().category(), "schedule-exhausted");
}

#[test]
fn honest_rounds_tighten_intervals_and_share_t() {
    let mut w = world(200, &[], &[], (0.05, 0.05));
    let mut audit = w.audit();
    let mut widths = BTreeMap::new();
    for round in 1..=4u64 {
        let out = w.round(&mut audit, 10).unwrap();
        assert_eq!(out.t, round * 10);
        for pid in ["license_resolves", "dependency_health"] {
            assert_eq!(audit.counter(pid).unwrap().t(), round * 10);
            let width = audit.interval(pid).unwrap().width();
            if let Some(prev) = widths.insert(pid, width) {
                assert!(width < prev, "{pid}: {width} !< {prev}");
            }
        }
    }
    let reopened = w.audit();
    assert_eq!(reopened.t(), 40);
    assert_eq!(reopened.interval("license_resolves"), audit.interval("license_resolves"));
}

#[test]
fn clean_is_terminal_and_records_t2epsilon() {
    let mut w = world(300, &[], &[], (0.2, 0.2));
    let mut audit = w.audit();
    let mut first_clean = None;
    while !audit.is_terminal() {
        let out = w.round(&mut audit, 5).unwrap();
        if out.state == PropertyState::Clean && first_clean.is_none() {
            first_clean = Some(out.t);
        }
    }
    let t = first_clean.expect("reaches CLEAN");
    assert_eq!(audit.state(), PropertyState::Clean);
    assert_eq!(audit.t2epsilon("license_resolves"), Some(t));
    // t2epsilon is the first batch boundary where U <= epsilon.
    let before = attested_interval(t - 5, 0, 0.05).unwrap();
    assert!(before.upper > 0.2);
    assert!(attested_interval(t, 0, 0.05).unwrap().upper <= 0.2);
    let v = w.validator.public();
    assert_eq!(audit.claim_next_index(&v, Instant::now()).unwrap_err().category(), "audit-terminal");
}

#[test]
fn exhaustion_while_pending_is_terminal() {
    let mut w = world(12, &[3], &[], (0.05, 0.05));
    let mut audit = w.audit();
    let out = w.round(&mut audit, 12).unwrap();
    assert_eq!(out.t, 12);
    assert!(out.exhausted);
    assert_eq!(out.state, PropertyState::Pending);
    assert!(w.audit().is_terminal());
    let keys = w.arbiters.clone();
    let arbiters: Vec<&Keypair> = keys.iter().take(2).collect();
    let cards = emit_cards(&mut w.ledger, &w.store, &w.audit_id, &arbiters).unwrap();
    assert!(cards.iter().all(|c| c.card.decision.state == PropertyState::Pending && c.card.decision.t2epsilon.is_none()));
}

#[test]
fn unscheduled_index_is_a_membership_violation() {
    let mut w = world(50, &[], &[], (0.2, 0.2));
    let mut audit = w.audit();
    w.round(&mut audit, 5).unwrap();
    let claims = audit.claim_batch(&w.validator.public(), 5, Instant::now()).unwrap();
    let mut pack = audit
        .collect_evidence(&claims, &w.dataset, &w.oracles, &w.env, w.validator.public(), 1)
        .unwrap();
    let scheduled: std::collections::BTreeSet<u64> =
        crate::schedule::schedule_prefix(&audit.seed(), 50, 10).unwrap().into_iter().collect();
    pack.indices[2] = (0..50).find(|i| !scheduled.contains(i)).unwrap();
    audit.publish(&mut w.ledger, &w.store, &pack, &claims, &w.validator).unwrap();
    let before = audit.clone();
    let keys = w.arbiters.clone();
    let arbiters: Vec<&Keypair> = keys.iter().take(2).collect();
    let ctx = ctx!(w);
    let err = audit.submit_round(&mut w.ledger, &ctx, &pack, &arbiters).unwrap_err();
    assert_eq!(err.category(), "membership-violation");
    assert_eq!(audit.t(), before.t());
    assert_eq!(audit.interval("license_resolves"), before.interval("license_resolves"));
}

#[test]
fn dishonest_pack_yields_contradiction_report() {
    let mut w = world(50, &[], &[], (0.2, 0.2));
    let mut audit = w.audit();
    let claims = audit.claim_batch(&w.validator.public(), 10, Instant::now()).unwrap();
    let mut pack = audit
        .collect_evidence(&claims, &w.dataset, &w.oracles, &w.env, w.validator.public(), 1)
        .unwrap();
    pack.bits.get_mut("dependency_health").unwrap()[3] = 1;
    let flipped_index = pack.indices[3];
    audit.publish(&mut w.ledger, &w.store, &pack, &claims, &w.validator).unwrap();
    let keys = w.arbiters.clone();
    let arbiters: Vec<&Keypair> = keys.iter().take(2).collect();
    let ctx = ctx!(w);
    let err = audit.submit_round(&mut w.ledger, &ctx, &pack, &arbiters).unwrap_err();
    let ProtocolError::ReplayDisagreement { report, discrepancies, .. } = &err else { panic!("{err}") };
    assert_eq!(
        discrepancies,
        &vec![Discrepancy { property_id: "dependency_health".into(), index: flipped_index, claimed: 1, recomputed: 0 }]
    );
    let stored: ContradictionReport = w.store.get_json(report).unwrap();
    assert_eq!(stored.discrepancies, *discrepancies);
    assert_eq!(stored.submitted, pack.address());
    assert!(w.store.contains(&stored.recomputed));
    let record = w.ledger.audit(&w.audit_id).unwrap();
    assert_eq!(record.challenges.len(), 1);
    assert!(record.resolutions.values().all(|(_, r)| r.outcome == ChallengeOutcome::Upheld));
    assert_eq!(audit.t(), 0);

    // The refused positions go back to the pool and an honest pack is accepted.
    let mut audit = w.audit();
    assert_eq!(audit.frontier(), 0);
    let out = w.round(&mut audit, 10).unwrap();
    assert_eq!(out.t, 10);
}

#[test]
fn cards_verify_and_tampering_is_caught() {
    let mut w = world(120, &[4, 77], &[], (0.2, 0.2));
    let mut audit = w.audit();
    for _ in 0..3 {
        w.round(&mut audit, 10).unwrap();
    }
    let keys = w.arbiters.clone();
    let arbiters: Vec<&Keypair> = keys.iter().take(2).collect();
    let cards = emit_cards(&mut w.ledger, &w.store, &w.audit_id, &arbiters).unwrap();
    assert_eq!(cards.len(), 2);
    let again = emit_cards(&mut w.ledger, &w.store, &w.audit_id, &arbiters).unwrap();
    assert_eq!(again, cards);
    let ctx = ctx!(w);
    for c in &cards {
        let report = verify_card_at(&c.address, &w.ledger, &ctx);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checks.len(), 5);
    }

    // Edited upper bound: content address moves; recomputation disagrees.
    let mut forged = cards[0].card.clone();
    forged.evidence.upper = canonical::quantize(forged.evidence.upper - 0.01);
    let bytes = forged.canonical_bytes();
    let report = verify_card(&bytes, &ContentAddress::of_bytes(&bytes), &w.ledger, &ctx);
    assert!(!report.check("interval").unwrap().passed);
    let report = verify_card(&bytes, &cards[0].address, &w.ledger, &ctx);
    assert!(!report.check("content-address").unwrap().passed);

    // Flip one bit of a stored pack on disk.
    let att = w.ledger.audit(&w.audit_id).unwrap().attestations[1].1.pack;
    let path = w.store.path_for(&att.digest);
    let mut raw = std::fs::read(&path).unwrap();
    let pos = raw.windows(3).position(|x| x == b"[0,").unwrap() + 1;
    raw[pos] = b'1';
    std::fs::write(&path, raw).unwrap();
    let report = verify_card_at(&cards[0].address, &w.ledger, &ctx);
    let replay = report.check("replay").unwrap();
    assert!(!replay.passed);
    assert!(replay.detail.contains("hash to"), "{}", replay.detail);
    assert!(report.check("interval").unwrap().passed);
}

#[test]
fn challenges_are_adjudicated_by_replay() {
    let mut w = world(60, &[], &[], (0.2, 0.2));
    let mut audit = w.audit();
    w.round(&mut audit, 10).unwrap();
    let challenger = Keypair::from_seed([11; 32]);
    let evidence = w.ledger.audit(&w.audit_id).unwrap().attestations[0].1.pack;
    let pos = file_challenge(&mut w.ledger, &w.audit_id, 10, evidence, &challenger).unwrap();
    let keys = w.arbiters.clone();
    let arbiters: Vec<&Keypair> = keys.iter().take(2).collect();
    let ruling = adjudicate_challenge(&mut w.ledger, &ctx!(w), pos, &arbiters).unwrap();
    assert_eq!(ruling.outcome, ChallengeOutcome::Rejected);
    assert_eq!(
        adjudicate_challenge(&mut w.ledger, &ctx!(w), pos, &arbiters).unwrap_err().category(),
        "already-resolved"
    );

    // Colluding arbiters sign an interval the evidence does not support.
    let pack = w.validate(&mut audit, 10);
    let record = w.ledger.audit(&w.audit_id).unwrap();
    let (prev, last) = record.last_attestation().unwrap().clone();
    let mut properties = last.properties.clone();
    for p in properties.values_mut() {
        p.upper = 0.01;
        p.state = PropertyState::Clean;
        p.t2epsilon = Some(20);
    }
    let forged = crate::ledger::AttestationPayload {
        audit_id: w.audit_id,
        round: 1,
        t: 20,
        properties,
        decision: PropertyState::Clean,
        exhausted: false,
        pack: pack.address(),
        prev_attestation: Some(prev),
    };
    let sigs = sign_payload(&forged, &arbiters).unwrap();
    w.ledger.append_attestation(forged, sigs).unwrap();
    let cards = emit_cards(&mut w.ledger, &w.store, &w.audit_id, &arbiters).unwrap();
    let report = verify_card_at(&cards[0].address, &w.ledger, &ctx!(w));
    assert!(!report.check("interval").unwrap().passed);
    assert!(report.check("replay").unwrap().passed);

    let pos = file_challenge(&mut w.ledger, &w.audit_id, 20, pack.address(), &challenger).unwrap();
    let ruling = adjudicate_challenge(&mut w.ledger, &ctx!(w), pos, &arbiters).unwrap();
    assert_eq!(ruling.outcome, ChallengeOutcome::Upheld);
    let report: ContradictionReport = w.store.get_json(&ruling.report.unwrap()).unwrap();
    assert!(report.discrepancies.is_empty());
    assert_eq!(report.interval_mismatches.len(), 2);
    let after = verify_card_at(&cards[0].address, &w.ledger, &ctx!(w));
    assert!(!after.check("attestation").unwrap().passed);
}

#[test]
fn attested_interval_rounds_outward() {
    for (t, s) in [(1, 0), (7, 3), (2500, 7), (100, 100)] {
        let exact = EvidenceCounter::from_counts(t, s).unwrap().interval(0.05).unwrap();
        let wire = attested_interval(t, s, 0.05).unwrap();
        assert!(wire.lower <= exact.lower && wire.upper >= exact.upper);
        assert!(exact.lower - wire.lower < 1e-11 && wire.upper - exact.upper < 1e-11);
        assert_eq!(wire.upper, canonical::quantize(wire.upper));
    }
}
