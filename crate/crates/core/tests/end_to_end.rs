use std::path::{Path, PathBuf};
use std::time::Instant;

use confcard_core::crypto::Keypair;
use confcard_core::dataset::Dataset;
use confcard_core::digest::Digest;
use confcard_core::evidence::Store;
use confcard_core::ledger::{sign_payload, Ledger, PropertySpec, RegistrationPayload, SeedLockPayload};
use confcard_core::oracle::{ExecutionEnv, OracleRegistry};
use confcard_core::protocol::{
    emit_cards, execution_env, status, verify_card_at, Audit, ReplayContext,
};
use confcard_core::schedule::{derive_seed, schedule_prefix};
use confcard_core::statistics::PropertyState;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

struct Setup {
    dir: tempfile::TempDir,
    dataset: Dataset,
    oracles: OracleRegistry,
    env: ExecutionEnv,
    arbiters: Vec<Keypair>,
    audit_id: Digest,
}

impl Setup {
    fn ledger(&self) -> Ledger {
        Ledger::open(self.dir.path().join("ledger.jsonl")).unwrap()
    }

    fn store(&self) -> Store {
        Store::open(self.dir.path().join("store")).unwrap()
    }
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let dataset = Dataset::load(fixtures().join("dataset.json")).unwrap();
    let oracles = OracleRegistry::builtin();
    let sponsor = Keypair::from_seed([1; 32]);
    let arbiters: Vec<Keypair> = (2..5).map(|b| Keypair::from_seed([b; 32])).collect();
    let spec = |id: &str, eps| PropertySpec::new(id, eps, 0.05, oracles.find_property(id).unwrap().oracle_digest);
    let payload = RegistrationPayload {
        root_hash: dataset.root_hash(),
        urls: vec![],
        population_size: dataset.len(),
        properties: vec![spec("buildability", 0.05), spec("license_resolves", 0.01)],
        license_allowlist: vec!["MIT".into(), "Apache-2.0".into(), "BSD-3-Clause".into(), "ISC".into(), "BSD-2-Clause".into()],
        arbiters: arbiters.iter().map(|k| k.public()).collect(),
        quorum: 2,
        sponsor: sponsor.public(),
        sequence: 0,
    };
    let env = execution_env(&payload, Some(fixtures()));
    let mut ledger = Ledger::open(dir.path().join("ledger.jsonl")).unwrap();
    let sigs = sign_payload(&payload, &[&sponsor]).unwrap();
    let audit_id = ledger.register_audit(payload, sigs).unwrap().audit_id;
    let beacon = Digest::of(b"end to end");
    let lock = SeedLockPayload { audit_id, beacon, seed: derive_seed(audit_id.as_bytes(), beacon.as_bytes()).unwrap() };
    let sigs = sign_payload(&lock, &[&sponsor]).unwrap();
    ledger.lock_seed(&audit_id, &beacon, sigs).unwrap();
    Setup { dir, dataset, oracles, env, arbiters, audit_id }
}

/// Two validators with their own ledger handles race for the same positions;
/// the ledger lets exactly one publish win and the other retries further on.
#[test]
fn racing_validators_then_arbiters_certify() {
    let s = setup();
    let store = s.store();
    let published = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..2u8)
            .map(|v| {
                let s = &s;
                scope.spawn(move || {
                    let validator = Keypair::from_seed([20 + v; 32]);
                    let store = s.store();
                    let mut ledger = s.ledger();
                    let mut lost = 0;
                    let mut won = 0;
                    while won < 3 {
                        ledger.refresh().unwrap();
                        let mut audit = Audit::open(&ledger, &s.audit_id).unwrap();
                        let claims = audit.claim_batch(&validator.public(), 20, Instant::now()).unwrap();
                        let pack = audit
                            .collect_evidence(&claims, &s.dataset, &s.oracles, &s.env, validator.public(), 1)
                            .unwrap();
                        match audit.publish(&mut ledger, &store, &pack, &claims, &validator) {
                            Ok(_) => won += 1,
                            Err(e) if e.category() == "already-claimed" => lost += 1,
                            Err(e) => panic!("{e}"),
                        }
                    }
                    lost
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    assert!(published.iter().all(|&lost| lost < 20));

    let mut ledger = s.ledger();
    let record = ledger.audit(&s.audit_id).unwrap();
    assert_eq!(record.evidence_refs.len(), 6);
    assert_eq!(record.claim_frontier(), 120);

    let ctx = ReplayContext { store: &store, dataset: &s.dataset, oracles: &s.oracles, env: &s.env };
    let signers: Vec<&Keypair> = s.arbiters.iter().skip(1).collect();
    let mut audit = Audit::open(&ledger, &s.audit_id).unwrap();
    let outcomes = audit.attest_pending(&mut ledger, &ctx, &signers).unwrap();
    let ts: Vec<u64> = outcomes.into_iter().map(|o| o.unwrap().t).collect();
    assert_eq!(ts, vec![20, 40, 60, 80, 100, 120]);

    // The attested packs cover exactly the first 120 scheduled indices.
    let record = ledger.audit(&s.audit_id).unwrap();
    let seed = record.seed.as_ref().unwrap().seed;
    let mut covered: Vec<u64> = record
        .evidence_refs
        .iter()
        .flat_map(|(_, r)| store.get_pack(&r.pack).unwrap().indices)
        .collect();
    let mut expected = schedule_prefix(&seed, 200, 120).unwrap();
    covered.sort_unstable();
    expected.sort_unstable();
    assert_eq!(covered, expected);

    let rows = status(ledger.audit(&s.audit_id).unwrap());
    assert!(rows.iter().all(|r| r.t == 120 && r.state != PropertyState::Dirty));
    let cards = emit_cards(&mut ledger, &store, &s.audit_id, &signers).unwrap();
    for c in &cards {
        let report = verify_card_at(&c.address, &ledger, &ctx);
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn reopened_ledger_resumes_where_it_stopped() {
    let s = setup();
    let store = s.store();
    let validator = Keypair::from_seed([30; 32]);
    let signers: Vec<&Keypair> = s.arbiters.iter().take(2).collect();
    let ctx = ReplayContext { store: &store, dataset: &s.dataset, oracles: &s.oracles, env: &s.env };
    for round in 1..=3u64 {
        let mut ledger = s.ledger();
        let mut audit = Audit::open(&ledger, &s.audit_id).unwrap();
        assert_eq!(audit.t(), (round - 1) * 30);
        let claims = audit.claim_batch(&validator.public(), 30, Instant::now()).unwrap();
        let pack = audit.collect_evidence(&claims, &s.dataset, &s.oracles, &s.env, validator.public(), 2).unwrap();
        audit.publish(&mut ledger, &store, &pack, &claims, &validator).unwrap();
        let out = audit.submit_round(&mut ledger, &ctx, &pack, &signers).unwrap();
        assert_eq!(out.t, round * 30);
    }
    let ledger = s.ledger();
    let report = confcard_core::ledger::verify_chain(ledger.path()).unwrap();
    assert!(report.valid);
    assert_eq!(report.verified_entries, ledger.len());
}
