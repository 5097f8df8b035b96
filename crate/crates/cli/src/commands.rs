use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use confcard_core::canonical;
use confcard_core::crypto::Keypair;
use confcard_core::dataset::Dataset;
use confcard_core::digest::Digest;
use confcard_core::evidence::ContentAddress;
use confcard_core::ledger::{self, sign_payload, PropertySpec, RegistrationPayload, SeedLockPayload};
use confcard_core::oracle::{builtin_oracles, OracleBundle};
use confcard_core::protocol::{self, Audit, ConfidenceCard, ProtocolError, ReplayContext};
use confcard_core::schedule::derive_seed;
use confcard_core::simulate::{self, SimulationConfig};
use confcard_core::statistics::PropertyState;

use crate::error::CliError;
use crate::home::{self, Home};
use crate::DataArgs;

pub fn keygen(home: &Home, arbiters: usize, seed: Option<&str>) -> Result<(), CliError> {
    let root = seed
        .map(|s| Digest::from_hex(s).map_err(|e| CliError::new("usage", format!("--seed: {e}"))))
        .transpose()?;
    let mut names = vec![home::SPONSOR.to_string(), home::VALIDATOR.to_string()];
    names.extend((1..=arbiters).map(|i| format!("{}{i}", home::ARBITER_PREFIX)));
    for name in names {
        let (key, created) = home.ensure_key(&name, root.as_ref().map(|d| d.as_bytes().as_slice()))?;
        println!("{name:<12} {} {}", key.public(), if created { "created" } else { "exists" });
    }
    Ok(())
}

pub struct RegisterArgs {
    pub manifest: PathBuf,
    pub properties: Vec<String>,
    pub epsilon: f64,
    pub delta: f64,
    pub urls: Vec<String>,
    pub allow_licenses: Vec<String>,
    pub quorum: Option<u32>,
    pub bundles: Vec<PathBuf>,
}

fn parse_property(arg: &str, epsilon: f64, delta: f64) -> Result<(String, f64, f64), CliError> {
    let mut parts = arg.split(':');
    let id = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| CliError::new("usage", "empty property id"))?;
    let num = |s: Option<&str>, default: f64, what: &str| -> Result<f64, CliError> {
        match s {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::new("usage", format!("--property {arg}: bad {what} {v:?}"))),
        }
    };
    let eps = num(parts.next(), epsilon, "epsilon")?;
    let del = num(parts.next(), delta, "delta")?;
    if parts.next().is_some() {
        return Err(CliError::new("usage", format!("--property {arg}: expected ID[:EPSILON[:DELTA]]")));
    }
    Ok((id.to_string(), eps, del))
}

pub fn register(home: &Home, args: RegisterArgs) -> Result<(), CliError> {
    let dataset = Dataset::load(&args.manifest)?;
    let bundles: Vec<(PathBuf, OracleBundle)> = args
        .bundles
        .iter()
        .map(|d| Ok((d.clone(), OracleBundle::load_dir(d)?)))
        .collect::<Result<_, CliError>>()?;
    let builtin = builtin_oracles();
    let mut properties = Vec::new();
    for arg in &args.properties {
        let (id, eps, delta) = parse_property(arg, args.epsilon, args.delta)?;
        let digest = match bundles.iter().find(|(_, b)| b.manifest.property_id == id) {
            Some((_, b)) => b.digest(),
            None => builtin
                .iter()
                .find(|d| d.property_id == id)
                .map(|d| d.oracle_digest)
                .ok_or_else(|| CliError::new("unknown-property", format!("no oracle for property {id:?}")))?,
        };
        let spec = PropertySpec::new(id, eps, delta, digest);
        spec.coverage()?;
        properties.push(spec);
    }
    let sponsor = home.load_key(home::SPONSOR)?;
    let arbiters: Vec<_> = home.arbiter_keys()?.into_iter().map(|(_, k)| k.public()).collect();
    if arbiters.is_empty() {
        return Err(CliError::new("missing-key", "no arbiter keys; run keygen"));
    }
    let quorum = args.quorum.unwrap_or(arbiters.len() as u32 / 2 + 1);
    let mut allow = args.allow_licenses.clone();
    allow.sort();
    allow.dedup();
    let mut ledger = home.open_ledger()?;
    let payload = RegistrationPayload {
        root_hash: dataset.root_hash(),
        urls: args.urls,
        population_size: dataset.len(),
        properties,
        license_allowlist: allow,
        arbiters,
        quorum,
        sponsor: sponsor.public(),
        sequence: ledger.len(),
    };
    let sigs = sign_payload(&payload, &[&sponsor])?;
    let registration = ledger.register_audit(payload, sigs)?;
    let store = home.open_store()?;
    store.put_bytes(&dataset.canonical_bytes())?;
    home.remember_fixtures(&dataset.root_hash(), &args.manifest)?;
    for (dir, _) in &bundles {
        home.pin_bundle(dir)?;
    }
    println!("audit_id   {}", registration.audit_id);
    println!("root_hash  {}", registration.payload.root_hash);
    println!("items      {}", registration.payload.population_size);
    for p in &registration.payload.properties {
        println!(
            "property   {} epsilon={} delta={} oracle={}",
            p.property_id,
            canonical::format_decimal(p.epsilon),
            canonical::format_decimal(p.delta),
            p.oracle_digest
        );
    }
    Ok(())
}

pub fn lock_seed(home: &Home, audit_id: Option<&str>, beacon: &str) -> Result<(), CliError> {
    let beacon = home::parse_beacon(beacon)?;
    let mut ledger = home.open_ledger()?;
    let id = home::select_audit(&ledger, audit_id)?.audit_id();
    let sponsor = home.load_key(home::SPONSOR)?;
    let payload = SeedLockPayload {
        audit_id: id,
        beacon,
        seed: derive_seed(id.as_bytes(), beacon.as_bytes()).expect("32-byte inputs"),
    };
    let sigs = sign_payload(&payload, &[&sponsor])?;
    let lock = ledger.lock_seed(&id, &beacon, sigs)?;
    println!("audit_id  {id}");
    println!("seed      {}", lock.seed);
    Ok(())
}

struct Loaded {
    ledger: ledger::Ledger,
    store: confcard_core::evidence::Store,
    dataset: Dataset,
    oracles: confcard_core::oracle::OracleRegistry,
    env: confcard_core::oracle::ExecutionEnv,
    audit_id: Digest,
}

fn load(home: &Home, audit_id: Option<&str>, data: &DataArgs) -> Result<Loaded, CliError> {
    let ledger = home.open_ledger()?;
    let store = home.open_store()?;
    let record = home::select_audit(&ledger, audit_id)?;
    let reg = &record.registration.payload;
    let dataset = home::load_dataset(data.manifest.as_deref(), &store, &reg.root_hash)?;
    let fixtures = home.fixtures_root(data.fixtures.as_deref(), data.manifest.as_deref(), &reg.root_hash);
    let mut env = protocol::execution_env(reg, fixtures);
    env.allow_network = data.allow_network;
    let audit_id = record.audit_id();
    Ok(Loaded { oracles: home.oracles()?, ledger, store, dataset, env, audit_id })
}

pub fn validate(
    home: &Home,
    audit_id: Option<&str>,
    batch: u64,
    rounds: u64,
    workers: usize,
    key: &str,
    data: &DataArgs,
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::new("usage", "--batch must be at least 1"));
    }
    let validator = home.load_key(key)?;
    let mut l = load(home, audit_id, data)?;
    let mut audit = Audit::open(&l.ledger, &l.audit_id)?;
    for round in 0..rounds {
        let claims = match audit.claim_batch(&validator.public(), batch, Instant::now()) {
            Ok(c) => c,
            Err(ProtocolError::ScheduleExhausted | ProtocolError::AuditTerminal) if round > 0 => break,
            Err(e) => return Err(e.into()),
        };
        let pack = audit.collect_evidence(&claims, &l.dataset, &l.oracles, &l.env, validator.public(), workers)?;
        let address = audit.publish(&mut l.ledger, &l.store, &pack, &claims, &validator)?;
        let (start, end) = (claims[0].position, claims[0].position + claims.len() as u64);
        let violations: Vec<String> =
            pack.bits.keys().map(|pid| format!("{pid}={}", pack.violations(pid))).collect();
        println!("published positions {start}..{end} {} {}", address.uri(), violations.join(" "));
    }
    Ok(())
}

pub fn attest(home: &Home, audit_id: Option<&str>, data: &DataArgs) -> Result<(), CliError> {
    let mut l = load(home, audit_id, data)?;
    let keys = home.audit_arbiters(l.ledger.audit(&l.audit_id)?)?;
    let arbiters: Vec<&Keypair> = keys.iter().collect();
    let ctx = ReplayContext { store: &l.store, dataset: &l.dataset, oracles: &l.oracles, env: &l.env };
    let open: Vec<u64> = l.ledger.audit(&l.audit_id)?.open_challenges().iter().map(|(p, _)| *p).collect();
    for position in open {
        let ruling = protocol::adjudicate_challenge(&mut l.ledger, &ctx, position, &arbiters)?;
        println!(
            "challenge {position}: {:?}{}",
            ruling.outcome,
            ruling.report.map(|r| format!(" report {}", r.uri())).unwrap_or_default()
        );
    }
    let mut audit = Audit::open(&l.ledger, &l.audit_id)?;
    let mut first_error = None;
    for outcome in audit.attest_pending(&mut l.ledger, &ctx, &arbiters)? {
        match outcome {
            Ok(o) => println!(
                "attested t={} state={}{} at ledger position {}",
                o.t,
                o.state.as_str(),
                if o.exhausted { " (schedule exhausted)" } else { "" },
                o.attestation
            ),
            Err(e) => {
                if let ProtocolError::ReplayDisagreement { discrepancies, .. } = &e {
                    for d in discrepancies {
                        println!("  {} index {}: claimed {} replayed {}", d.property_id, d.index, d.claimed, d.recomputed);
                    }
                }
                println!("rejected: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn status(home: &Home, audit_id: Option<&str>, json: bool) -> Result<(), CliError> {
    let ledger = home.open_ledger()?;
    let record = home::select_audit(&ledger, audit_id)?;
    let rows = protocol::status(record);
    let decision = record.last_attestation().map(|(_, a)| {
        if a.exhausted { "EXHAUSTED-PENDING".to_string() } else { a.decision.as_str().to_string() }
    });
    if json {
        let rows: Vec<_> = rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "property_id": r.property_id,
                    "epsilon": r.epsilon,
                    "delta": r.delta,
                    "t": r.t,
                    "violations": r.violations,
                    "p_hat": r.p_hat,
                    "lower": r.interval.lower,
                    "upper": r.interval.upper,
                    "state": r.state.as_str(),
                    "cleanliness": r.cleanliness,
                    "t2epsilon": r.t2epsilon,
                })
            })
            .collect();
        let out = serde_json::json!({
            "audit_id": record.audit_id().to_hex(),
            "seed_locked": record.seed.is_some(),
            "decision": decision.unwrap_or_else(|| "PENDING".into()),
            "properties": rows,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("audit {}  decision {}", record.audit_id(), decision.as_deref().unwrap_or("PENDING"));
    println!(
        "{:<20} {:>7} {:>6} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10} {:>6}",
        "property", "epsilon", "t", "S_t", "p_hat", "L_t", "U_t", "state", "1-U_t", "T2eps"
    );
    for r in rows {
        println!(
            "{:<20} {:>7} {:>6} {:>6} {:>10} {:>10.6} {:>10.6} {:>8} {:>10.6} {:>6}",
            r.property_id,
            r.epsilon,
            r.t,
            r.violations,
            opt(r.p_hat.map(|p| format!("{p:.6}"))),
            r.interval.lower,
            r.interval.upper,
            r.state.as_str(),
            r.cleanliness,
            opt(r.t2epsilon)
        );
    }
    Ok(())
}

pub fn emit_cards(home: &Home, audit_id: Option<&str>, out: Option<&Path>) -> Result<(), CliError> {
    let mut ledger = home.open_ledger()?;
    let store = home.open_store()?;
    let record = home::select_audit(&ledger, audit_id)?;
    let id = record.audit_id();
    let keys = home.audit_arbiters(record)?;
    let arbiters: Vec<&Keypair> = keys.iter().collect();
    let cards = protocol::emit_cards(&mut ledger, &store, &id, &arbiters)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    for c in cards {
        println!(
            "{:<20} {} t={} state={}{}",
            c.card.property.property_id,
            c.address.uri(),
            c.card.evidence.t,
            c.card.decision.state.as_str(),
            c.card.decision.t2epsilon.map(|t| format!(" T2eps={t}")).unwrap_or_default()
        );
        if let Some(dir) = out {
            fs::write(dir.join(format!("{}.card.json", c.card.property.property_id)), c.card.canonical_bytes())?;
        }
    }
    Ok(())
}

pub fn verify_card(home: &Home, card: &str, json: bool, data: &DataArgs) -> Result<(), CliError> {
    let ledger = home.open_ledger()?;
    let store = home.open_store()?;
    let (bytes, address) = if card.starts_with("store:") {
        let address = ContentAddress::parse(card)?;
        let bytes = fs::read(store.path_for(&address.digest))
            .map_err(|e| CliError::new("not-found", format!("{card}: {e}")))?;
        (bytes, address)
    } else {
        let bytes = fs::read(card)?;
        let address = ContentAddress::of_bytes(&bytes);
        (bytes, address)
    };
    let parsed: Option<ConfidenceCard> = canonical::from_slice(&bytes).ok();
    let audit = parsed
        .as_ref()
        .and_then(|c| ledger.entry(c.attestation_ref))
        .and_then(|e| e.payload_as::<ledger::AttestationPayload>().ok())
        .map(|a| a.audit_id.to_hex());
    let (dataset, env, oracles) = match audit {
        Some(id) => {
            let l = load(home, Some(&id), data)?;
            (l.dataset, l.env, l.oracles)
        }
        None => (Dataset::from_items(Vec::new())?, Default::default(), home.oracles()?),
    };
    let ctx = ReplayContext { store: &store, dataset: &dataset, oracles: &oracles, env: &env };
    let report = protocol::verify_card(&bytes, &address, &ledger, &ctx);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("card {}", address.uri());
        for (label, c) in ["a", "b", "c", "d", "e"].iter().zip(&report.checks) {
            println!("({label}) {:<4} {:<16} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        println!("verdict {}", if report.passed() { "PASS" } else { "FAIL" });
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(CliError::new("verification-failed", format!("failed checks: {}", failed.join(", "))))
    }
}

pub fn challenge(home: &Home, audit_id: Option<&str>, t: u64, evidence: &str, key: &str) -> Result<(), CliError> {
    let evidence = ContentAddress::parse(evidence)?;
    let challenger = home.load_key(key)?;
    let mut ledger = home.open_ledger()?;
    let id = home::select_audit(&ledger, audit_id)?.audit_id();
    let position = protocol::file_challenge(&mut ledger, &id, t, evidence, &challenger)?;
    println!("challenge filed at ledger position {position}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    p_true: f64,
    epsilon: f64,
    delta: f64,
    runs: u64,
    max_t: u64,
    seed: &str,
    csv_path: Option<&Path>,
    trace_runs: u64,
    json: bool,
) -> Result<(), CliError> {
    let seed = Digest::from_hex(seed).map_err(|e| CliError::new("usage", format!("--seed: {e}")))?;
    let config = SimulationConfig { p_true, epsilon, delta, runs, max_t, seed };
    let trace = if csv_path.is_some() { trace_runs } else { 0 };
    let (summary, points) = simulate::simulate(&config, trace)?;
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["run", "t", "violations", "lower", "upper", "cleanliness"])?;
        for p in &points {
            w.write_record([
                p.run.to_string(),
                p.t.to_string(),
                p.violations.to_string(),
                format!("{:.12}", p.lower),
                format!("{:.12}", p.upper),
                format!("{:.12}", 1.0 - p.upper),
            ])?;
        }
        w.flush()?;
    }
    if json {
        let mut value = serde_json::to_value(&summary)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("outcomes");
        }
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    let f = |x: Option<f64>| opt(x.map(|v| format!("{v:.0}")));
    let share = |n: u64, state| format!("{n} ({:.3})", summary.fraction(state));
    let rows = [
        ("runs", runs.to_string()),
        ("CLEAN", share(summary.clean, PropertyState::Clean)),
        ("DIRTY", share(summary.dirty, PropertyState::Dirty)),
        ("PENDING", share(summary.pending, PropertyState::Pending)),
        ("coverage misses", format!("{} ({:.4})", summary.coverage_failures, summary.coverage_failure_rate)),
        ("T2eps q10", f(summary.t2epsilon_q10)),
        ("T2eps median", f(summary.t2epsilon_median)),
        ("T2eps q90", f(summary.t2epsilon_q90)),
    ];
    println!("p_true={p_true} epsilon={epsilon} delta={delta} max_t={max_t} seed={seed}");
    for (k, v) in rows {
        println!("{k:<16} {v}");
    }
    Ok(())
}

pub fn verify_ledger(home: &Home) -> Result<(), CliError> {
    let report = ledger::verify_chain(&home.ledger)?;
    println!("entries {}", report.verified_entries);
    println!("head    {}", report.head);
    match report.first_broken {
        None => Ok(()),
        Some(k) => Err(CliError::new(
            "corrupt-ledger",
            format!("chain breaks at entry {k}: {}", report.reason.unwrap_or_default()),
        )),
    }
}
