//! Confidence cards: emission and third-party verification.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ProtocolError, ReplayContext};
use crate::canonical::{self, decimal};
use crate::crypto::Keypair;
use crate::digest::Digest;
use crate::evidence::{self, ContentAddress};
use crate::ledger::{
    sign_payload, AuditRecord, CardRefPayload, EntryKind, Ledger, LedgerEntry, LedgerError, PropertySpec,
};
use crate::schedule::verify_segment;
use crate::statistics::{self, ConfidenceInterval, EvidenceCounter, PropertyState};

/// Allowed gap between a card's interval and a fresh recomputation.
pub const INTERVAL_TOLERANCE: f64 = 1e-9;

/// Names of the five verification checks, in report order.
pub const CHECK_NAMES: [&str; 5] = ["content-address", "attestation", "replay", "interval", "reading-rule"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardDataset {
    pub root_hash: Digest,
    pub seed: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardEvidence {
    pub t: u64,
    pub violations: u64,
    #[serde(with = "decimal")]
    pub p_hat: f64,
    #[serde(with = "decimal")]
    pub lower: f64,
    #[serde(with = "decimal")]
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardDecision {
    pub state: PropertyState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2epsilon: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCard {
    /// Ledger position of the attestation the card reports.
    pub attestation_ref: u64,
    pub dataset: CardDataset,
    pub property: PropertySpec,
    pub evidence: CardEvidence,
    pub decision: CardDecision,
}

impl ConfidenceCard {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("decimals are strings")
    }

    pub fn address(&self) -> ContentAddress {
        ContentAddress::of_bytes(&self.canonical_bytes())
    }

    pub fn interval(&self) -> ConfidenceInterval {
        ConfidenceInterval { lower: self.evidence.lower, upper: self.evidence.upper }
    }

    /// Certified lower bound on the clean fraction.
    pub fn cleanliness(&self) -> f64 {
        statistics::cleanliness_lower_bound(&self.interval())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedCard {
    pub card: ConfidenceCard,
    pub address: ContentAddress,
    /// Ledger position of the card reference.
    pub card_ref: u64,
}

/// One card per registered property from the latest attestation; each is
/// stored and referenced on the ledger. Re-emitting the same card reuses
/// the existing reference.
pub fn emit_cards(
    ledger: &mut Ledger,
    store: &crate::evidence::Store,
    audit_id: &Digest,
    arbiters: &[&Keypair],
) -> Result<Vec<EmittedCard>, ProtocolError> {
    let record = ledger.audit(audit_id)?;
    let (position, attestation) = record.last_attestation().cloned().ok_or(ProtocolError::NoAttestation)?;
    let seed = record.seed.ok_or(LedgerError::SeedNotLocked(*audit_id))?.seed;
    let registration = record.registration.payload.clone();
    let mut out = Vec::new();
    for spec in &registration.properties {
        let p = attestation
            .properties
            .get(&spec.property_id)
            .ok_or_else(|| LedgerError::Inconsistent(format!("attestation lacks {}", spec.property_id)))?;
        let card = ConfidenceCard {
            attestation_ref: position,
            dataset: CardDataset { root_hash: registration.root_hash, seed },
            property: spec.clone(),
            evidence: CardEvidence {
                t: attestation.t,
                violations: p.violations,
                p_hat: canonical::quantize(p.violations as f64 / attestation.t as f64),
                lower: p.lower,
                upper: p.upper,
            },
            decision: CardDecision {
                state: p.state,
                t2epsilon: if p.state == PropertyState::Clean { p.t2epsilon } else { None },
            },
        };
        let address = store.put_json(&card)?;
        let existing = ledger
            .audit(audit_id)?
            .card_refs
            .iter()
            .find(|(_, r)| r.card == address && r.attestation == position)
            .map(|(p, _)| *p);
        let card_ref = match existing {
            Some(p) => p,
            None => {
                let payload = CardRefPayload {
                    audit_id: *audit_id,
                    property_id: spec.property_id.clone(),
                    card: address,
                    attestation: position,
                };
                let sigs = sign_payload(&payload, arbiters)?;
                ledger.append_card_ref(payload, sigs)?
            }
        };
        out.push(EmittedCard { card, address, card_ref });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub card: ContentAddress,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn failing_all(card: ContentAddress, detail: &str) -> Self {
        let checks = CHECK_NAMES
            .iter()
            .map(|name| CheckResult { name, passed: false, detail: detail.to_string() })
            .collect();
        VerificationReport { card, checks }
    }
}

fn outcome(name: &'static str, result: Result<String, String>) -> CheckResult {
    match result {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Verify a card fetched from the store by its address.
pub fn verify_card_at(address: &ContentAddress, ledger: &Ledger, ctx: &ReplayContext<'_>) -> VerificationReport {
    let path = ctx.store.path_for(&address.digest);
    match std::fs::read(&path) {
        Ok(bytes) => verify_card(&bytes, address, ledger, ctx),
        Err(e) => VerificationReport::failing_all(*address, &format!("card not readable: {e}")),
    }
}

/// Run all five checks on a card's bytes against the ledger, the store, the
/// dataset and the pinned oracles. Never fails; the report carries failures.
pub fn verify_card(
    bytes: &[u8],
    claimed: &ContentAddress,
    ledger: &Ledger,
    ctx: &ReplayContext<'_>,
) -> VerificationReport {
    let card: ConfidenceCard = match canonical::from_slice(bytes) {
        Ok(c) => c,
        Err(e) => return VerificationReport::failing_all(*claimed, &format!("card does not parse: {e}")),
    };
    let entry = ledger.entry(card.attestation_ref).filter(|e| e.kind == EntryKind::Attestation);
    let record = entry
        .and_then(|e| e.payload_as::<crate::ledger::AttestationPayload>().ok())
        .and_then(|a| ledger.audit(&a.audit_id).ok());

    let checks = vec![
        outcome("content-address", check_address(bytes, claimed)),
        outcome("attestation", check_attestation(&card, entry, record)),
        outcome("replay", check_replay(&card, record, ctx)),
        outcome("interval", check_interval(&card)),
        outcome("reading-rule", check_reading_rule(&card)),
    ];
    VerificationReport { card: *claimed, checks }
}

fn check_address(bytes: &[u8], claimed: &ContentAddress) -> Result<String, String> {
    if !canonical::is_canonical(bytes) {
        return Err("card bytes are not canonical JSON".into());
    }
    let actual = ContentAddress::of_bytes(bytes);
    if actual != *claimed {
        return Err(format!("bytes hash to {} not {}", actual.uri(), claimed.uri()));
    }
    Ok(actual.uri())
}

fn check_attestation(
    card: &ConfidenceCard,
    entry: Option<&LedgerEntry>,
    record: Option<&AuditRecord>,
) -> Result<String, String> {
    let pos = card.attestation_ref;
    let record = record.ok_or_else(|| format!("ledger position {pos} is not an attestation"))?;
    let att = record.attestation(pos).ok_or("attestation not found in its audit")?;
    let reg = &record.registration.payload;
    if record.disputed.contains(&pos) {
        return Err(format!("attestation {pos} was contradicted by an upheld challenge"));
    }
    if reg.root_hash != card.dataset.root_hash {
        return Err("root hash differs from registration".into());
    }
    if record.seed.map(|s| s.seed) != Some(card.dataset.seed) {
        return Err("seed differs from the locked seed".into());
    }
    if reg.property(&card.property.property_id) != Some(&card.property) {
        return Err("property spec differs from registration".into());
    }
    let p = att.properties.get(&card.property.property_id).ok_or("property not attested")?;
    let ev = &card.evidence;
    if att.t != ev.t || p.violations != ev.violations || p.lower != ev.lower || p.upper != ev.upper {
        return Err(format!(
            "card evidence (t={}, S={}, [{}, {}]) differs from attestation (t={}, S={}, [{}, {}])",
            ev.t, ev.violations, ev.lower, ev.upper, att.t, p.violations, p.lower, p.upper
        ));
    }
    let attested_t2 = if p.state == PropertyState::Clean { p.t2epsilon } else { None };
    if p.state != card.decision.state || attested_t2 != card.decision.t2epsilon {
        return Err("decision differs from attestation".into());
    }
    let entry = entry.ok_or("attestation entry missing")?;
    if !entry.signatures_valid() {
        return Err("attestation signature does not verify".into());
    }
    let arbiters: BTreeSet<_> = reg.arbiters.iter().collect();
    let signers: BTreeSet<_> = entry.signatures.iter().map(|s| &s.signer).filter(|k| arbiters.contains(k)).collect();
    if signers.len() < reg.quorum as usize {
        return Err(format!("{} arbiter signatures, quorum is {}", signers.len(), reg.quorum));
    }
    Ok(format!("attestation at ledger position {pos} matches"))
}

fn check_replay(card: &ConfidenceCard, record: Option<&AuditRecord>, ctx: &ReplayContext<'_>) -> Result<String, String> {
    let record = record.ok_or("no attestation to replay")?;
    let reg = &record.registration.payload;
    if ctx.dataset.root_hash() != reg.root_hash {
        return Err("local dataset does not match the registered root hash".into());
    }
    let seed = record.seed.ok_or("seed not locked")?.seed;
    let pid = &card.property.property_id;
    let chain: Vec<_> = record.attestations.iter().take_while(|(p, _)| *p <= card.attestation_ref).collect();
    let (mut t, mut s) = (0u64, 0u64);
    let mut seen = BTreeSet::new();
    for (_, att) in chain {
        let mut pack = ctx.store.get_pack(&att.pack).map_err(|e| format!("pack {}: {e}", att.pack.uri()))?;
        if !verify_segment(&seed, reg.population_size, t, &pack.indices) {
            return Err(format!("pack {} is not schedule positions {t}..", att.pack.uri()));
        }
        if !pack.indices.iter().all(|i| seen.insert(*i)) {
            return Err(format!("pack {} repeats an index", att.pack.uri()));
        }
        if pack.oracle_digests.get(pid) != Some(&card.property.oracle_digest) {
            return Err(format!("pack {} used a different oracle for {pid}", att.pack.uri()));
        }
        pack.bits.retain(|k, _| k == pid);
        pack.oracle_digests.retain(|k, _| k == pid);
        pack.logs.retain(|k, _| k == pid);
        let replay = evidence::replay_pack(&pack, ctx.dataset, ctx.oracles, ctx.env)
            .map_err(|e| format!("replay of {}: {e}", att.pack.uri()))?;
        if let Some(d) = replay.discrepancies().first() {
            return Err(format!(
                "pack {}: {} at index {} claimed {} but replays to {}",
                att.pack.uri(),
                d.property_id,
                d.index,
                d.claimed,
                d.recomputed
            ));
        }
        t += pack.len() as u64;
        s += pack.violations(pid);
        let attested = att.properties.get(pid).map(|p| p.violations);
        if att.t != t || attested != Some(s) {
            return Err(format!("attestation at t={} does not match replayed counts (t={t}, S={s})", att.t));
        }
    }
    if (t, s) != (card.evidence.t, card.evidence.violations) {
        return Err(format!(
            "replayed counts (t={t}, S={s}) differ from card (t={}, S={})",
            card.evidence.t, card.evidence.violations
        ));
    }
    Ok(format!("replayed {t} items, {s} violations"))
}

fn check_interval(card: &ConfidenceCard) -> Result<String, String> {
    let ev = &card.evidence;
    let counter = EvidenceCounter::from_counts(ev.t, ev.violations).map_err(|e| e.to_string())?;
    if ev.t == 0 {
        return Err("card has t = 0".into());
    }
    let p_hat = ev.violations as f64 / ev.t as f64;
    if (p_hat - ev.p_hat).abs() > 1e-12 {
        return Err(format!("p_hat {} is not S/t = {p_hat}", ev.p_hat));
    }
    let ci = counter.interval(card.property.delta).map_err(|e| e.to_string())?;
    let (dl, du) = ((ci.lower - ev.lower).abs(), (ci.upper - ev.upper).abs());
    if dl > INTERVAL_TOLERANCE || du > INTERVAL_TOLERANCE {
        return Err(format!(
            "recomputed [{:.12}, {:.12}] differs from card [{:.12}, {:.12}]",
            ci.lower, ci.upper, ev.lower, ev.upper
        ));
    }
    Ok(format!("[{:.12}, {:.12}] reproduced", ci.lower, ci.upper))
}

fn check_reading_rule(card: &ConfidenceCard) -> Result<String, String> {
    let expected = statistics::property_state(&card.interval(), card.property.epsilon);
    if expected != card.decision.state {
        return Err(format!("interval and epsilon give {} but card says {}", expected.as_str(), card.decision.state.as_str()));
    }
    match (card.decision.state, card.decision.t2epsilon) {
        (PropertyState::Clean, None) => Err("CLEAN card without T2eps".into()),
        (PropertyState::Clean, Some(t2)) if t2 > card.evidence.t => Err(format!("T2eps {t2} exceeds t")),
        (PropertyState::Clean, Some(_)) => Ok(expected.as_str().into()),
        (_, Some(_)) => Err("T2eps on a card that is not CLEAN".into()),
        (_, None) => Ok(expected.as_str().into()),
    }
}
