//! Typed ledger payloads, the audit index derived from the log, and the
//! operations that append to it after checking their preconditions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EntryKind, Ledger, LedgerEntry, LedgerError};
use crate::canonical::{self, decimal};
use crate::crypto::{PublicKey, SignatureRecord};
use crate::digest::Digest;
use crate::evidence::ContentAddress;
use crate::schedule::derive_seed;
use crate::statistics::{CoverageParams, PropertyState};

/// One certified property: name, tolerance, error probability, pinned oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub property_id: String,
    #[serde(with = "decimal")]
    pub epsilon: f64,
    #[serde(with = "decimal")]
    pub delta: f64,
    pub oracle_digest: Digest,
}

impl PropertySpec {
    /// Values are quantized to their wire form so every party uses the same numbers.
    pub fn new(property_id: impl Into<String>, epsilon: f64, delta: f64, oracle_digest: Digest) -> Self {
        PropertySpec {
            property_id: property_id.into(),
            epsilon: canonical::quantize(epsilon),
            delta: canonical::quantize(delta),
            oracle_digest,
        }
    }

    pub fn coverage(&self) -> Result<CoverageParams, LedgerError> {
        CoverageParams::new(self.epsilon, self.delta).map_err(|e| LedgerError::MalformedProperty {
            property_id: self.property_id.clone(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationPayload {
    pub root_hash: Digest,
    pub urls: Vec<String>,
    pub population_size: u64,
    pub properties: Vec<PropertySpec>,
    pub license_allowlist: Vec<String>,
    pub arbiters: Vec<PublicKey>,
    pub quorum: u32,
    pub sponsor: PublicKey,
    /// Ledger position the registration is written at; keeps re-registrations
    /// of a dataset after termination distinct.
    pub sequence: u64,
}

impl RegistrationPayload {
    pub fn audit_id(&self) -> Digest {
        canonical::canonical_digest(self).expect("registration is float-free")
    }

    pub fn property(&self, property_id: &str) -> Option<&PropertySpec> {
        self.properties.iter().find(|p| p.property_id == property_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRegistration {
    pub audit_id: Digest,
    pub payload: RegistrationPayload,
    pub created_entry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLockPayload {
    pub audit_id: Digest,
    pub beacon: Digest,
    pub seed: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedLock {
    pub seed: Digest,
    pub beacon: Digest,
    pub position: u64,
}

/// On-ledger pointer to a published evidence pack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRefPayload {
    pub audit_id: Digest,
    pub round: u64,
    /// First schedule position covered by the pack.
    pub start: u64,
    pub count: u64,
    pub pack: ContentAddress,
    pub producer: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyAttestation {
    pub violations: u64,
    #[serde(with = "decimal")]
    pub lower: f64,
    #[serde(with = "decimal")]
    pub upper: f64,
    pub state: PropertyState,
    pub t2epsilon: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationPayload {
    pub audit_id: Digest,
    pub round: u64,
    pub t: u64,
    pub properties: BTreeMap<String, PropertyAttestation>,
    pub decision: PropertyState,
    /// Every item has been sampled without reaching CLEAN or DIRTY.
    pub exhausted: bool,
    /// The pack this round consumed.
    pub pack: ContentAddress,
    pub prev_attestation: Option<u64>,
}

impl AttestationPayload {
    pub fn is_terminal(&self) -> bool {
        self.decision.is_terminal() || self.exhausted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeTarget {
    /// An attestation already on the ledger.
    Attestation { t: u64 },
    /// A submitted pack the arbiters refused to attest.
    Submission { round: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengePayload {
    pub audit_id: Digest,
    pub target: ChallengeTarget,
    pub evidence_uri: ContentAddress,
    pub challenger: PublicKey,
    /// Contradiction report, when the challenger already has one.
    pub report: Option<ContentAddress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeOutcome {
    Upheld,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPayload {
    pub audit_id: Digest,
    /// Ledger position of the challenge being resolved.
    pub challenge: u64,
    pub outcome: ChallengeOutcome,
    pub report: Option<ContentAddress>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardRefPayload {
    pub audit_id: Digest,
    pub property_id: String,
    pub card: ContentAddress,
    pub attestation: u64,
}

/// Everything the ledger says about one audit.
#[derive(Debug, Clone)]
pub struct AuditRecord {
    pub registration: AuditRegistration,
    pub seed: Option<SeedLock>,
    pub evidence_refs: Vec<(u64, EvidenceRefPayload)>,
    pub attestations: Vec<(u64, AttestationPayload)>,
    pub challenges: BTreeMap<u64, ChallengePayload>,
    /// Keyed by challenge position: (resolution position, payload).
    pub resolutions: BTreeMap<u64, (u64, ResolutionPayload)>,
    /// Attestation positions contradicted by an upheld challenge.
    pub disputed: BTreeSet<u64>,
    pub card_refs: Vec<(u64, CardRefPayload)>,
}

impl AuditRecord {
    pub fn audit_id(&self) -> Digest {
        self.registration.audit_id
    }

    pub fn last_attestation(&self) -> Option<&(u64, AttestationPayload)> {
        self.attestations.last()
    }

    /// Sample count of the latest attestation; 0 before the first round.
    pub fn attested_t(&self) -> u64 {
        self.last_attestation().map_or(0, |(_, a)| a.t)
    }

    /// End of the contiguous run of pending packs starting at the attested t:
    /// the first schedule position no pending pack will cover.
    pub fn claim_frontier(&self) -> u64 {
        let pending = self.pending_refs();
        let mut cur = self.attested_t();
        while let Some((_, r)) = pending.iter().find(|(_, r)| r.start == cur) {
            cur = r.start + r.count;
        }
        cur
    }

    pub fn is_terminated(&self) -> bool {
        self.last_attestation().is_some_and(|(_, a)| a.is_terminal())
    }

    pub fn attestation(&self, position: u64) -> Option<&AttestationPayload> {
        self.attestations.iter().find(|(p, _)| *p == position).map(|(_, a)| a)
    }

    pub fn attestation_at_t(&self, t: u64) -> Option<&(u64, AttestationPayload)> {
        self.attestations.iter().find(|(_, a)| a.t == t)
    }

    /// Packs refused at submission (upheld submission challenges).
    pub fn rejected_packs(&self) -> BTreeSet<ContentAddress> {
        self.challenges
            .iter()
            .filter(|(_, c)| matches!(c.target, ChallengeTarget::Submission { .. }))
            .filter(|(pos, _)| {
                self.resolutions.get(pos).is_some_and(|(_, r)| r.outcome == ChallengeOutcome::Upheld)
            })
            .map(|(_, c)| c.evidence_uri)
            .collect()
    }

    /// Published packs not yet attested or rejected, in ledger order.
    pub fn pending_refs(&self) -> Vec<&(u64, EvidenceRefPayload)> {
        let used: BTreeSet<ContentAddress> = self.attestations.iter().map(|(_, a)| a.pack).collect();
        let rejected = self.rejected_packs();
        self.evidence_refs
            .iter()
            .filter(|(_, r)| !used.contains(&r.pack) && !rejected.contains(&r.pack))
            .collect()
    }

    pub fn open_challenges(&self) -> Vec<(u64, &ChallengePayload)> {
        self.challenges
            .iter()
            .filter(|(p, _)| !self.resolutions.contains_key(p))
            .map(|(p, c)| (*p, c))
            .collect()
    }

    fn quorum_check(&self, payload_bytes: &[u8], signatures: &[SignatureRecord]) -> Result<(), LedgerError> {
        let arbiters: BTreeSet<&PublicKey> = self.registration.payload.arbiters.iter().collect();
        let mut signers = BTreeSet::new();
        for s in signatures {
            if !arbiters.contains(&s.signer) {
                return Err(LedgerError::BadSignature(format!("{} is not a registered arbiter", s.signer)));
            }
            if !s.verify(payload_bytes) {
                return Err(LedgerError::BadSignature(format!("signature by {} does not verify", s.signer)));
            }
            signers.insert(s.signer);
        }
        let need = self.registration.payload.quorum as usize;
        if signers.len() < need {
            return Err(LedgerError::QuorumNotMet { got: signers.len(), need });
        }
        Ok(())
    }
}

fn signed_by(payload_bytes: &[u8], signatures: &[SignatureRecord], who: &PublicKey) -> Result<(), LedgerError> {
    if signatures.is_empty() {
        return Err(LedgerError::BadSignature("entry is unsigned".into()));
    }
    if let Some(bad) = signatures.iter().find(|s| !s.verify(payload_bytes)) {
        return Err(LedgerError::BadSignature(format!("signature by {} does not verify", bad.signer)));
    }
    if !signatures.iter().any(|s| s.signer == *who) {
        return Err(LedgerError::BadSignature(format!("missing signature by {who}")));
    }
    Ok(())
}

fn to_value<T: Serialize>(payload: &T) -> Result<(Value, Vec<u8>), LedgerError> {
    let bytes = canonical::to_canonical_bytes(payload)?;
    let value = serde_json::from_slice(&bytes).map_err(canonical::CanonicalError::from)?;
    Ok((value, bytes))
}

/// Audit state folded from the entries of a ledger.
#[derive(Debug, Clone, Default)]
pub struct LedgerIndex {
    audits: BTreeMap<Digest, AuditRecord>,
}

impl LedgerIndex {
    fn record(&self, audit_id: &Digest) -> Result<&AuditRecord, LedgerError> {
        self.audits.get(audit_id).ok_or(LedgerError::UnknownAudit(*audit_id))
    }

    fn record_mut(&mut self, audit_id: &Digest) -> Result<&mut AuditRecord, LedgerError> {
        self.audits.get_mut(audit_id).ok_or(LedgerError::UnknownAudit(*audit_id))
    }

    /// Fold one entry in. Only structural consistency is checked here; the
    /// typed operations enforce the protocol rules before writing.
    pub(super) fn apply(&mut self, entry: &LedgerEntry) -> Result<(), LedgerError> {
        let pos = entry.position;
        match entry.kind {
            EntryKind::Register => {
                let payload: RegistrationPayload = entry.payload_as()?;
                let audit_id = payload.audit_id();
                if self.audits.contains_key(&audit_id) {
                    return Err(LedgerError::Inconsistent(format!("audit {audit_id} registered twice")));
                }
                self.audits.insert(
                    audit_id,
                    AuditRecord {
                        registration: AuditRegistration { audit_id, payload, created_entry: pos },
                        seed: None,
                        evidence_refs: Vec::new(),
                        attestations: Vec::new(),
                        challenges: BTreeMap::new(),
                        resolutions: BTreeMap::new(),
                        disputed: BTreeSet::new(),
                        card_refs: Vec::new(),
                    },
                );
            }
            EntryKind::SeedLock => {
                let p: SeedLockPayload = entry.payload_as()?;
                let rec = self.record_mut(&p.audit_id)?;
                if rec.seed.is_some() {
                    return Err(LedgerError::AlreadyLocked(p.audit_id));
                }
                rec.seed = Some(SeedLock { seed: p.seed, beacon: p.beacon, position: pos });
            }
            EntryKind::EvidenceRef => {
                let p: EvidenceRefPayload = entry.payload_as()?;
                self.record_mut(&p.audit_id)?.evidence_refs.push((pos, p));
            }
            EntryKind::Attestation => {
                let p: AttestationPayload = entry.payload_as()?;
                self.record_mut(&p.audit_id)?.attestations.push((pos, p));
            }
            EntryKind::Challenge => {
                let p: ChallengePayload = entry.payload_as()?;
                self.record_mut(&p.audit_id)?.challenges.insert(pos, p);
            }
            EntryKind::Resolution => {
                let p: ResolutionPayload = entry.payload_as()?;
                let rec = self.record_mut(&p.audit_id)?;
                let challenge = rec
                    .challenges
                    .get(&p.challenge)
                    .ok_or(LedgerError::UnknownChallenge(p.challenge))?
                    .clone();
                if rec.resolutions.contains_key(&p.challenge) {
                    return Err(LedgerError::AlreadyResolved(p.challenge));
                }
                if p.outcome == ChallengeOutcome::Upheld {
                    if let ChallengeTarget::Attestation { t } = challenge.target {
                        if let Some((apos, _)) = rec.attestation_at_t(t) {
                            let apos = *apos;
                            rec.disputed.insert(apos);
                        }
                    }
                }
                rec.resolutions.insert(p.challenge, (pos, p));
            }
            EntryKind::CardRef => {
                let p: CardRefPayload = entry.payload_as()?;
                self.record_mut(&p.audit_id)?.card_refs.push((pos, p));
            }
        }
        Ok(())
    }
}

impl Ledger {
    pub fn audit(&self, audit_id: &Digest) -> Result<&AuditRecord, LedgerError> {
        self.index.record(audit_id)
    }

    pub fn audits(&self) -> impl Iterator<Item = &AuditRecord> {
        self.index.audits.values()
    }

    /// Register a dataset audit. `payload.sequence` must be the position the
    /// entry will occupy, and the sponsor must sign.
    pub fn register_audit(
        &mut self,
        payload: RegistrationPayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<AuditRegistration, LedgerError> {
        let entry = self.transact(|index, next| {
            if payload.sequence != next {
                return Err(LedgerError::MalformedRegistration(format!(
                    "sequence {} but next ledger position is {next}",
                    payload.sequence
                )));
            }
            if payload.properties.is_empty() {
                return Err(LedgerError::MalformedRegistration("no properties".into()));
            }
            let mut ids = BTreeSet::new();
            for p in &payload.properties {
                p.coverage()?;
                if !ids.insert(p.property_id.as_str()) {
                    return Err(LedgerError::MalformedProperty {
                        property_id: p.property_id.clone(),
                        reason: "listed twice".into(),
                    });
                }
            }
            if payload.population_size == 0 {
                return Err(LedgerError::MalformedRegistration("population size is zero".into()));
            }
            let distinct: BTreeSet<_> = payload.arbiters.iter().collect();
            if distinct.len() != payload.arbiters.len() || distinct.is_empty() {
                return Err(LedgerError::MalformedRegistration("arbiter keys must be non-empty and distinct".into()));
            }
            if payload.quorum == 0 || payload.quorum as usize > payload.arbiters.len() {
                return Err(LedgerError::MalformedRegistration(format!(
                    "quorum {} of {} arbiters",
                    payload.quorum,
                    payload.arbiters.len()
                )));
            }
            let (value, bytes) = to_value(&payload)?;
            signed_by(&bytes, &signatures, &payload.sponsor)?;
            if index.audits.values().any(|a| a.registration.payload.root_hash == payload.root_hash && !a.is_terminated()) {
                return Err(LedgerError::DuplicateRootHash(payload.root_hash));
            }
            Ok((EntryKind::Register, value, signatures))
        })?;
        let position = entry.position;
        let audit_id = payload.audit_id();
        debug_assert_eq!(self.audit(&audit_id)?.registration.created_entry, position);
        Ok(self.audit(&audit_id)?.registration.clone())
    }

    /// Commit the audit's public seed, `SHA-256(audit_id || beacon)`.
    pub fn lock_seed(
        &mut self,
        audit_id: &Digest,
        beacon: &Digest,
        signatures: Vec<SignatureRecord>,
    ) -> Result<SeedLock, LedgerError> {
        let payload = SeedLockPayload {
            audit_id: *audit_id,
            beacon: *beacon,
            seed: derive_seed(audit_id.as_bytes(), beacon.as_bytes()).expect("32-byte inputs"),
        };
        self.transact(|index, _| {
            let rec = index.record(audit_id)?;
            if rec.seed.is_some() {
                return Err(LedgerError::AlreadyLocked(*audit_id));
            }
            let (value, bytes) = to_value(&payload)?;
            signed_by(&bytes, &signatures, &rec.registration.payload.sponsor)?;
            Ok((EntryKind::SeedLock, value, signatures))
        })?;
        Ok(self.audit(audit_id)?.seed.expect("just locked"))
    }

    /// Record a published evidence pack, signed by its producer.
    pub fn publish_evidence(
        &mut self,
        payload: EvidenceRefPayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<u64, LedgerError> {
        let entry = self.transact(|index, _| {
            let rec = index.record(&payload.audit_id)?;
            if rec.seed.is_none() {
                return Err(LedgerError::SeedNotLocked(payload.audit_id));
            }
            if rec.is_terminated() {
                return Err(LedgerError::AuditTerminal(payload.audit_id));
            }
            let (start, end) = (payload.start, payload.start.saturating_add(payload.count));
            if payload.count == 0 || start < rec.attested_t() {
                return Err(LedgerError::AlreadyClaimed { start, end });
            }
            if rec.pending_refs().iter().any(|(_, r)| r.start < end && start < r.start + r.count) {
                return Err(LedgerError::AlreadyClaimed { start, end });
            }
            let (value, bytes) = to_value(&payload)?;
            signed_by(&bytes, &signatures, &payload.producer)?;
            Ok((EntryKind::EvidenceRef, value, signatures))
        })?;
        Ok(entry.position)
    }

    /// Append an arbiter-co-signed attestation.
    pub fn append_attestation(
        &mut self,
        payload: AttestationPayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<u64, LedgerError> {
        let entry = self.transact(|index, _| {
            let rec = index.record(&payload.audit_id)?;
            if rec.seed.is_none() {
                return Err(LedgerError::SeedNotLocked(payload.audit_id));
            }
            if rec.is_terminated() {
                return Err(LedgerError::AuditTerminal(payload.audit_id));
            }
            let (value, bytes) = to_value(&payload)?;
            rec.quorum_check(&bytes, &signatures)?;
            let last = rec.last_attestation();
            let previous = last.map_or(0, |(_, a)| a.t);
            if payload.t <= previous {
                return Err(LedgerError::StaleT { t: payload.t, previous });
            }
            if payload.prev_attestation != last.map(|(p, _)| *p) {
                return Err(LedgerError::Inconsistent("prev_attestation does not point at the latest attestation".into()));
            }
            if !rec.evidence_refs.iter().any(|(_, r)| r.pack == payload.pack) {
                return Err(LedgerError::UnknownPack(payload.pack.uri()));
            }
            let registered: BTreeSet<&str> =
                rec.registration.payload.properties.iter().map(|p| p.property_id.as_str()).collect();
            let attested: BTreeSet<&str> = payload.properties.keys().map(String::as_str).collect();
            if registered != attested {
                return Err(LedgerError::Inconsistent("attested properties differ from registration".into()));
            }
            if payload.properties.values().any(|p| p.violations > payload.t) {
                return Err(LedgerError::Inconsistent("violations exceed t".into()));
            }
            Ok((EntryKind::Attestation, value, signatures))
        })?;
        Ok(entry.position)
    }

    /// File a challenge, signed by the challenger.
    pub fn append_challenge(
        &mut self,
        payload: ChallengePayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<u64, LedgerError> {
        let entry = self.transact(|index, _| {
            let rec = index.record(&payload.audit_id)?;
            if let ChallengeTarget::Attestation { t } = payload.target {
                if rec.attestation_at_t(t).is_none() {
                    return Err(LedgerError::UnknownAttestation(t));
                }
            }
            let (value, bytes) = to_value(&payload)?;
            signed_by(&bytes, &signatures, &payload.challenger)?;
            Ok((EntryKind::Challenge, value, signatures))
        })?;
        Ok(entry.position)
    }

    /// Record the arbiters' ruling on an open challenge.
    pub fn resolve_challenge(
        &mut self,
        payload: ResolutionPayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<u64, LedgerError> {
        let entry = self.transact(|index, _| {
            let rec = index.record(&payload.audit_id)?;
            if !rec.challenges.contains_key(&payload.challenge) {
                return Err(LedgerError::UnknownChallenge(payload.challenge));
            }
            if rec.resolutions.contains_key(&payload.challenge) {
                return Err(LedgerError::AlreadyResolved(payload.challenge));
            }
            let (value, bytes) = to_value(&payload)?;
            rec.quorum_check(&bytes, &signatures)?;
            Ok((EntryKind::Resolution, value, signatures))
        })?;
        Ok(entry.position)
    }

    /// Reference a stored confidence card next to its attestation.
    pub fn append_card_ref(
        &mut self,
        payload: CardRefPayload,
        signatures: Vec<SignatureRecord>,
    ) -> Result<u64, LedgerError> {
        let entry = self.transact(|index, _| {
            let rec = index.record(&payload.audit_id)?;
            if rec.attestation(payload.attestation).is_none() {
                return Err(LedgerError::Inconsistent(format!(
                    "card references position {} which is not an attestation of this audit",
                    payload.attestation
                )));
            }
            let (value, bytes) = to_value(&payload)?;
            rec.quorum_check(&bytes, &signatures)?;
            Ok((EntryKind::CardRef, value, signatures))
        })?;
        Ok(entry.position)
    }
}
