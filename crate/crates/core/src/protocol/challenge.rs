//! Contradiction reports and challenge adjudication.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{attested_interval, Audit, ProtocolError, ReplayContext, INTERVAL_TOLERANCE};
use crate::crypto::Keypair;
use crate::digest::Digest;
use crate::evidence::{self, ContentAddress, EvidencePack, PropertyEvidence, ReplayReport};
use crate::ledger::{
    sign_payload, AuditRecord, ChallengeOutcome, ChallengePayload, ChallengeTarget, EntryKind, Ledger, LedgerError,
    ResolutionPayload,
};

/// One (property, index) pair where a pack and its replay disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub property_id: String,
    pub index: u64,
    pub claimed: u8,
    pub recomputed: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContradictionReport {
    pub audit_id: Digest,
    pub t: u64,
    pub discrepancies: Vec<Discrepancy>,
    /// Properties whose attested counts or interval do not follow from the evidence.
    pub interval_mismatches: Vec<String>,
    pub submitted: ContentAddress,
    pub recomputed: ContentAddress,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjudication {
    pub resolution: u64,
    pub outcome: ChallengeOutcome,
    pub report: Option<ContentAddress>,
}

fn discrepancies(replay: &ReplayReport) -> Vec<Discrepancy> {
    replay
        .discrepancies()
        .into_iter()
        .map(|e| Discrepancy {
            property_id: e.property_id.clone(),
            index: e.index,
            claimed: e.claimed,
            recomputed: e.recomputed,
        })
        .collect()
}

/// The pack the arbiters would have produced for the same indices.
fn recomputed_pack(pack: &EvidencePack, replay: &ReplayReport, producer: &Keypair) -> Result<EvidencePack, ProtocolError> {
    let bits: BTreeMap<(&str, u64), u8> =
        replay.entries.iter().map(|e| ((e.property_id.as_str(), e.index), e.recomputed)).collect();
    let mut properties = BTreeMap::new();
    for (pid, digest) in &pack.oracle_digests {
        let logs = replay.recomputed_logs.get(pid);
        properties.insert(
            pid.clone(),
            PropertyEvidence {
                oracle_digest: *digest,
                bits: pack.indices.iter().map(|i| bits.get(&(pid.as_str(), *i)) == Some(&1)).collect(),
                logs: pack
                    .indices
                    .iter()
                    .map(|i| logs.and_then(|l| l.get(&i.to_string())).cloned().unwrap_or_default())
                    .collect(),
            },
        );
    }
    Ok(evidence::build_pack(pack.audit_id, pack.round, pack.indices.clone(), properties, producer.public())?)
}

fn store_report(
    ctx: &ReplayContext<'_>,
    audit_id: Digest,
    t: u64,
    pack: &EvidencePack,
    replay: &ReplayReport,
    interval_mismatches: Vec<String>,
    producer: &Keypair,
) -> Result<(ContradictionReport, ContentAddress), ProtocolError> {
    let recomputed = recomputed_pack(pack, replay, producer)?;
    let report = ContradictionReport {
        audit_id,
        t,
        discrepancies: discrepancies(replay),
        interval_mismatches,
        submitted: pack.address(),
        recomputed: ctx.store.put_pack(&recomputed)?,
    };
    let address = ctx.store.put_json(&report)?;
    Ok((report, address))
}

/// Arbiters refuse a pack: store the contradiction report, then record a
/// submission challenge and its upheld resolution on the ledger.
pub(super) fn reject_submission(
    ledger: &mut Ledger,
    ctx: &ReplayContext<'_>,
    audit: &Audit,
    pack: &EvidencePack,
    replay: &ReplayReport,
    arbiters: &[&Keypair],
) -> ProtocolError {
    let mut run = || -> Result<ProtocolError, ProtocolError> {
        let lead = arbiters.first().ok_or(LedgerError::QuorumNotMet { got: 0, need: 1 })?;
        let (report, address) = store_report(ctx, audit.audit_id(), audit.t(), pack, replay, Vec::new(), lead)?;
        let challenge = ChallengePayload {
            audit_id: audit.audit_id(),
            target: ChallengeTarget::Submission { round: pack.round },
            evidence_uri: pack.address(),
            challenger: lead.public(),
            report: Some(address),
        };
        let sigs = sign_payload(&challenge, &[*lead])?;
        let position = ledger.append_challenge(challenge, sigs)?;
        let resolution = ResolutionPayload {
            audit_id: audit.audit_id(),
            challenge: position,
            outcome: ChallengeOutcome::Upheld,
            report: Some(address),
        };
        let sigs = sign_payload(&resolution, arbiters)?;
        ledger.resolve_challenge(resolution, sigs)?;
        Ok(ProtocolError::ReplayDisagreement {
            report: address,
            count: report.discrepancies.len(),
            discrepancies: report.discrepancies,
        })
    };
    run().unwrap_or_else(|e| e)
}

/// Validator step: dispute the attestation at `t`, pointing at supporting evidence.
pub fn file_challenge(
    ledger: &mut Ledger,
    audit_id: &Digest,
    t: u64,
    evidence_uri: ContentAddress,
    challenger: &Keypair,
) -> Result<u64, ProtocolError> {
    let payload = ChallengePayload {
        audit_id: *audit_id,
        target: ChallengeTarget::Attestation { t },
        evidence_uri,
        challenger: challenger.public(),
        report: None,
    };
    let sigs = sign_payload(&payload, &[challenger])?;
    Ok(ledger.append_challenge(payload, sigs)?)
}

/// Check that an attestation's counts and intervals follow from its pack and
/// the attestation before it.
fn attested_values_mismatch(record: &AuditRecord, position: u64, pack: &EvidencePack) -> Vec<String> {
    let Some(att) = record.attestation(position) else { return Vec::new() };
    let prev = att.prev_attestation.and_then(|p| record.attestation(p));
    let prev_t = prev.map_or(0, |a| a.t);
    let mut bad = Vec::new();
    for spec in &record.registration.payload.properties {
        let pid = &spec.property_id;
        let Some(p) = att.properties.get(pid) else {
            bad.push(pid.clone());
            continue;
        };
        let prev_s = prev.and_then(|a| a.properties.get(pid)).map_or(0, |q| q.violations);
        let counts_ok = att.t == prev_t + pack.len() as u64 && p.violations == prev_s + pack.violations(pid);
        let interval_ok = attested_interval(att.t, p.violations, spec.delta).is_ok_and(|ci| {
            (ci.lower - p.lower).abs() <= INTERVAL_TOLERANCE && (ci.upper - p.upper).abs() <= INTERVAL_TOLERANCE
        });
        if !(counts_ok && interval_ok) {
            bad.push(pid.clone());
        }
    }
    bad
}

/// Arbiter step: rule on an open challenge by replaying the disputed evidence.
pub fn adjudicate_challenge(
    ledger: &mut Ledger,
    ctx: &ReplayContext<'_>,
    challenge_position: u64,
    arbiters: &[&Keypair],
) -> Result<Adjudication, ProtocolError> {
    let entry = ledger
        .entry(challenge_position)
        .filter(|e| e.kind == EntryKind::Challenge)
        .ok_or(LedgerError::UnknownChallenge(challenge_position))?;
    let challenge: ChallengePayload = entry.payload_as()?;
    let record = ledger.audit(&challenge.audit_id)?;
    if record.resolutions.contains_key(&challenge_position) {
        return Err(LedgerError::AlreadyResolved(challenge_position).into());
    }
    ctx.check_root(&record.registration.payload)?;
    let lead = arbiters.first().ok_or(LedgerError::QuorumNotMet { got: 0, need: 1 })?;

    let (t, pack, mismatches) = match challenge.target {
        ChallengeTarget::Attestation { t } => {
            let (position, att) = record.attestation_at_t(t).ok_or(LedgerError::UnknownAttestation(t))?;
            let pack = ctx.store.get_pack(&att.pack)?;
            let mismatches = attested_values_mismatch(record, *position, &pack);
            (t, pack, mismatches)
        }
        ChallengeTarget::Submission { .. } => {
            let pack = ctx.store.get_pack(&challenge.evidence_uri)?;
            (record.attested_t(), pack, Vec::new())
        }
    };
    let replay = evidence::replay_pack(&pack, ctx.dataset, ctx.oracles, ctx.env)?;
    let (outcome, report) = if replay.agrees() && mismatches.is_empty() {
        (ChallengeOutcome::Rejected, None)
    } else {
        let (_, address) = store_report(ctx, challenge.audit_id, t, &pack, &replay, mismatches, lead)?;
        (ChallengeOutcome::Upheld, Some(address))
    };
    let resolution = ResolutionPayload { audit_id: challenge.audit_id, challenge: challenge_position, outcome, report };
    let sigs = sign_payload(&resolution, arbiters)?;
    let position = ledger.resolve_challenge(resolution, sigs)?;
    Ok(Adjudication { resolution: position, outcome, report })
}
