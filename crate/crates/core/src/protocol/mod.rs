//! The audit state machine: index claiming, validator evidence collection,
//! arbiter reproduction and attestation, stopping, cards and challenges.

mod card;
mod challenge;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::canonical;
use crate::crypto::{Keypair, PublicKey};
use crate::dataset::{Dataset, DatasetError};
use crate::digest::Digest;
use crate::evidence::{self, ContentAddress, EvidenceError, EvidencePack, PropertyEvidence, Store};
use crate::ledger::{
    sign_payload, AttestationPayload, AuditRecord, AuditRegistration, EvidenceRefPayload, Ledger, LedgerError,
    PropertyAttestation, RegistrationPayload,
};
use crate::oracle::{ExecutionEnv, OracleDescriptor, OracleError, OracleRegistry};
use crate::schedule::{SamplingSchedule, ScheduleError};
use crate::statistics::{self, ConfidenceInterval, EvidenceCounter, PropertyState, StatsError};

pub use card::{
    emit_cards, verify_card, verify_card_at, CardDataset, CardDecision, CardEvidence, CheckResult, ConfidenceCard,
    EmittedCard, VerificationReport, CHECK_NAMES, INTERVAL_TOLERANCE,
};
pub use challenge::{adjudicate_challenge, file_challenge, Adjudication, ContradictionReport, Discrepancy};

/// Claims not published within this window return to the pool.
pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("audit has reached a terminal decision")]
    AuditTerminal,
    #[error("every item of the dataset has been scheduled")]
    ScheduleExhausted,
    #[error("schedule position {0} is already claimed")]
    AlreadyClaimed(u64),
    #[error("pack indices are not schedule positions {start}..{end}")]
    MembershipViolation { start: u64, end: u64 },
    #[error("replay disagrees with the pack on {count} (property, index) pairs; contradiction report {report}")]
    ReplayDisagreement { report: ContentAddress, count: usize, discrepancies: Vec<Discrepancy> },
    #[error("property {0}: pack oracle digest does not match the registration")]
    DigestMismatch(String),
    #[error("audit has no attestation yet")]
    NoAttestation,
    #[error("dataset root {got} does not match registered root {expected}")]
    RootMismatch { expected: Digest, got: Digest },
    #[error("pack starts at schedule position {start} but the audit is at t = {t}")]
    OutOfOrder { start: u64, t: u64 },
}

impl ProtocolError {
    pub fn category(&self) -> &'static str {
        match self {
            ProtocolError::Ledger(e) => e.category(),
            ProtocolError::Evidence(e) => e.category(),
            ProtocolError::Oracle(e) => e.category(),
            ProtocolError::Dataset(e) => e.category(),
            ProtocolError::Schedule(ScheduleError::Exhausted { .. }) => "schedule-exhausted",
            ProtocolError::Schedule(_) => "schedule",
            ProtocolError::Stats(_) => "statistics",
            ProtocolError::AuditTerminal => "audit-terminal",
            ProtocolError::ScheduleExhausted => "schedule-exhausted",
            ProtocolError::AlreadyClaimed(_) => "already-claimed",
            ProtocolError::MembershipViolation { .. } => "membership-violation",
            ProtocolError::ReplayDisagreement { .. } => "replay-disagreement",
            ProtocolError::DigestMismatch(_) => "digest-mismatch",
            ProtocolError::NoAttestation => "no-attestation",
            ProtocolError::RootMismatch { .. } => "root-mismatch",
            ProtocolError::OutOfOrder { .. } => "out-of-order",
        }
    }
}

/// Read-only inputs every replaying party needs.
#[derive(Clone, Copy)]
pub struct ReplayContext<'a> {
    pub store: &'a Store,
    pub dataset: &'a Dataset,
    pub oracles: &'a OracleRegistry,
    pub env: &'a ExecutionEnv,
}

impl ReplayContext<'_> {
    fn check_root(&self, registration: &RegistrationPayload) -> Result<(), ProtocolError> {
        let got = self.dataset.root_hash();
        if got != registration.root_hash {
            return Err(ProtocolError::RootMismatch { expected: registration.root_hash, got });
        }
        Ok(())
    }
}

/// Oracle settings every party derives from the registration.
pub fn execution_env(registration: &RegistrationPayload, fixtures_root: Option<PathBuf>) -> ExecutionEnv {
    ExecutionEnv {
        fixtures_root,
        license_allowlist: registration.license_allowlist.iter().cloned().collect(),
        ..ExecutionEnv::default()
    }
}

/// Interval as attested: computed, then rounded outward to the wire precision
/// so the published bounds never claim more than the exact ones.
pub fn attested_interval(t: u64, violations: u64, delta: f64) -> Result<ConfidenceInterval, StatsError> {
    if t == 0 {
        return Ok(ConfidenceInterval::VACUOUS);
    }
    let ci = EvidenceCounter::from_counts(t, violations)?.interval(delta)?;
    let scale = 10f64.powi(canonical::DECIMAL_PLACES as i32);
    Ok(ConfidenceInterval {
        lower: canonical::quantize(((ci.lower * scale).floor() / scale).max(0.0)),
        upper: canonical::quantize(((ci.upper * scale).ceil() / scale).min(1.0)),
    })
}

/// A leased schedule position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Claim {
    pub position: u64,
    pub index: u64,
    pub validator: PublicKey,
    pub expires: Instant,
}

/// Per-property view of the latest attested evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyStatus {
    pub property_id: String,
    pub epsilon: f64,
    pub delta: f64,
    pub t: u64,
    pub violations: u64,
    pub p_hat: Option<f64>,
    pub interval: ConfidenceInterval,
    pub state: PropertyState,
    pub cleanliness: f64,
    pub t2epsilon: Option<u64>,
}

/// Status rows straight from the ledger: t = 0, `[0, 1]`, PENDING before the first round.
pub fn status(record: &AuditRecord) -> Vec<PropertyStatus> {
    let last = record.last_attestation().map(|(_, a)| a);
    record
        .registration
        .payload
        .properties
        .iter()
        .map(|spec| {
            let attested = last.and_then(|a| a.properties.get(&spec.property_id).map(|p| (a.t, p)));
            match attested {
                Some((t, p)) => {
                    let interval = ConfidenceInterval { lower: p.lower, upper: p.upper };
                    PropertyStatus {
                        property_id: spec.property_id.clone(),
                        epsilon: spec.epsilon,
                        delta: spec.delta,
                        t,
                        violations: p.violations,
                        p_hat: (t > 0).then(|| p.violations as f64 / t as f64),
                        interval,
                        state: p.state,
                        cleanliness: statistics::cleanliness_lower_bound(&interval),
                        t2epsilon: p.t2epsilon,
                    }
                }
                None => PropertyStatus {
                    property_id: spec.property_id.clone(),
                    epsilon: spec.epsilon,
                    delta: spec.delta,
                    t: 0,
                    violations: 0,
                    p_hat: None,
                    interval: ConfidenceInterval::VACUOUS,
                    state: PropertyState::Pending,
                    cleanliness: 0.0,
                    t2epsilon: None,
                },
            }
        })
        .collect()
}

/// Outcome of one accepted round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub attestation: u64,
    pub t: u64,
    pub state: PropertyState,
    pub exhausted: bool,
}

/// One audit as its arbiters and validators see it.
#[derive(Debug, Clone)]
pub struct Audit {
    registration: AuditRegistration,
    schedule: SamplingSchedule,
    counters: BTreeMap<String, EvidenceCounter>,
    intervals: BTreeMap<String, ConfidenceInterval>,
    t2epsilon: BTreeMap<String, Option<u64>>,
    state: PropertyState,
    exhausted: bool,
    last_attestation: Option<u64>,
    rounds: u64,
    /// First schedule position not covered by a published, unattested pack.
    frontier: u64,
    claims: BTreeMap<u64, Claim>,
    lease: Duration,
}

impl Audit {
    /// Rebuild the audit from its ledger record. The seed must be locked.
    pub fn open(ledger: &Ledger, audit_id: &Digest) -> Result<Self, ProtocolError> {
        let record = ledger.audit(audit_id)?;
        let seed = record.seed.ok_or(LedgerError::SeedNotLocked(*audit_id))?;
        let registration = record.registration.clone();
        let schedule = SamplingSchedule::new(seed.seed, registration.payload.population_size)?;
        let last = record.last_attestation();
        let mut counters = BTreeMap::new();
        let mut intervals = BTreeMap::new();
        let mut t2epsilon = BTreeMap::new();
        for spec in &registration.payload.properties {
            let pid = &spec.property_id;
            let (counter, interval, t2) = match last.and_then(|(_, a)| a.properties.get(pid).map(|p| (a.t, p))) {
                Some((t, p)) => (
                    EvidenceCounter::from_counts(t, p.violations)?,
                    ConfidenceInterval { lower: p.lower, upper: p.upper },
                    p.t2epsilon,
                ),
                None => (EvidenceCounter::new(), ConfidenceInterval::VACUOUS, None),
            };
            counters.insert(pid.clone(), counter);
            intervals.insert(pid.clone(), interval);
            t2epsilon.insert(pid.clone(), t2);
        }
        Ok(Audit {
            registration,
            schedule,
            counters,
            intervals,
            t2epsilon,
            state: last.map_or(PropertyState::Pending, |(_, a)| a.decision),
            exhausted: last.is_some_and(|(_, a)| a.exhausted),
            last_attestation: last.map(|(p, _)| *p),
            rounds: record.attestations.len() as u64,
            frontier: record.claim_frontier(),
            claims: BTreeMap::new(),
            lease: DEFAULT_LEASE,
        })
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    pub fn audit_id(&self) -> Digest {
        self.registration.audit_id
    }

    pub fn registration(&self) -> &RegistrationPayload {
        &self.registration.payload
    }

    pub fn seed(&self) -> Digest {
        *self.schedule.seed()
    }

    /// Shared sample count across properties.
    pub fn t(&self) -> u64 {
        self.counters.values().next().map_or(0, EvidenceCounter::t)
    }

    pub fn counter(&self, property_id: &str) -> Option<&EvidenceCounter> {
        self.counters.get(property_id)
    }

    pub fn interval(&self, property_id: &str) -> Option<&ConfidenceInterval> {
        self.intervals.get(property_id)
    }

    pub fn t2epsilon(&self, property_id: &str) -> Option<u64> {
        self.t2epsilon.get(property_id).copied().flatten()
    }

    pub fn state(&self) -> PropertyState {
        self.state
    }

    pub fn property_state(&self, property_id: &str) -> Option<PropertyState> {
        let spec = self.registration.payload.property(property_id)?;
        let ci = self.intervals.get(property_id)?;
        Some(if self.t() == 0 { PropertyState::Pending } else { statistics::property_state(ci, spec.epsilon) })
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    /// Terminal: CLEAN, DIRTY, or every item sampled while PENDING.
    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal() || self.exhausted
    }

    pub fn frontier(&self) -> u64 {
        self.frontier
    }

    fn expire(&mut self, now: Instant) {
        self.claims.retain(|_, c| c.expires > now);
    }

    fn free(&self, position: u64) -> bool {
        position >= self.frontier && !self.claims.contains_key(&position)
    }

    /// Lease the next unclaimed schedule position to `validator`.
    pub fn claim_next_index(&mut self, validator: &PublicKey, now: Instant) -> Result<Claim, ProtocolError> {
        let mut claims = self.claim_batch(validator, 1, now)?;
        Ok(claims.remove(0))
    }

    /// Lease a specific position; fails if it is held or already published.
    pub fn claim_position(&mut self, position: u64, validator: &PublicKey, now: Instant) -> Result<Claim, ProtocolError> {
        if self.is_terminal() {
            return Err(ProtocolError::AuditTerminal);
        }
        self.expire(now);
        if position >= self.schedule.population_size() {
            return Err(ProtocolError::ScheduleExhausted);
        }
        if !self.free(position) {
            return Err(ProtocolError::AlreadyClaimed(position));
        }
        let claim = Claim { position, index: self.schedule.index_at(position)?, validator: *validator, expires: now + self.lease };
        self.claims.insert(position, claim);
        Ok(claim)
    }

    /// Lease up to `k` consecutive positions starting at the first free one.
    pub fn claim_batch(&mut self, validator: &PublicKey, k: u64, now: Instant) -> Result<Vec<Claim>, ProtocolError> {
        if self.is_terminal() {
            return Err(ProtocolError::AuditTerminal);
        }
        self.expire(now);
        let n = self.schedule.population_size();
        let mut pos = self.frontier;
        while pos < n && !self.free(pos) {
            pos += 1;
        }
        if pos >= n {
            return Err(ProtocolError::ScheduleExhausted);
        }
        let mut out = Vec::new();
        while pos < n && (out.len() as u64) < k.max(1) && self.free(pos) {
            out.push(self.claim_position(pos, validator, now)?);
            pos += 1;
        }
        Ok(out)
    }

    /// Release leases without publishing.
    pub fn release(&mut self, claims: &[Claim]) {
        for c in claims {
            self.claims.remove(&c.position);
        }
    }

    /// Validator step: run every registered oracle on the claimed items.
    pub fn collect_evidence(
        &self,
        claims: &[Claim],
        dataset: &Dataset,
        oracles: &OracleRegistry,
        env: &ExecutionEnv,
        producer: PublicKey,
        workers: usize,
    ) -> Result<EvidencePack, ProtocolError> {
        let indices: Vec<u64> = claims.iter().map(|c| c.index).collect();
        run_oracles(&self.registration, self.rounds, &indices, dataset, oracles, env, producer, workers)
    }

    /// Validator step: store the pack and reference it on the ledger.
    /// `claims` must be the consecutive positions the pack covers.
    pub fn publish(
        &mut self,
        ledger: &mut Ledger,
        store: &Store,
        pack: &EvidencePack,
        claims: &[Claim],
        producer: &Keypair,
    ) -> Result<ContentAddress, ProtocolError> {
        let start = claims.first().map_or(self.frontier, |c| c.position);
        let address = publish_pack(ledger, store, pack, start, producer)?;
        self.release(claims);
        self.frontier = ledger.audit(&self.audit_id())?.claim_frontier();
        Ok(address)
    }

    /// Arbiter step: reproduce a published pack and, if it holds up, update
    /// the counters and intervals and append a co-signed attestation.
    pub fn submit_round(
        &mut self,
        ledger: &mut Ledger,
        ctx: &ReplayContext<'_>,
        pack: &EvidencePack,
        arbiters: &[&Keypair],
    ) -> Result<RoundOutcome, ProtocolError> {
        if self.is_terminal() {
            return Err(ProtocolError::AuditTerminal);
        }
        ctx.check_root(&self.registration.payload)?;
        pack.validate()?;
        let address = pack.address();
        let record = ledger.audit(&self.audit_id())?;
        let Some((_, published)) = record.evidence_refs.iter().find(|(_, r)| r.pack == address) else {
            return Err(LedgerError::UnknownPack(address.uri()).into());
        };
        let t = self.t();
        if published.start != t {
            return Err(ProtocolError::OutOfOrder { start: published.start, t });
        }
        for spec in &self.registration.payload.properties {
            if pack.oracle_digests.get(&spec.property_id) != Some(&spec.oracle_digest) {
                return Err(ProtocolError::DigestMismatch(spec.property_id.clone()));
            }
        }
        if pack.oracle_digests.len() != self.registration.payload.properties.len() || pack.audit_id != self.audit_id() {
            return Err(LedgerError::Inconsistent("pack does not belong to this audit".into()).into());
        }
        let end = t + pack.len() as u64;
        let expected = if end <= self.schedule.population_size() { self.schedule.segment(t, pack.len() as u64)? } else { Vec::new() };
        if expected != pack.indices {
            return Err(ProtocolError::MembershipViolation { start: t, end });
        }

        let replay = evidence::replay_pack(pack, ctx.dataset, ctx.oracles, ctx.env)?;
        if !replay.agrees() {
            return Err(challenge::reject_submission(ledger, ctx, self, pack, &replay, arbiters));
        }

        let mut next = self.clone();
        let mut properties = BTreeMap::new();
        let mut states = Vec::new();
        for spec in &self.registration.payload.properties {
            let pid = &spec.property_id;
            let counter = next.counters.get_mut(pid).expect("counter per property");
            for bit in &pack.bits[pid] {
                counter.record(*bit == 1);
            }
            let interval = attested_interval(counter.t(), counter.violations(), spec.delta)?;
            let state = statistics::property_state(&interval, spec.epsilon);
            let t2 = next.t2epsilon.get_mut(pid).expect("t2epsilon per property");
            if t2.is_none() && interval.upper <= spec.epsilon {
                *t2 = Some(counter.t());
            }
            properties.insert(
                pid.clone(),
                PropertyAttestation {
                    violations: counter.violations(),
                    lower: interval.lower,
                    upper: interval.upper,
                    state,
                    t2epsilon: *t2,
                },
            );
            next.intervals.insert(pid.clone(), interval);
            states.push(state);
        }
        next.state = statistics::audit_state(&states)?;
        next.exhausted = !next.state.is_terminal() && end == self.schedule.population_size();
        let payload = AttestationPayload {
            audit_id: self.audit_id(),
            round: self.rounds,
            t: end,
            properties,
            decision: next.state,
            exhausted: next.exhausted,
            pack: address,
            prev_attestation: self.last_attestation,
        };
        let signatures = sign_payload(&payload, arbiters)?;
        let position = ledger.append_attestation(payload, signatures)?;
        next.last_attestation = Some(position);
        next.rounds += 1;
        next.frontier = ledger.audit(&self.audit_id())?.claim_frontier();
        *self = next;
        Ok(RoundOutcome { attestation: position, t: end, state: self.state, exhausted: self.exhausted })
    }

    /// Arbiter step: attest every published pack that continues the chain,
    /// in order, until none is left or the audit terminates.
    pub fn attest_pending(
        &mut self,
        ledger: &mut Ledger,
        ctx: &ReplayContext<'_>,
        arbiters: &[&Keypair],
    ) -> Result<Vec<Result<RoundOutcome, ProtocolError>>, ProtocolError> {
        let mut outcomes = Vec::new();
        loop {
            if self.is_terminal() {
                break;
            }
            let record = ledger.audit(&self.audit_id())?;
            let t = self.t();
            let Some(address) = record.pending_refs().iter().find(|(_, r)| r.start == t).map(|(_, r)| r.pack) else {
                break;
            };
            let pack = ctx.store.get_pack(&address)?;
            let result = self.submit_round(ledger, ctx, &pack, arbiters);
            let stop = match &result {
                Ok(_) => false,
                Err(ProtocolError::ReplayDisagreement { .. }) => false,
                Err(_) => true,
            };
            outcomes.push(result);
            if stop {
                break;
            }
        }
        self.frontier = ledger.audit(&self.audit_id())?.claim_frontier();
        Ok(outcomes)
    }
}

/// Run each registered property's pinned oracle on each index, in parallel.
#[allow(clippy::too_many_arguments)]
pub fn run_oracles(
    registration: &AuditRegistration,
    round: u64,
    indices: &[u64],
    dataset: &Dataset,
    oracles: &OracleRegistry,
    env: &ExecutionEnv,
    producer: PublicKey,
    workers: usize,
) -> Result<EvidencePack, ProtocolError> {
    let specs = &registration.payload.properties;
    for spec in specs {
        oracles.get(&spec.oracle_digest)?;
    }
    let jobs: Vec<(usize, OracleDescriptor, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(j, spec)| {
            let d = OracleDescriptor {
                property_id: spec.property_id.clone(),
                oracle_digest: spec.oracle_digest,
                version: String::new(),
            };
            indices.iter().map(move |i| (j, d.clone(), *i))
        })
        .collect();
    let run = || -> Result<Vec<(bool, String)>, ProtocolError> {
        jobs.par_iter()
            .map(|(_, d, index)| {
                let item = dataset.item(*index)?;
                let bit = oracles.check_item(d, item, env)?;
                Ok((bit.violated, bit.log))
            })
            .collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run)?,
        Err(_) => run()?,
    };
    let mut properties: BTreeMap<String, PropertyEvidence> = BTreeMap::new();
    for ((j, _, _), (violated, log)) in jobs.iter().zip(results) {
        let spec = &specs[*j];
        let ev = properties.entry(spec.property_id.clone()).or_insert_with(|| PropertyEvidence {
            oracle_digest: spec.oracle_digest,
            bits: Vec::new(),
            logs: Vec::new(),
        });
        ev.bits.push(violated);
        ev.logs.push(log);
    }
    Ok(evidence::build_pack(registration.audit_id, round, indices.to_vec(), properties, producer)?)
}

/// Store a pack and append its signed reference to the ledger.
pub fn publish_pack(
    ledger: &mut Ledger,
    store: &Store,
    pack: &EvidencePack,
    start: u64,
    producer: &Keypair,
) -> Result<ContentAddress, ProtocolError> {
    let address = store.put_pack(pack)?;
    let payload = EvidenceRefPayload {
        audit_id: pack.audit_id,
        round: pack.round,
        start,
        count: pack.len() as u64,
        pack: address,
        producer: producer.public(),
    };
    let signatures = sign_payload(&payload, &[producer])?;
    ledger.publish_evidence(payload, signatures)?;
    Ok(address)
}

#[cfg(test)]
mod tests;
