//! Append-only, hash-chained audit log.
//!
//! One canonical-JSON entry per line. `prev_hash` of entry `k` is the
//! SHA-256 of line `k - 1` exactly as written (no trailing newline); entry 0
//! points at the all-zero digest. Signatures are Ed25519 over the canonical
//! bytes of the entry's payload. The chain authenticates prefixes only;
//! truncation is detectable only against an exported head.

mod audit;

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{self, CanonicalError};
use crate::crypto::{Keypair, SignatureRecord};
use crate::digest::Digest;

pub use audit::{
    AttestationPayload, AuditRecord, AuditRegistration, CardRefPayload, ChallengeOutcome, ChallengePayload,
    ChallengeTarget, EvidenceRefPayload, PropertyAttestation, PropertySpec, RegistrationPayload,
    ResolutionPayload, SeedLock, SeedLockPayload,
};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Encoding(#[from] CanonicalError),
    #[error("ledger chain is broken at entry {position}: {reason}")]
    Corrupt { position: u64, reason: String },
    #[error("an open audit already covers root hash {0}")]
    DuplicateRootHash(Digest),
    #[error("property {property_id}: {reason}")]
    MalformedProperty { property_id: String, reason: String },
    #[error("registration: {0}")]
    MalformedRegistration(String),
    #[error("unknown audit {0}")]
    UnknownAudit(Digest),
    #[error("seed for audit {0} is already locked")]
    AlreadyLocked(Digest),
    #[error("seed for audit {0} is not locked yet")]
    SeedNotLocked(Digest),
    #[error("signature check failed: {0}")]
    BadSignature(String),
    #[error("{got} valid arbiter signatures, quorum is {need}")]
    QuorumNotMet { got: usize, need: usize },
    #[error("attested t = {t} does not exceed previous t = {previous}")]
    StaleT { t: u64, previous: u64 },
    #[error("audit {0} has reached a terminal decision")]
    AuditTerminal(Digest),
    #[error("no attestation at t = {0}")]
    UnknownAttestation(u64),
    #[error("no challenge at ledger position {0}")]
    UnknownChallenge(u64),
    #[error("challenge at position {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("schedule positions {start}..{end} are already covered by a published pack")]
    AlreadyClaimed { start: u64, end: u64 },
    #[error("pack {0} has not been published for this audit")]
    UnknownPack(String),
    #[error("inconsistent entry: {0}")]
    Inconsistent(String),
}

impl LedgerError {
    pub fn category(&self) -> &'static str {
        match self {
            LedgerError::Io(_) => "io",
            LedgerError::Encoding(_) => "encoding",
            LedgerError::Corrupt { .. } => "corrupt-ledger",
            LedgerError::DuplicateRootHash(_) => "duplicate-root-hash",
            LedgerError::MalformedProperty { .. } => "malformed-property",
            LedgerError::MalformedRegistration(_) => "malformed-registration",
            LedgerError::UnknownAudit(_) => "unknown-audit",
            LedgerError::AlreadyLocked(_) => "already-locked",
            LedgerError::SeedNotLocked(_) => "seed-not-locked",
            LedgerError::BadSignature(_) => "bad-signature",
            LedgerError::QuorumNotMet { .. } => "quorum-not-met",
            LedgerError::StaleT { .. } => "stale-t",
            LedgerError::AuditTerminal(_) => "audit-terminal",
            LedgerError::UnknownAttestation(_) => "unknown-attestation",
            LedgerError::UnknownChallenge(_) => "unknown-challenge",
            LedgerError::AlreadyResolved(_) => "already-resolved",
            LedgerError::AlreadyClaimed { .. } => "already-claimed",
            LedgerError::UnknownPack(_) => "unknown-pack",
            LedgerError::Inconsistent(_) => "inconsistent-entry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Register,
    SeedLock,
    EvidenceRef,
    Attestation,
    Challenge,
    Resolution,
    CardRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub position: u64,
    pub prev_hash: Digest,
    pub kind: EntryKind,
    pub payload: Value,
    pub signatures: Vec<SignatureRecord>,
}

impl LedgerEntry {
    pub fn payload_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&self.payload).expect("payloads are float-free")
    }

    pub fn payload_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, LedgerError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| LedgerError::Inconsistent(format!("entry {} payload: {e}", self.position)))
    }

    pub fn signatures_valid(&self) -> bool {
        let bytes = self.payload_bytes();
        self.signatures.iter().all(|s| s.verify(&bytes))
    }
}

/// Canonical payload bytes for signing.
pub fn payload_bytes<T: Serialize>(payload: &T) -> Result<Vec<u8>, LedgerError> {
    Ok(canonical::to_canonical_bytes(payload)?)
}

/// Sign a payload with each of `signers`.
pub fn sign_payload<T: Serialize>(payload: &T, signers: &[&Keypair]) -> Result<Vec<SignatureRecord>, LedgerError> {
    let bytes = payload_bytes(payload)?;
    Ok(signers.iter().map(|k| k.sign(&bytes)).collect())
}

/// Result of walking a ledger file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainReport {
    pub valid: bool,
    /// Entries that verified before the first break.
    pub verified_entries: u64,
    pub first_broken: Option<u64>,
    pub reason: Option<String>,
    /// Digest of the last verified line; the all-zero digest for an empty log.
    pub head: Digest,
}

struct ParsedLine {
    entry: LedgerEntry,
    line_hash: Digest,
}

fn check_line(position: u64, line: &[u8], expected_prev: &Digest) -> Result<ParsedLine, String> {
    if !canonical::is_canonical(line) {
        return Err("line is not canonical JSON".into());
    }
    let entry: LedgerEntry = serde_json::from_slice(line).map_err(|e| format!("unparseable entry: {e}"))?;
    if entry.position != position {
        return Err(format!("position field {} out of sequence", entry.position));
    }
    if entry.prev_hash != *expected_prev {
        return Err("prev_hash does not match previous line".into());
    }
    if !entry.signatures_valid() {
        return Err("signature does not verify".into());
    }
    Ok(ParsedLine { entry, line_hash: Digest::of(line) })
}

fn split_lines(bytes: &[u8]) -> Vec<&[u8]> {
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines
}

/// Walk raw ledger bytes, stopping at the first broken entry.
pub fn verify_chain_bytes(bytes: &[u8]) -> ChainReport {
    let mut head = Digest::ZERO;
    for (k, line) in split_lines(bytes).into_iter().enumerate() {
        match check_line(k as u64, line, &head) {
            Ok(parsed) => head = parsed.line_hash,
            Err(reason) => {
                return ChainReport {
                    valid: false,
                    verified_entries: k as u64,
                    first_broken: Some(k as u64),
                    reason: Some(reason),
                    head,
                }
            }
        }
    }
    let n = split_lines(bytes).len() as u64;
    ChainReport { valid: true, verified_entries: n, first_broken: None, reason: None, head }
}

/// Verify a ledger file. A missing file is an empty, valid ledger.
pub fn verify_chain(path: impl AsRef<Path>) -> Result<ChainReport, LedgerError> {
    match std::fs::read(path.as_ref()) {
        Ok(bytes) => Ok(verify_chain_bytes(&bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(verify_chain_bytes(&[])),
        Err(e) => Err(e.into()),
    }
}

/// A ledger file plus the audit index derived from it.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    entries: Vec<LedgerEntry>,
    head: Digest,
    /// Bytes of the file already folded into `entries`.
    consumed: u64,
    index: audit::LedgerIndex,
}

impl Ledger {
    /// Open (creating if absent) and fully verify a ledger file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        let mut ledger = Ledger {
            path,
            entries: Vec::new(),
            head: Digest::ZERO,
            consumed: 0,
            index: audit::LedgerIndex::default(),
        };
        ledger.refresh()?;
        Ok(ledger)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, position: u64) -> Option<&LedgerEntry> {
        usize::try_from(position).ok().and_then(|p| self.entries.get(p))
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest of the last line; publish it out-of-band to pin the log length.
    pub fn head(&self) -> Digest {
        self.head
    }

    /// Fold in entries appended by other writers since the last read.
    pub fn refresh(&mut self) -> Result<(), LedgerError> {
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.consumed))?;
        let mut tail = Vec::new();
        f.read_to_end(&mut tail)?;
        let complete = match tail.iter().rposition(|b| *b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        for line in split_lines(&tail[..complete]) {
            let position = self.entries.len() as u64;
            let parsed = check_line(position, line, &self.head)
                .map_err(|reason| LedgerError::Corrupt { position, reason })?;
            self.index
                .apply(&parsed.entry)
                .map_err(|e| LedgerError::Corrupt { position, reason: e.to_string() })?;
            self.head = parsed.line_hash;
            self.entries.push(parsed.entry);
        }
        if complete < tail.len() {
            return Err(LedgerError::Corrupt {
                position: self.entries.len() as u64,
                reason: "trailing partial line".into(),
            });
        }
        self.consumed += complete as u64;
        Ok(())
    }

    /// Lock the file, catch up with other writers, let `build` validate
    /// against the fresh index and produce the entry, then append it.
    fn transact<F>(&mut self, build: F) -> Result<&LedgerEntry, LedgerError>
    where
        F: FnOnce(&audit::LedgerIndex, u64) -> Result<(EntryKind, Value, Vec<SignatureRecord>), LedgerError>,
    {
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(self.lock_path())?;
        lock.lock()?;
        self.refresh()?;
        let (kind, payload, signatures) = build(&self.index, self.len())?;
        let entry = LedgerEntry { position: self.len(), prev_hash: self.head, kind, payload, signatures };
        let mut probe = self.index.clone();
        probe.apply(&entry)?;
        let line = canonical::to_canonical_bytes(&entry)?;
        let mut buf = line.clone();
        buf.push(b'\n');
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(&buf)?;
        f.sync_data()?;
        drop(lock);
        self.index = probe;
        self.head = Digest::of(&line);
        self.consumed += buf.len() as u64;
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    fn lock_path(&self) -> PathBuf {
        let mut p = self.path.clone().into_os_string();
        p.push(".lock");
        PathBuf::from(p)
    }
}
