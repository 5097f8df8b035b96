//! Evidence packs and the local content-addressed store.
//!
//! A pack bundles the sampled indices of one round with every property's
//! bits, the pinned oracle digests and the per-item logs. Its canonical JSON
//! encoding is the only thing that gets hashed; wall-clock data never enters
//! it. The store keeps immutable blobs under `<root>/<aa>/<digest-hex>` and
//! re-hashes on every read.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, CanonicalError};
use crate::crypto::PublicKey;
use crate::dataset::{Dataset, DatasetError};
use crate::digest::Digest;
use crate::oracle::{ExecutionEnv, OracleDescriptor, OracleError, OracleRegistry};

pub const URI_SCHEME: &str = "store:";

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("a round must sample at least one item")]
    EmptyIndices,
    #[error("property {property_id}: {what} has {got} entries, expected {expected}")]
    Alignment { property_id: String, what: &'static str, got: usize, expected: usize },
    #[error("property {0} has bits but no oracle digest")]
    MissingDigest(String),
    #[error("property {property_id}: bit value {value} is not 0 or 1")]
    InvalidBit { property_id: String, value: u8 },
    #[error("pack lists index {0} more than once")]
    DuplicateIndex(u64),
    #[error("no object stored at {0}")]
    NotFound(ContentAddress),
    #[error("stored bytes hash to {actual}, expected {expected}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("malformed address `{0}`")]
    BadAddress(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Encoding(#[from] CanonicalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl EvidenceError {
    pub fn category(&self) -> &'static str {
        match self {
            EvidenceError::EmptyIndices
            | EvidenceError::Alignment { .. }
            | EvidenceError::MissingDigest(_)
            | EvidenceError::InvalidBit { .. }
            | EvidenceError::DuplicateIndex(_) => "alignment",
            EvidenceError::NotFound(_) => "not-found",
            EvidenceError::DigestMismatch { .. } => "digest-mismatch",
            EvidenceError::BadAddress(_) => "bad-address",
            EvidenceError::Io(_) => "io",
            EvidenceError::Encoding(_) => "encoding",
            EvidenceError::Oracle(e) => e.category(),
            EvidenceError::Dataset(e) => e.category(),
        }
    }
}

/// Where a stored object lives and what it must hash to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentAddress {
    pub digest: Digest,
}

impl ContentAddress {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ContentAddress { digest: Digest::of(bytes) }
    }

    pub fn uri(&self) -> String {
        format!("{URI_SCHEME}{}", self.digest.to_hex())
    }

    /// Accepts `store:<hex>` or a bare hex digest.
    pub fn parse(s: &str) -> Result<Self, EvidenceError> {
        let hexpart = s.trim().strip_prefix(URI_SCHEME).unwrap_or(s.trim());
        Digest::from_hex(hexpart)
            .map(|digest| ContentAddress { digest })
            .map_err(|_| EvidenceError::BadAddress(s.to_string()))
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.uri())
    }
}

impl FromStr for ContentAddress {
    type Err = EvidenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for ContentAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.uri())
    }
}

impl<'de> Deserialize<'de> for ContentAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentAddress::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// One property's contribution to a round, aligned with the round's indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyEvidence {
    pub oracle_digest: Digest,
    pub bits: Vec<bool>,
    pub logs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePack {
    pub audit_id: Digest,
    pub round: u64,
    pub indices: Vec<u64>,
    pub bits: BTreeMap<String, Vec<u8>>,
    pub oracle_digests: BTreeMap<String, Digest>,
    /// property id -> decimal item index -> log text.
    pub logs: BTreeMap<String, BTreeMap<String, String>>,
    pub producer: PublicKey,
}

/// Assemble a pack, checking every alignment invariant.
pub fn build_pack(
    audit_id: Digest,
    round: u64,
    indices: Vec<u64>,
    properties: BTreeMap<String, PropertyEvidence>,
    producer: PublicKey,
) -> Result<EvidencePack, EvidenceError> {
    let mut bits = BTreeMap::new();
    let mut oracle_digests = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (pid, ev) in properties {
        if ev.logs.len() != indices.len() {
            return Err(EvidenceError::Alignment {
                property_id: pid,
                what: "logs",
                got: ev.logs.len(),
                expected: indices.len(),
            });
        }
        let per_item: BTreeMap<String, String> =
            indices.iter().zip(ev.logs).map(|(i, l)| (i.to_string(), l)).collect();
        bits.insert(pid.clone(), ev.bits.iter().map(|b| u8::from(*b)).collect());
        oracle_digests.insert(pid.clone(), ev.oracle_digest);
        logs.insert(pid, per_item);
    }
    let pack = EvidencePack { audit_id, round, indices, bits, oracle_digests, logs, producer };
    pack.validate()?;
    Ok(pack)
}

impl EvidencePack {
    pub fn validate(&self) -> Result<(), EvidenceError> {
        if self.indices.is_empty() {
            return Err(EvidenceError::EmptyIndices);
        }
        let mut seen = std::collections::HashSet::new();
        for i in &self.indices {
            if !seen.insert(*i) {
                return Err(EvidenceError::DuplicateIndex(*i));
            }
        }
        for (pid, bits) in &self.bits {
            if bits.len() != self.indices.len() {
                return Err(EvidenceError::Alignment {
                    property_id: pid.clone(),
                    what: "bits",
                    got: bits.len(),
                    expected: self.indices.len(),
                });
            }
            if let Some(&value) = bits.iter().find(|b| **b > 1) {
                return Err(EvidenceError::InvalidBit { property_id: pid.clone(), value });
            }
            if !self.oracle_digests.contains_key(pid) {
                return Err(EvidenceError::MissingDigest(pid.clone()));
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("packs contain no floats")
    }

    pub fn address(&self) -> ContentAddress {
        ContentAddress::of_bytes(&self.canonical_bytes())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn violations(&self, property_id: &str) -> u64 {
        self.bits
            .get(property_id)
            .map(|b| b.iter().map(|x| u64::from(*x)).sum())
            .unwrap_or(0)
    }

    pub fn log(&self, property_id: &str, index: u64) -> Option<&str> {
        self.logs.get(property_id)?.get(&index.to_string()).map(String::as_str)
    }
}

/// Local content-addressed blob store.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EvidenceError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(&hex[..2]).join(hex)
    }

    pub fn contains(&self, address: &ContentAddress) -> bool {
        self.path_for(&address.digest).is_file()
    }

    /// Write `bytes` under their digest. Objects are immutable, so an
    /// existing file is left alone.
    pub fn put_bytes(&self, bytes: &[u8]) -> Result<ContentAddress, EvidenceError> {
        let address = ContentAddress::of_bytes(bytes);
        let path = self.path_for(&address.digest);
        if path.is_file() {
            return Ok(address);
        }
        let dir = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| EvidenceError::Io(e.error))?;
        Ok(address)
    }

    /// Read and re-hash.
    pub fn get_bytes(&self, address: &ContentAddress) -> Result<Vec<u8>, EvidenceError> {
        let path = self.path_for(&address.digest);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(EvidenceError::NotFound(*address)),
            Err(e) => return Err(e.into()),
        };
        let actual = Digest::of(&bytes);
        if actual != address.digest {
            return Err(EvidenceError::DigestMismatch { expected: address.digest, actual });
        }
        Ok(bytes)
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<ContentAddress, EvidenceError> {
        self.put_bytes(&canonical::to_canonical_bytes(value)?)
    }

    pub fn get_json<T: DeserializeOwned>(&self, address: &ContentAddress) -> Result<T, EvidenceError> {
        Ok(canonical::from_slice(&self.get_bytes(address)?)?)
    }

    pub fn put_pack(&self, pack: &EvidencePack) -> Result<ContentAddress, EvidenceError> {
        pack.validate()?;
        self.put_bytes(&pack.canonical_bytes())
    }

    pub fn get_pack(&self, address: &ContentAddress) -> Result<EvidencePack, EvidenceError> {
        let pack: EvidencePack = self.get_json(address)?;
        pack.validate()?;
        Ok(pack)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub property_id: String,
    pub index: u64,
    pub claimed: u8,
    pub recomputed: u8,
}

impl ReplayEntry {
    pub fn agrees(&self) -> bool {
        self.claimed == self.recomputed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplayReport {
    pub entries: Vec<ReplayEntry>,
    /// Logs as recomputed by the replaying party, same layout as the pack.
    pub recomputed_logs: BTreeMap<String, BTreeMap<String, String>>,
}

impl ReplayReport {
    pub fn agrees(&self) -> bool {
        self.entries.iter().all(ReplayEntry::agrees)
    }

    pub fn discrepancies(&self) -> Vec<&ReplayEntry> {
        self.entries.iter().filter(|e| !e.agrees()).collect()
    }
}

/// Re-run every pinned oracle on every sampled item and compare bits.
pub fn replay_pack(
    pack: &EvidencePack,
    dataset: &Dataset,
    oracles: &OracleRegistry,
    env: &ExecutionEnv,
) -> Result<ReplayReport, EvidenceError> {
    pack.validate()?;
    let mut jobs = Vec::new();
    for (pid, bits) in &pack.bits {
        let digest = pack.oracle_digests[pid];
        oracles.get(&digest)?;
        let descriptor = OracleDescriptor { property_id: pid.clone(), oracle_digest: digest, version: String::new() };
        for (pos, &index) in pack.indices.iter().enumerate() {
            dataset.item(index)?;
            jobs.push((descriptor.clone(), index, bits[pos]));
        }
    }
    let results: Vec<Result<(ReplayEntry, String), EvidenceError>> = jobs
        .par_iter()
        .map(|(descriptor, index, claimed)| {
            let item = dataset.item(*index)?;
            let bit = oracles.check_item(descriptor, item, env)?;
            Ok((
                ReplayEntry {
                    property_id: descriptor.property_id.clone(),
                    index: *index,
                    claimed: *claimed,
                    recomputed: bit.value(),
                },
                bit.log,
            ))
        })
        .collect();
    let mut report = ReplayReport::default();
    for r in results {
        let (entry, log) = r?;
        report
            .recomputed_logs
            .entry(entry.property_id.clone())
            .or_default()
            .insert(entry.index.to_string(), log);
        report.entries.push(entry);
    }
    Ok(report)
}
