//! Property oracles: deterministic, version-pinned checkers mapping one
//! dataset item to a violation bit.
//!
//! Every oracle is identified by the digest of its bundle (manifest plus
//! pinned resources). Errors are never folded into bits: a malformed item, a
//! missing oracle or an exceeded budget surfaces as [`OracleError`] and blocks
//! the round instead of counting toward the violation tally.

mod advisory;
mod builtin;
mod bundle;
mod exec;
mod license;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetItem;
use crate::digest::Digest;

pub use advisory::{compare_versions, Advisory, DependencyPin, VersionRange};
pub use builtin::{builtin_bundles, MirrorEntry, BUILTIN_PROPERTIES};
pub use bundle::{BundleManifest, OracleBundle, MANIFEST_FILE};
pub use exec::{copy_tree, run_shell, CommandOutcome};
pub use license::{resolve as resolve_license, LicenseVerdict};

/// Default wall-clock budget for command-running oracles.
pub const DEFAULT_BUDGET: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no oracle registered for digest {0}")]
    Unavailable(Digest),
    #[error("item {index} is malformed: {reason}")]
    ItemMalformed { index: u64, reason: String },
    #[error("oracle exceeded its {budget:?} budget")]
    Timeout { budget: Duration },
    #[error("oracle execution failed: {0}")]
    Execution(String),
    #[error("oracle environment: {0}")]
    Environment(String),
    #[error("oracle bundle: {0}")]
    Bundle(String),
}

impl OracleError {
    pub fn category(&self) -> &'static str {
        match self {
            OracleError::Unavailable(_) => "oracle-unavailable",
            OracleError::ItemMalformed { .. } => "item-malformed",
            OracleError::Timeout { .. } => "timeout",
            OracleError::Execution(_) => "oracle-execution",
            OracleError::Environment(_) => "oracle-environment",
            OracleError::Bundle(_) => "oracle-bundle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleDescriptor {
    pub property_id: String,
    pub oracle_digest: Digest,
    pub version: String,
}

/// Outcome of one oracle run. `duration` is informational and never digested.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationBit {
    pub violated: bool,
    pub log: String,
    pub duration: Duration,
}

impl ViolationBit {
    pub fn value(&self) -> u8 {
        u8::from(self.violated)
    }
}

/// What a checker reports before timing is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub violated: bool,
    pub log: String,
}

impl Verdict {
    pub fn pass(log: impl Into<String>) -> Self {
        Verdict { violated: false, log: log.into() }
    }

    pub fn fail(log: impl Into<String>) -> Self {
        Verdict { violated: true, log: log.into() }
    }
}

/// Pinned execution settings shared by every oracle invocation in an audit.
#[derive(Debug, Clone, Default)]
pub struct ExecutionEnv {
    /// Directory that `project_dir` item metadata is resolved against.
    pub fixtures_root: Option<PathBuf>,
    pub license_allowlist: BTreeSet<String>,
    /// Let `link_valid` fall back to live `git fetch` for pairs absent from the mirror.
    pub allow_network: bool,
    /// Overrides the bundle's own budget when set.
    pub budget: Option<Duration>,
}

impl ExecutionEnv {
    pub fn with_allowlist<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.license_allowlist = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_fixtures(mut self, root: impl Into<PathBuf>) -> Self {
        self.fixtures_root = Some(root.into());
        self
    }
}

pub trait PropertyOracle: Send + Sync {
    fn descriptor(&self) -> &OracleDescriptor;
    fn check(&self, item: &DatasetItem, env: &ExecutionEnv) -> Result<Verdict, OracleError>;
}

/// Content digest of an oracle bundle's bytes.
pub fn oracle_digest(bundle_bytes: &[u8]) -> Result<Digest, OracleError> {
    if bundle_bytes.is_empty() {
        return Err(OracleError::Bundle("empty bundle".into()));
    }
    Ok(Digest::of(bundle_bytes))
}

/// Descriptors of the five bundled oracles.
pub fn builtin_oracles() -> Vec<OracleDescriptor> {
    builtin_bundles().iter().map(OracleBundle::descriptor).collect()
}

/// Oracles addressable by digest.
#[derive(Clone, Default)]
pub struct OracleRegistry {
    by_digest: BTreeMap<Digest, Arc<dyn PropertyOracle>>,
}

impl fmt::Debug for OracleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.by_digest.values().map(|o| &o.descriptor().property_id))
            .finish()
    }
}

impl OracleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut reg = Self::new();
        for bundle in builtin_bundles() {
            reg.register(bundle.instantiate().expect("bundled oracles instantiate"));
        }
        reg
    }

    pub fn register(&mut self, oracle: Arc<dyn PropertyOracle>) -> OracleDescriptor {
        let d = oracle.descriptor().clone();
        self.by_digest.insert(d.oracle_digest, oracle);
        d
    }

    pub fn register_bundle(&mut self, bundle: OracleBundle) -> Result<OracleDescriptor, OracleError> {
        Ok(self.register(bundle.instantiate()?))
    }

    pub fn get(&self, digest: &Digest) -> Result<&Arc<dyn PropertyOracle>, OracleError> {
        self.by_digest.get(digest).ok_or(OracleError::Unavailable(*digest))
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.by_digest.contains_key(digest)
    }

    /// First registered descriptor for a property name.
    pub fn find_property(&self, property_id: &str) -> Option<OracleDescriptor> {
        self.by_digest
            .values()
            .map(|o| o.descriptor())
            .find(|d| d.property_id == property_id)
            .cloned()
    }

    pub fn descriptors(&self) -> Vec<OracleDescriptor> {
        self.by_digest.values().map(|o| o.descriptor().clone()).collect()
    }

    /// Run the oracle pinned by `descriptor` on `item`.
    pub fn check_item(
        &self,
        descriptor: &OracleDescriptor,
        item: &DatasetItem,
        env: &ExecutionEnv,
    ) -> Result<ViolationBit, OracleError> {
        let oracle = self.get(&descriptor.oracle_digest)?;
        if !item.hash_matches() {
            return Err(OracleError::ItemMalformed {
                index: item.index,
                reason: "content_hash does not match item record".into(),
            });
        }
        let started = Instant::now();
        let verdict = oracle.check(item, env)?;
        Ok(ViolationBit { violated: verdict.violated, log: verdict.log, duration: started.elapsed() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_builtins_with_stable_digests() {
        let a = builtin_oracles();
        let b = builtin_oracles();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let ids: BTreeSet<_> = a.iter().map(|d| d.property_id.as_str()).collect();
        let expected: BTreeSet<_> =
            ["buildability", "test_smoke", "link_valid", "dependency_health", "license_resolves"].into();
        assert_eq!(ids, expected);
        let digests: BTreeSet<_> = a.iter().map(|d| d.oracle_digest).collect();
        assert_eq!(digests.len(), 5);
    }

    #[test]
    fn digest_of_bundle_bytes() {
        let d = oracle_digest(b"bundle").unwrap();
        assert_eq!(d, oracle_digest(b"bundle").unwrap());
        assert_ne!(d, oracle_digest(b"bundlf").unwrap());
        assert_eq!(d.as_bytes().len(), 32);
        assert!(matches!(oracle_digest(b""), Err(OracleError::Bundle(_))));
    }

    #[test]
    fn unknown_digest_is_unavailable() {
        let reg = OracleRegistry::builtin();
        let ghost = OracleDescriptor {
            property_id: "buildability".into(),
            oracle_digest: Digest::of(b"ghost"),
            version: "0".into(),
        };
        let item = DatasetItem::new(0, "x", BTreeMap::new());
        let err = reg.check_item(&ghost, &item, &ExecutionEnv::default()).unwrap_err();
        assert_eq!(err.category(), "oracle-unavailable");
    }
}
