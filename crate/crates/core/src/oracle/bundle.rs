//! Oracle bundles: a manifest plus pinned resource files, hashed together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::builtin;
use super::{oracle_digest, OracleDescriptor, OracleError, PropertyOracle};
use crate::canonical;
use crate::digest::Digest;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub property_id: String,
    pub version: String,
    /// `builtin:<property>` or a shell command run from the bundle directory.
    pub entrypoint: String,
    pub budget_seconds: u64,
}

#[derive(Debug, Clone)]
pub struct OracleBundle {
    pub manifest: BundleManifest,
    pub resources: BTreeMap<String, Vec<u8>>,
    /// On-disk location, for command entrypoints.
    pub root: Option<PathBuf>,
}

#[derive(Serialize)]
struct BundleImage<'a> {
    manifest: &'a BundleManifest,
    resources: BTreeMap<&'a str, Digest>,
}

impl OracleBundle {
    pub fn new(manifest: BundleManifest) -> Self {
        OracleBundle { manifest, resources: BTreeMap::new(), root: None }
    }

    pub fn with_resource(mut self, name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        self.resources.insert(name.to_string(), bytes.into());
        self
    }

    /// The digested image: canonical manifest plus a digest per resource.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let image = BundleImage {
            manifest: &self.manifest,
            resources: self.resources.iter().map(|(k, v)| (k.as_str(), Digest::of(v))).collect(),
        };
        canonical::to_canonical_bytes(&image).expect("bundle image has no floats")
    }

    pub fn digest(&self) -> Digest {
        oracle_digest(&self.canonical_bytes()).expect("bundle image is never empty")
    }

    pub fn descriptor(&self) -> OracleDescriptor {
        OracleDescriptor {
            property_id: self.manifest.property_id.clone(),
            oracle_digest: self.digest(),
            version: self.manifest.version.clone(),
        }
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs(self.manifest.budget_seconds)
    }

    /// Read `manifest.json` and every other regular file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, OracleError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| OracleError::Bundle(format!("{}: {e}", dir.display()));
        let manifest: BundleManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).map_err(io)?)
            .map_err(|e| OracleError::Bundle(format!("manifest: {e}")))?;
        let mut resources = BTreeMap::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let entry = entry.map_err(io)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_FILE || !entry.file_type().map_err(io)?.is_file() {
                continue;
            }
            resources.insert(name, std::fs::read(entry.path()).map_err(io)?);
        }
        Ok(OracleBundle { manifest, resources, root: Some(dir.to_path_buf()) })
    }

    pub fn resource(&self, name: &str) -> Result<&[u8], OracleError> {
        self.resources
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| OracleError::Bundle(format!("missing resource {name}")))
    }

    pub fn instantiate(self) -> Result<Arc<dyn PropertyOracle>, OracleError> {
        match self.manifest.entrypoint.strip_prefix("builtin:") {
            Some(kind) => builtin::instantiate(kind, &self),
            None => Ok(Arc::new(builtin::CommandOracle::new(self)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> BundleManifest {
        BundleManifest {
            property_id: "custom".into(),
            version: "1".into(),
            entrypoint: "sh check.sh".into(),
            budget_seconds: 5,
        }
    }

    #[test]
    fn digest_covers_resources() {
        let a = OracleBundle::new(manifest()).with_resource("check.sh", "exit 0");
        let b = OracleBundle::new(manifest()).with_resource("check.sh", "exit 1");
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), OracleBundle::new(manifest()).with_resource("check.sh", "exit 0").digest());
    }

    #[test]
    fn load_dir_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest()).unwrap()).unwrap();
        std::fs::write(dir.path().join("check.sh"), "exit 0").unwrap();
        let loaded = OracleBundle::load_dir(dir.path()).unwrap();
        let mem = OracleBundle::new(manifest()).with_resource("check.sh", "exit 0");
        assert_eq!(loaded.digest(), mem.digest());
    }
}
