//! State directory layout, keys, and loading of shared inputs.

use std::fs;
use std::path::{Path, PathBuf};

use confcard_core::crypto::{Keypair, PublicKey};
use confcard_core::dataset::Dataset;
use confcard_core::digest::Digest;
use confcard_core::evidence::{ContentAddress, Store};
use confcard_core::ledger::{AuditRecord, Ledger};
use confcard_core::oracle::{copy_tree, OracleBundle, OracleRegistry};
use rand::RngCore;

use crate::error::CliError;

pub const DEFAULT_HOME: &str = ".confcard";
pub const SPONSOR: &str = "sponsor";
pub const VALIDATOR: &str = "validator";
pub const ARBITER_PREFIX: &str = "arbiter-";

/// Resolved locations of the ledger, store, keys and pinned oracle bundles.
pub struct Home {
    pub root: PathBuf,
    pub ledger: PathBuf,
    pub store: PathBuf,
    pub keys: PathBuf,
}

impl Home {
    pub fn resolve(home: Option<PathBuf>, ledger: Option<PathBuf>, store: Option<PathBuf>, keys: Option<PathBuf>) -> Self {
        let root = home.unwrap_or_else(|| PathBuf::from(DEFAULT_HOME));
        Home {
            ledger: ledger.unwrap_or_else(|| root.join("ledger.jsonl")),
            store: store.unwrap_or_else(|| root.join("store")),
            keys: keys.unwrap_or_else(|| root.join("keys")),
            root,
        }
    }

    pub fn open_ledger(&self) -> Result<Ledger, CliError> {
        Ok(Ledger::open(&self.ledger)?)
    }

    pub fn open_store(&self) -> Result<Store, CliError> {
        Ok(Store::open(&self.store)?)
    }

    fn oracle_dir(&self) -> PathBuf {
        self.root.join("oracles")
    }

    /// Built-in oracles plus every bundle pinned in this home.
    pub fn oracles(&self) -> Result<OracleRegistry, CliError> {
        let mut registry = OracleRegistry::builtin();
        if let Ok(entries) = fs::read_dir(self.oracle_dir()) {
            let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            dirs.sort();
            for dir in dirs {
                registry.register_bundle(OracleBundle::load_dir(&dir)?)?;
            }
        }
        Ok(registry)
    }

    /// Copy a bundle directory under its digest so later commands find it.
    pub fn pin_bundle(&self, dir: &Path) -> Result<OracleBundle, CliError> {
        let bundle = OracleBundle::load_dir(dir)?;
        let target = self.oracle_dir().join(bundle.digest().to_hex());
        if !target.exists() {
            fs::create_dir_all(&target)?;
            copy_tree(dir, &target)?;
        }
        Ok(OracleBundle::load_dir(&target)?)
    }

    fn key_path(&self, name: &str) -> PathBuf {
        self.keys.join(format!("{name}.key"))
    }

    pub fn load_key(&self, name: &str) -> Result<Keypair, CliError> {
        let path = self.key_path(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::new("missing-key", format!("{}: {e}", path.display())))?;
        Keypair::from_seed_hex(text.trim()).map_err(|e| CliError::new("bad-key", format!("{}: {e}", path.display())))
    }

    /// Create a key unless it exists. With `derive_from`, the key seed is
    /// SHA-256(derive_from || name) so runs are reproducible.
    pub fn ensure_key(&self, name: &str, derive_from: Option<&[u8]>) -> Result<(Keypair, bool), CliError> {
        let path = self.key_path(name);
        if path.exists() {
            return Ok((self.load_key(name)?, false));
        }
        let seed = match derive_from {
            Some(root) => *Digest::of_parts(&[root, name.as_bytes()]).as_bytes(),
            None => {
                let mut s = [0u8; 32];
                rand::rngs::OsRng.fill_bytes(&mut s);
                s
            }
        };
        let key = Keypair::from_seed(seed);
        fs::create_dir_all(&self.keys)?;
        fs::write(&path, format!("{}\n", key.seed_hex()))?;
        Ok((key, true))
    }

    /// Every `arbiter-*` key, sorted by name.
    pub fn arbiter_keys(&self) -> Result<Vec<(String, Keypair)>, CliError> {
        let mut names: Vec<String> = match fs::read_dir(&self.keys) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().map(String::from))
                .filter_map(|n| n.strip_suffix(".key").map(String::from))
                .filter(|n| n.starts_with(ARBITER_PREFIX))
                .collect(),
            Err(_) => Vec::new(),
        };
        names.sort();
        names.into_iter().map(|n| Ok((n.clone(), self.load_key(&n)?))).collect()
    }

    /// Local arbiter keys registered for this audit.
    pub fn audit_arbiters(&self, record: &AuditRecord) -> Result<Vec<Keypair>, CliError> {
        let registered: Vec<PublicKey> = record.registration.payload.arbiters.clone();
        let keys: Vec<Keypair> = self
            .arbiter_keys()?
            .into_iter()
            .map(|(_, k)| k)
            .filter(|k| registered.contains(&k.public()))
            .collect();
        if keys.len() < record.registration.payload.quorum as usize {
            return Err(CliError::new(
                "quorum-not-met",
                format!("{} local arbiter keys, quorum is {}", keys.len(), record.registration.payload.quorum),
            ));
        }
        Ok(keys)
    }
}

/// Pick the audit named by `--audit-id`, or the most recently registered one.
pub fn select_audit<'a>(ledger: &'a Ledger, audit_id: Option<&str>) -> Result<&'a AuditRecord, CliError> {
    match audit_id {
        Some(hex) => {
            let id = Digest::from_hex(hex).map_err(|e| CliError::new("usage", format!("--audit-id: {e}")))?;
            Ok(ledger.audit(&id)?)
        }
        None => ledger
            .audits()
            .max_by_key(|a| a.registration.created_entry)
            .ok_or_else(|| CliError::new("unknown-audit", "no audit registered in this ledger")),
    }
}

/// The dataset from `--manifest`, or the copy stored at registration.
pub fn load_dataset(manifest: Option<&Path>, store: &Store, root_hash: &Digest) -> Result<Dataset, CliError> {
    let dataset = match manifest {
        Some(path) => Dataset::load(path)?,
        None => Dataset::from_bytes(&store.get_bytes(&ContentAddress { digest: *root_hash })?)?,
    };
    if dataset.root_hash() != *root_hash {
        return Err(CliError::new(
            "root-mismatch",
            format!("dataset root {} does not match registered root {root_hash}", dataset.root_hash()),
        ));
    }
    Ok(dataset)
}

impl Home {
    fn fixtures_note(&self, root_hash: &Digest) -> PathBuf {
        self.root.join("datasets").join(format!("{}.fixtures", root_hash.to_hex()))
    }

    /// Remember where a registered manifest lives, for commands run without `--manifest`.
    pub fn remember_fixtures(&self, root_hash: &Digest, manifest: &Path) -> Result<(), CliError> {
        let dir = fs::canonicalize(manifest)?.parent().map(Path::to_path_buf).unwrap_or_default();
        let note = self.fixtures_note(root_hash);
        fs::create_dir_all(note.parent().expect("has parent"))?;
        fs::write(note, dir.to_string_lossy().as_bytes())?;
        Ok(())
    }

    /// Directory that `project_dir` metadata resolves against: `--fixtures`,
    /// else the `--manifest` directory, else the one noted at registration.
    pub fn fixtures_root(&self, fixtures: Option<&Path>, manifest: Option<&Path>, root_hash: &Digest) -> Option<PathBuf> {
        if let Some(f) = fixtures {
            return Some(f.to_path_buf());
        }
        if let Some(m) = manifest {
            return Some(match m.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            });
        }
        fs::read_to_string(self.fixtures_note(root_hash)).ok().map(PathBuf::from)
    }
}

/// `--beacon` accepts 64 hex characters or a file. A file holding hex is
/// read as that value; any other file content is hashed.
pub fn parse_beacon(arg: &str) -> Result<Digest, CliError> {
    if let Ok(d) = Digest::from_hex(arg.trim()) {
        return Ok(d);
    }
    let bytes = fs::read(arg).map_err(|e| CliError::new("usage", format!("--beacon {arg}: not hex and not readable: {e}")))?;
    match std::str::from_utf8(&bytes).ok().map(str::trim).map(Digest::from_hex) {
        Some(Ok(d)) => Ok(d),
        _ => Ok(Digest::of(&bytes)),
    }
}
