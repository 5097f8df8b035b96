//! The five bundled oracles and the generic command oracle.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use super::advisory::{self, Advisory, DependencyPin};
use super::bundle::{BundleManifest, OracleBundle};
use super::exec::{copy_tree, run_shell};
use super::license;
use super::{ExecutionEnv, OracleDescriptor, OracleError, PropertyOracle, Verdict, DEFAULT_BUDGET};
use crate::canonical;
use crate::dataset::DatasetItem;

pub const BUILTIN_PROPERTIES: [&str; 5] =
    ["buildability", "test_smoke", "link_valid", "dependency_health", "license_resolves"];

const BUILTIN_VERSION: &str = "1.0.0";
const MIRROR_JSON: &[u8] = include_bytes!("../../assets/mirror.json");
const ADVISORIES_JSON: &[u8] = include_bytes!("../../assets/advisories.json");
const SPDX_JSON: &[u8] = include_bytes!("../../assets/spdx.json");

/// One record of the offline repository mirror.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorEntry {
    pub repo: String,
    pub commit: String,
    pub exists: bool,
}

pub fn builtin_bundles() -> Vec<OracleBundle> {
    BUILTIN_PROPERTIES
        .iter()
        .map(|&id| {
            let bundle = OracleBundle::new(BundleManifest {
                property_id: id.to_string(),
                version: BUILTIN_VERSION.to_string(),
                entrypoint: format!("builtin:{id}"),
                budget_seconds: DEFAULT_BUDGET.as_secs(),
            });
            match id {
                "link_valid" => bundle.with_resource("mirror.json", MIRROR_JSON),
                "dependency_health" => bundle.with_resource("advisories.json", ADVISORIES_JSON),
                "license_resolves" => bundle.with_resource("spdx.json", SPDX_JSON),
                _ => bundle,
            }
        })
        .collect()
}

pub(super) fn instantiate(kind: &str, bundle: &OracleBundle) -> Result<Arc<dyn PropertyOracle>, OracleError> {
    let descriptor = bundle.descriptor();
    let budget = bundle.budget();
    let parse = |name: &str| -> Result<serde_json::Value, OracleError> {
        serde_json::from_slice(bundle.resource(name)?).map_err(|e| OracleError::Bundle(format!("{name}: {e}")))
    };
    Ok(match kind {
        "buildability" => Arc::new(CommandProperty { descriptor, budget, kind: CommandKind::Build }),
        "test_smoke" => Arc::new(CommandProperty { descriptor, budget, kind: CommandKind::TestSmoke }),
        "link_valid" => {
            let mirror: Vec<MirrorEntry> = serde_json::from_value(parse("mirror.json")?)
                .map_err(|e| OracleError::Bundle(format!("mirror.json: {e}")))?;
            Arc::new(LinkValid { descriptor, budget, mirror })
        }
        "dependency_health" => {
            let advisories: Vec<Advisory> = serde_json::from_value(parse("advisories.json")?)
                .map_err(|e| OracleError::Bundle(format!("advisories.json: {e}")))?;
            for a in &advisories {
                advisory::VersionRange::parse(&a.affected)
                    .map_err(|e| OracleError::Bundle(format!("advisory {}: {e}", a.advisory_id)))?;
            }
            Arc::new(DependencyHealth { descriptor, advisories })
        }
        "license_resolves" => {
            let known: BTreeSet<String> = serde_json::from_value(parse("spdx.json")?)
                .map_err(|e| OracleError::Bundle(format!("spdx.json: {e}")))?;
            Arc::new(LicenseResolves { descriptor, known })
        }
        other => return Err(OracleError::Bundle(format!("unknown builtin oracle `{other}`"))),
    })
}

fn required<'a>(item: &'a DatasetItem, key: &str) -> Result<&'a str, OracleError> {
    match item.meta(key) {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(OracleError::ItemMalformed { index: item.index, reason: format!("missing `{key}` metadata") }),
    }
}

fn effective_budget(env: &ExecutionEnv, own: Duration) -> Duration {
    env.budget.unwrap_or(own)
}

/// Fresh working directory holding a copy of the item's fixture project, if any.
fn materialize(item: &DatasetItem, env: &ExecutionEnv) -> Result<TempDir, OracleError> {
    let work = tempfile::tempdir().map_err(|e| OracleError::Environment(format!("tempdir: {e}")))?;
    if let Some(rel) = item.meta("project_dir").filter(|s| !s.is_empty()) {
        let root = env.fixtures_root.as_deref().ok_or_else(|| {
            OracleError::Environment(format!("item {} needs a fixtures root for `{rel}`", item.index))
        })?;
        let src = root.join(rel);
        if !src.is_dir() {
            return Err(OracleError::Environment(format!("fixture project {} not found", src.display())));
        }
        copy_tree(&src, work.path()).map_err(|e| OracleError::Environment(format!("materialize: {e}")))?;
    }
    Ok(work)
}

#[derive(Debug, Clone, Copy)]
enum CommandKind {
    Build,
    TestSmoke,
}

struct CommandProperty {
    descriptor: OracleDescriptor,
    budget: Duration,
    kind: CommandKind,
}

impl PropertyOracle for CommandProperty {
    fn descriptor(&self) -> &OracleDescriptor {
        &self.descriptor
    }

    fn check(&self, item: &DatasetItem, env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let command = match self.kind {
            CommandKind::Build => required(item, "build_command")?,
            CommandKind::TestSmoke => match item.meta("test_command").map(str::trim) {
                Some(cmd) if !cmd.is_empty() => cmd,
                _ => return Ok(Verdict::pass("no tests declared")),
            },
        };
        let work = materialize(item, env)?;
        let outcome = run_shell(command, work.path(), effective_budget(env, self.budget), None)?;
        let log = outcome.transcript();
        Ok(if outcome.success() { Verdict::pass(log) } else { Verdict::fail(log) })
    }
}

struct LinkValid {
    descriptor: OracleDescriptor,
    budget: Duration,
    mirror: Vec<MirrorEntry>,
}

impl LinkValid {
    fn live_probe(&self, repo: &str, commit: &str, env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let work = tempfile::tempdir().map_err(|e| OracleError::Environment(format!("tempdir: {e}")))?;
        let quote = |s: &str| format!("'{}'", s.replace('\'', r"'\''"));
        let cmd = format!(
            "git init -q probe && git -C probe fetch -q --depth 1 {} {}",
            quote(repo),
            quote(commit)
        );
        let outcome = run_shell(&cmd, work.path(), effective_budget(env, self.budget), None)?;
        let log = format!("live probe: {}", outcome.transcript());
        Ok(if outcome.success() { Verdict::pass(log) } else { Verdict::fail(log) })
    }
}

impl PropertyOracle for LinkValid {
    fn descriptor(&self) -> &OracleDescriptor {
        &self.descriptor
    }

    fn check(&self, item: &DatasetItem, env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let repo = required(item, "repo")?;
        let commit = required(item, "commit")?;
        match self.mirror.iter().find(|e| e.repo == repo && e.commit == commit) {
            Some(e) if e.exists => Ok(Verdict::pass(format!("{repo}@{commit} resolves in mirror"))),
            Some(_) => Ok(Verdict::fail(format!("{repo}@{commit} recorded missing in mirror"))),
            None if env.allow_network => self.live_probe(repo, commit, env),
            None => Ok(Verdict::fail(format!("{repo}@{commit} not in mirror"))),
        }
    }
}

struct DependencyHealth {
    descriptor: OracleDescriptor,
    advisories: Vec<Advisory>,
}

impl PropertyOracle for DependencyHealth {
    fn descriptor(&self) -> &OracleDescriptor {
        &self.descriptor
    }

    fn check(&self, item: &DatasetItem, _env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let malformed = |reason: String| OracleError::ItemMalformed { index: item.index, reason };
        let raw = item
            .meta("dependencies")
            .ok_or_else(|| malformed("missing `dependencies` metadata".into()))?;
        let pins: Vec<DependencyPin> =
            serde_json::from_str(raw).map_err(|e| malformed(format!("dependencies: {e}")))?;
        let mut hits = Vec::new();
        for pin in &pins {
            for adv in advisory::matching(&self.advisories, pin).map_err(OracleError::Bundle)? {
                hits.push(format!("{}:{}@{} {}", pin.ecosystem, pin.package, pin.version, adv.advisory_id));
            }
        }
        Ok(if hits.is_empty() {
            Verdict::pass(format!("{} dependencies, no advisories", pins.len()))
        } else {
            Verdict::fail(format!("vulnerable: {}", hits.join("; ")))
        })
    }
}

struct LicenseResolves {
    descriptor: OracleDescriptor,
    known: BTreeSet<String>,
}

impl PropertyOracle for LicenseResolves {
    fn descriptor(&self) -> &OracleDescriptor {
        &self.descriptor
    }

    fn check(&self, item: &DatasetItem, env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let verdict = license::resolve(item.meta("license").unwrap_or(""), &self.known, &env.license_allowlist);
        Ok(Verdict { violated: verdict.is_violation(), log: verdict.describe() })
    }
}

/// Third-party oracle: runs the bundle entrypoint with the canonical item
/// record on stdin. Exit 0 means no violation, exit 1 a violation, anything
/// else is an error.
pub struct CommandOracle {
    descriptor: OracleDescriptor,
    budget: Duration,
    bundle: OracleBundle,
}

impl CommandOracle {
    pub fn new(bundle: OracleBundle) -> Result<Self, OracleError> {
        if bundle.manifest.entrypoint.trim().is_empty() {
            return Err(OracleError::Bundle("empty entrypoint".into()));
        }
        Ok(CommandOracle { descriptor: bundle.descriptor(), budget: bundle.budget(), bundle })
    }

    fn stage(&self, dir: &Path) -> Result<(), OracleError> {
        for (name, bytes) in &self.bundle.resources {
            std::fs::write(dir.join(name), bytes)
                .map_err(|e| OracleError::Environment(format!("stage {name}: {e}")))?;
        }
        Ok(())
    }
}

impl PropertyOracle for CommandOracle {
    fn descriptor(&self) -> &OracleDescriptor {
        &self.descriptor
    }

    fn check(&self, item: &DatasetItem, env: &ExecutionEnv) -> Result<Verdict, OracleError> {
        let work = tempfile::tempdir().map_err(|e| OracleError::Environment(format!("tempdir: {e}")))?;
        self.stage(work.path())?;
        let input = canonical::to_canonical_bytes(item).expect("item has no floats");
        let outcome = run_shell(
            &self.bundle.manifest.entrypoint,
            work.path(),
            effective_budget(env, self.budget),
            Some(&input),
        )?;
        match outcome.exit_code {
            Some(0) => Ok(Verdict::pass(outcome.transcript())),
            Some(1) => Ok(Verdict::fail(outcome.transcript())),
            _ => Err(OracleError::Execution(outcome.transcript())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{builtin_oracles, OracleRegistry};
    use super::*;
    use std::collections::BTreeMap;

    fn descriptor(id: &str) -> OracleDescriptor {
        builtin_oracles().into_iter().find(|d| d.property_id == id).unwrap()
    }

    fn item(meta: &[(&str, &str)]) -> DatasetItem {
        let m: BTreeMap<String, String> = meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        DatasetItem::new(0, "probe", m)
    }

    fn env() -> ExecutionEnv {
        ExecutionEnv::default().with_allowlist(["MIT", "Apache-2.0"])
    }

    fn check(id: &str, it: &DatasetItem, env: &ExecutionEnv) -> Result<bool, OracleError> {
        OracleRegistry::builtin().check_item(&descriptor(id), it, env).map(|b| b.violated)
    }

    #[test]
    fn link_valid_against_mirror() {
        let mirror: Vec<MirrorEntry> = serde_json::from_slice(MIRROR_JSON).unwrap();
        let present = mirror.iter().find(|e| e.exists).unwrap();
        let it = item(&[("repo", &present.repo), ("commit", &present.commit)]);
        assert!(!check("link_valid", &it, &env()).unwrap());
        let absent = item(&[("repo", &present.repo), ("commit", "0000000000000000000000000000000000000000")]);
        assert!(check("link_valid", &absent, &env()).unwrap());
        if let Some(gone) = mirror.iter().find(|e| !e.exists) {
            let it = item(&[("repo", &gone.repo), ("commit", &gone.commit)]);
            assert!(check("link_valid", &it, &env()).unwrap());
        }
        let err = check("link_valid", &item(&[("repo", "x")]), &env()).unwrap_err();
        assert_eq!(err.category(), "item-malformed");
    }

    #[test]
    fn link_valid_live_probe_against_local_repo() {
        if std::process::Command::new("git").arg("--version").output().is_err() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let repo = dir.path().join("origin");
        let sh = format!(
            "git init -q {0} && cd {0} && git -c user.name=t -c user.email=t@t commit -q --allow-empty -m init && git rev-parse HEAD",
            repo.display()
        );
        let out = std::process::Command::new("sh").arg("-c").arg(&sh).output().unwrap();
        if !out.status.success() {
            return;
        }
        let commit = String::from_utf8(out.stdout).unwrap().trim().to_string();
        let url = format!("file://{}", repo.display());
        let mut live = env();
        live.allow_network = true;
        assert!(!check("link_valid", &item(&[("repo", &url), ("commit", &commit)]), &live).unwrap());
        // Offline mode never reaches out.
        assert!(check("link_valid", &item(&[("repo", &url), ("commit", &commit)]), &env()).unwrap());
    }

    #[test]
    fn license_rules() {
        assert!(check("license_resolves", &item(&[("license", "")]), &env()).unwrap());
        assert!(check("license_resolves", &item(&[]), &env()).unwrap());
        assert!(!check("license_resolves", &item(&[("license", "MIT")]), &env()).unwrap());
        assert!(check("license_resolves", &item(&[("license", "GPL-3.0-only")]), &env()).unwrap());
        assert!(check("license_resolves", &item(&[("license", "Not-A-License")]), &env()).unwrap());
    }

    #[test]
    fn dependency_health_matches_pinned_advisory() {
        let db: Vec<Advisory> = serde_json::from_slice(ADVISORIES_JSON).unwrap();
        let known = db.iter().find(|a| a.package == "left-pad").unwrap();
        assert_eq!(known.affected, ">=1.0.0, <1.3.0");
        let vulnerable = item(&[(
            "dependencies",
            r#"[{"ecosystem":"npm","package":"left-pad","version":"1.1.3"},{"ecosystem":"npm","package":"chalk","version":"4.1.2"}]"#,
        )]);
        assert!(check("dependency_health", &vulnerable, &env()).unwrap());
        let patched = item(&[("dependencies", r#"[{"ecosystem":"npm","package":"left-pad","version":"1.3.0"}]"#)]);
        assert!(!check("dependency_health", &patched, &env()).unwrap());
        assert!(!check("dependency_health", &item(&[("dependencies", "[]")]), &env()).unwrap());
        let err = check("dependency_health", &item(&[("dependencies", "{oops")]), &env()).unwrap_err();
        assert_eq!(err.category(), "item-malformed");
        let err = check("dependency_health", &item(&[]), &env()).unwrap_err();
        assert_eq!(err.category(), "item-malformed");
    }

    #[test]
    fn build_and_test_commands() {
        let fixtures = tempfile::tempdir().unwrap();
        let proj = fixtures.path().join("p");
        std::fs::create_dir_all(&proj).unwrap();
        std::fs::write(proj.join("build.sh"), "echo built; exit 0\n").unwrap();
        std::fs::write(proj.join("test.sh"), "echo failing test; exit 1\n").unwrap();
        let e = env().with_fixtures(fixtures.path());
        let ok = item(&[("build_command", "sh build.sh"), ("project_dir", "p"), ("test_command", "sh test.sh")]);
        assert!(!check("buildability", &ok, &e).unwrap());
        assert!(check("test_smoke", &ok, &e).unwrap());
        let no_tests = item(&[("build_command", "exit 2")]);
        assert!(check("buildability", &no_tests, &e).unwrap());
        assert!(!check("test_smoke", &no_tests, &e).unwrap());
        let err = check("buildability", &item(&[]), &e).unwrap_err();
        assert_eq!(err.category(), "item-malformed");
        let err = check("buildability", &ok, &env()).unwrap_err();
        assert_eq!(err.category(), "oracle-environment");
    }

    #[test]
    fn timeout_is_an_error_not_a_bit() {
        let mut e = env();
        e.budget = Some(Duration::from_millis(150));
        let slow = item(&[("build_command", "sleep 20")]);
        let err = check("buildability", &slow, &e).unwrap_err();
        assert_eq!(err.category(), "timeout");
    }

    #[test]
    fn determinism_of_bits_and_logs() {
        let it = item(&[("build_command", "echo same"), ("license", "MIT")]);
        let reg = OracleRegistry::builtin();
        for d in builtin_oracles() {
            if d.property_id == "link_valid" || d.property_id == "dependency_health" {
                continue;
            }
            let a = reg.check_item(&d, &it, &env()).unwrap();
            let b = reg.check_item(&d, &it, &env()).unwrap();
            assert_eq!((a.violated, &a.log), (b.violated, &b.log), "{}", d.property_id);
        }
    }

    #[test]
    fn command_oracle_bundle() {
        let bundle = OracleBundle::new(BundleManifest {
            property_id: "has_readme".into(),
            version: "0.1".into(),
            entrypoint: "sh check.sh".into(),
            budget_seconds: 10,
        })
        .with_resource("check.sh", "grep -q '\"readme\":\"yes\"' && exit 0 || exit 1\n");
        let mut reg = OracleRegistry::new();
        let d = reg.register_bundle(bundle).unwrap();
        let yes = item(&[("readme", "yes")]);
        let no = item(&[("readme", "no")]);
        assert!(!reg.check_item(&d, &yes, &env()).unwrap().violated);
        assert!(reg.check_item(&d, &no, &env()).unwrap().violated);

        let broken = OracleBundle::new(BundleManifest {
            property_id: "broken".into(),
            version: "0.1".into(),
            entrypoint: "exit 7".into(),
            budget_seconds: 10,
        });
        let d = reg.register_bundle(broken).unwrap();
        assert_eq!(reg.check_item(&d, &yes, &env()).unwrap_err().category(), "oracle-execution");
    }

    #[test]
    fn tampered_item_is_malformed() {
        let mut it = item(&[("license", "MIT")]);
        it.metadata.insert("license".into(), "GPL-3.0-only".into());
        assert_eq!(check("license_resolves", &it, &env()).unwrap_err().category(), "item-malformed");
    }
}
