#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const KEY_SEED: &str = "1111111111111111111111111111111111111111111111111111111111111111";
pub const LICENSES: &str = "MIT,Apache-2.0,BSD-3-Clause,ISC,BSD-2-Clause";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn manifest() -> PathBuf {
    fixtures().join("dataset.json")
}

pub fn beacon() -> PathBuf {
    fixtures().join("beacon.hex")
}

/// A scratch state directory driven through the `confcard` binary.
pub struct Cli {
    pub dir: tempfile::TempDir,
}

impl Cli {
    pub fn new() -> Self {
        Cli { dir: tempfile::tempdir().unwrap() }
    }

    pub fn home(&self) -> PathBuf {
        self.dir.path().join("home")
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_confcard"))
            .args(args)
            .env("SIEVE_HOME", self.home())
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    /// Run and require success; returns stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "confcard {args:?} failed\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn json(&self, args: &[&str]) -> Value {
        serde_json::from_str(&self.ok(args)).unwrap()
    }

    pub fn register(&self) -> String {
        let manifest = manifest();
        self.ok(&["keygen", "--seed", KEY_SEED]);
        self.ok(&[
            "register",
            "--manifest",
            manifest.to_str().unwrap(),
            "--property",
            "buildability:0.05:0.05",
            "--property",
            "license_resolves:0.01:0.05",
            "--allow-license",
            LICENSES,
        ])
    }

    pub fn lock(&self) -> String {
        self.ok(&["lock-seed", "--beacon", beacon().to_str().unwrap()])
    }

    pub fn rounds(&self, n: u64) {
        self.ok(&["validate", "--batch", "20", "--rounds", &n.to_string(), "--workers", "2"]);
        self.ok(&["attest"]);
    }

    pub fn status(&self) -> Value {
        self.json(&["status", "--json"])
    }

    /// `(property, address)` pairs from `emit-cards`.
    pub fn emit(&self, out: &str) -> Vec<(String, String)> {
        let text = self.ok(&["emit-cards", "--out", out]);
        text.lines()
            .map(|l| {
                let mut f = l.split_whitespace();
                (f.next().unwrap().to_string(), f.next().unwrap().to_string())
            })
            .collect()
    }

    pub fn verify(&self, card: &str) -> Value {
        let out = self.run(&["verify-card", card, "--json"]);
        serde_json::from_slice(&out.stdout).unwrap_or_else(|_| {
            panic!("verify-card: {}", String::from_utf8_lossy(&out.stderr))
        })
    }
}

pub fn property<'a>(status: &'a Value, id: &str) -> &'a Value {
    status["properties"].as_array().unwrap().iter().find(|p| p["property_id"] == id).unwrap()
}

pub fn all_checks_pass(report: &Value) -> bool {
    let checks = report["checks"].as_array().unwrap();
    checks.len() == 5 && checks.iter().all(|c| c["passed"] == true)
}

pub fn failed_checks(report: &Value) -> Vec<String> {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] != true)
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect()
}

/// What a full golden-path run leaves behind.
pub struct GoldenRun {
    pub cli: Cli,
    pub clean_at: u64,
    pub clean_cards: Vec<(String, String)>,
    pub final_cards: Vec<(String, String)>,
    pub final_status: Value,
}

/// Register, lock, then validate and attest one 20-item round at a time until
/// buildability turns CLEAN; emit and check cards there, then run to exhaustion.
pub fn golden_path() -> GoldenRun {
    let cli = Cli::new();
    cli.register();
    cli.lock();
    let mut clean_at = 0;
    let mut clean_cards = Vec::new();
    for _ in 0..10 {
        cli.rounds(1);
        let st = cli.status();
        let b = property(&st, "buildability");
        if clean_at == 0 && b["state"] == "CLEAN" {
            clean_at = b["t"].as_u64().unwrap();
            clean_cards = cli.emit("cards-clean");
        }
    }
    let final_cards = cli.emit("cards-final");
    let final_status = cli.status();
    GoldenRun { cli, clean_at, clean_cards, final_cards, final_status }
}
