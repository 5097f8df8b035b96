mod common;

use common::*;

#[test]
fn golden_path_reaches_clean_and_cards_verify() {
    let run = golden_path();
    let cli = &run.cli;
    assert_eq!(run.clean_at, 180);
    assert_eq!(run.clean_cards.len(), 2);
    for (_, address) in run.clean_cards.iter().chain(&run.final_cards) {
        let report = cli.verify(address);
        assert!(all_checks_pass(&report), "{report}");
    }
    let card: serde_json::Value = serde_json::from_slice(
        &std::fs::read(cli.dir.path().join("cards-clean/buildability.card.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(card["decision"]["state"], "CLEAN");
    assert_eq!(card["decision"]["t2epsilon"], 180);

    let st = &run.final_status;
    assert_eq!(st["decision"], "EXHAUSTED-PENDING");
    let b = property(st, "buildability");
    assert_eq!((b["t"].as_u64(), b["violations"].as_u64()), (Some(200), Some(2)));
    assert_eq!(b["t2epsilon"], 180);
    let l = property(st, "license_resolves");
    assert_eq!(l["violations"], 6);
    assert_eq!(l["t2epsilon"], serde_json::Value::Null);

    let out = cli.ok(&["verify-ledger"]);
    assert!(out.starts_with("entries"), "{out}");
}

#[test]
fn duplicate_registration_is_refused() {
    let cli = Cli::new();
    cli.register();
    let again = cli.run(&[
        "register",
        "--manifest",
        manifest().to_str().unwrap(),
        "--property",
        "buildability",
    ]);
    assert_eq!(again.status.code(), Some(1));
    let err = String::from_utf8_lossy(&again.stderr);
    assert!(err.contains("error[duplicate-root-hash]"), "{err}");
}

#[test]
fn status_before_any_round_is_vacuous() {
    let cli = Cli::new();
    cli.register();
    let st = cli.status();
    assert_eq!(st["seed_locked"], false);
    for p in st["properties"].as_array().unwrap() {
        assert_eq!(p["t"], 0);
        assert_eq!(p["state"], "PENDING");
        assert_eq!((p["lower"].as_f64(), p["upper"].as_f64()), (Some(0.0), Some(1.0)));
    }
    let out = cli.run(&["validate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[seed-not-locked]"));
}

#[test]
fn challenge_against_honest_attestation_is_rejected() {
    let cli = Cli::new();
    cli.register();
    cli.lock();
    cli.rounds(2);
    let out = cli.ok(&["challenge", "--t", "20", "--evidence", &format!("store:{}", "ab".repeat(32))]);
    assert!(!out.is_empty());
    let out = cli.ok(&["attest"]);
    assert!(out.contains("Rejected"), "{out}");
}

#[test]
fn edited_card_file_fails_verification() {
    let cli = Cli::new();
    cli.register();
    cli.lock();
    cli.rounds(3);
    cli.emit("cards");
    let path = cli.dir.path().join("cards/license_resolves.card.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut card: serde_json::Value = serde_json::from_str(&text).unwrap();
    card["evidence"]["violations"] = serde_json::json!(0);
    std::fs::write(&path, serde_json::to_vec(&card).unwrap()).unwrap();
    let report = cli.verify(path.to_str().unwrap());
    assert!(!all_checks_pass(&report));
    assert!(failed_checks(&report).contains(&"replay".to_string()), "{report}");
}

#[test]
fn ledger_tampering_is_reported() {
    let cli = Cli::new();
    cli.register();
    cli.lock();
    let ledger = cli.home().join("ledger.jsonl");
    let text = std::fs::read_to_string(&ledger).unwrap();
    std::fs::write(&ledger, text.replacen("\"quorum\":2", "\"quorum\":1", 1)).unwrap();
    let out = cli.run(&["verify-ledger"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_writes_csv_trajectories() {
    let cli = Cli::new();
    let csv = cli.dir.path().join("traj.csv");
    let summary = cli.json(&[
        "simulate", "--p-true", "0.02", "--epsilon", "0.005", "--runs", "20", "--max-t", "3000", "--trace-runs",
        "2", "--csv", csv.to_str().unwrap(), "--json",
    ]);
    assert_eq!(summary["dirty"], 20);
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    assert!(reader.headers().unwrap().iter().any(|h| h == "upper"));
    assert_eq!(reader.records().count(), 2 * 3000);
}
