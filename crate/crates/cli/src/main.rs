mod commands;
mod error;
mod home;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::home::Home;

#[derive(Parser)]
#[command(name = "confcard", version, about = "Certify dataset properties with anytime-valid confidence cards")]
struct Cli {
    /// State directory (ledger, store, keys, pinned oracles).
    #[arg(long, env = "SIEVE_HOME", global = true)]
    home: Option<PathBuf>,
    #[arg(long, global = true)]
    ledger: Option<PathBuf>,
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Directory of `<name>.key` files.
    #[arg(long, global = true)]
    keys: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct DataArgs {
    /// Dataset manifest; defaults to the copy stored at registration.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Root for `project_dir` item metadata; defaults to the manifest's directory.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Let link checks fall back to live `git fetch`.
    #[arg(long)]
    pub allow_network: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Create sponsor, validator and arbiter keys that do not exist yet.
    Keygen {
        #[arg(long, default_value_t = 3)]
        arbiters: usize,
        /// Derive keys from this hex seed instead of the OS generator.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Register a dataset audit (sponsor).
    Register {
        #[arg(long)]
        manifest: PathBuf,
        /// `ID[:EPSILON[:DELTA]]`; repeat per property.
        #[arg(long = "property", required = true)]
        properties: Vec<String>,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long = "url")]
        urls: Vec<String>,
        /// SPDX identifiers accepted by `license_resolves`.
        #[arg(long = "allow-license", value_delimiter = ',')]
        allow_licenses: Vec<String>,
        /// Arbiter signatures required per attestation; defaults to a majority.
        #[arg(long)]
        quorum: Option<u32>,
        /// Oracle bundle directory overriding the built-in oracle of its property.
        #[arg(long = "oracle-bundle")]
        bundles: Vec<PathBuf>,
    },
    /// Lock the public seed from a beacon value (sponsor).
    LockSeed {
        #[arg(long)]
        audit_id: Option<String>,
        /// 64 hex characters, or a file.
        #[arg(long)]
        beacon: String,
    },
    /// Claim scheduled items, run the oracles and publish evidence packs (validator).
    Validate {
        #[arg(long)]
        audit_id: Option<String>,
        #[arg(long, default_value_t = 20)]
        batch: u64,
        #[arg(long, default_value_t = 1)]
        rounds: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value = home::VALIDATOR)]
        key: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Reproduce published packs, resolve challenges and co-sign attestations (arbiters).
    Attest {
        #[arg(long)]
        audit_id: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-property t, S_t, p-hat, interval, state, cleanliness bound and T2eps.
    Status {
        #[arg(long)]
        audit_id: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Store one card per property from the latest attestation.
    EmitCards {
        #[arg(long)]
        audit_id: Option<String>,
        /// Also write `<property>.card.json` files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a card from a file or a `store:` address.
    VerifyCard {
        card: String,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Dispute the attestation at sample count `t`.
    Challenge {
        #[arg(long)]
        audit_id: Option<String>,
        #[arg(long)]
        t: u64,
        /// `store:` address of supporting evidence.
        #[arg(long)]
        evidence: String,
        #[arg(long, default_value = home::VALIDATOR)]
        key: String,
    },
    /// Monte Carlo audits of a Bernoulli stream.
    Simulate {
        #[arg(long)]
        p_true: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 200)]
        runs: u64,
        #[arg(long, default_value_t = 20000)]
        max_t: u64,
        /// Hex seed for all randomness.
        #[arg(long, default_value = "0000000000000000000000000000000000000000000000000000000000000000")]
        seed: String,
        /// Write (run, t, S_t, L_t, U_t, 1 - U_t) trajectories here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Runs included in the CSV.
        #[arg(long, default_value_t = 5)]
        trace_runs: u64,
        #[arg(long)]
        json: bool,
    },
    /// Check the hash chain and print the head digest.
    VerifyLedger,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let home = Home::resolve(cli.home, cli.ledger, cli.store, cli.keys);
    let result = match cli.command {
        Command::Keygen { arbiters, seed } => commands::keygen(&home, arbiters, seed.as_deref()),
        Command::Register { manifest, properties, epsilon, delta, urls, allow_licenses, quorum, bundles } => {
            commands::register(&home, commands::RegisterArgs {
                manifest,
                properties,
                epsilon,
                delta,
                urls,
                allow_licenses,
                quorum,
                bundles,
            })
        }
        Command::LockSeed { audit_id, beacon } => commands::lock_seed(&home, audit_id.as_deref(), &beacon),
        Command::Validate { audit_id, batch, rounds, workers, key, data } => {
            commands::validate(&home, audit_id.as_deref(), batch, rounds, workers, &key, &data)
        }
        Command::Attest { audit_id, data } => commands::attest(&home, audit_id.as_deref(), &data),
        Command::Status { audit_id, json } => commands::status(&home, audit_id.as_deref(), json),
        Command::EmitCards { audit_id, out } => commands::emit_cards(&home, audit_id.as_deref(), out.as_deref()),
        Command::VerifyCard { card, json, data } => commands::verify_card(&home, &card, json, &data),
        Command::Challenge { audit_id, t, evidence, key } => {
            commands::challenge(&home, audit_id.as_deref(), t, &evidence, &key)
        }
        Command::Simulate { p_true, epsilon, delta, runs, max_t, seed, csv, trace_runs, json } => {
            commands::simulate(p_true, epsilon, delta, runs, max_t, &seed, csv.as_deref(), trace_runs, json)
        }
        Command::VerifyLedger => commands::verify_ledger(&home),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
