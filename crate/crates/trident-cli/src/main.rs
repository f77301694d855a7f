//! Operator CLI: registration, login demo, reference-vector demos, the
//! attack-scenario runner, store audit, and matrix inspection.
//!
//! Exit codes: 0 success, 1 verdict/integrity mismatch or runtime failure,
//! 2 usage error.

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, RwLock};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use trident_core::account_store::AccountStore;
use trident_core::entropy::{EntropySource, OsEntropy, SeededEntropy};
use trident_core::gatekeeper::{register_account, RegistrationRequest};
use trident_core::golden;
use trident_core::identity::{combine_identity, normalize_login_name};
use trident_core::matrix_hash::{
    build_matrix, compose_authentication_password, extract_identifier,
};
use trident_core::wire::{
    run_scenario, run_server, Message, Scenario, ScenarioFixture, SimClient, SimDevice,
    DEFAULT_PORT, OUTCOME_PROCEED,
};

const DEFAULT_STORE: &str = "trident-accounts.jsonl";
const STORE_ENV: &str = "TRIDENT_STORE_PATH";
const PRODUCTION_ENV: &str = "TRIDENT_PRODUCTION";

#[derive(Parser, Debug)]
#[command(
    name = "trident",
    version,
    about = "Triple-identity authentication reference tool"
)]
struct Cli {
    /// Account store path (overrides TRIDENT_STORE_PATH).
    #[arg(long, global = true)]
    store: Option<PathBuf>,

    /// TCP port for `serve` and TCP logins.
    #[arg(long, global = true)]
    port: Option<u16>,

    /// Hex-encoded entropy seed for reproducible runs. Refused when
    /// TRIDENT_PRODUCTION=1.
    #[arg(long, global = true)]
    seed: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register an account into the store.
    Register {
        #[arg(long)]
        name: String,
        #[arg(long)]
        phone: Option<String>,
        #[arg(long)]
        password: String,
        #[arg(long)]
        imei: String,
        #[arg(long)]
        imsi: String,
    },
    /// Run a full three-gate login, in process or against a TCP server.
    Login {
        #[arg(long)]
        name: String,
        #[arg(long)]
        password: String,
        #[arg(long)]
        imei: String,
        #[arg(long)]
        imsi: String,
        /// Connect to host:port instead of the in-process server.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Print the built-in login-password conversion example and its
    /// authentication password.
    #[command(name = "demo-fig1")]
    DemoFig1,
    /// Print the built-in username conversion example and its identifier.
    #[command(name = "demo-fig2")]
    DemoFig2,
    /// Run an attack scenario and print its verdict.
    Attack {
        /// One of: happy-path, sim-swap, stolen-credentials, replay-ap,
        /// wrong-device.
        scenario: String,
        /// Write the wire transcript (hex dump) to this file.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Recheck at-rest integrity of every stored account.
    Audit,
    /// Print the matrix of a stored account field (un, pn, or lp).
    Inspect {
        /// Account id, login name, or phone number.
        account: String,
        /// Field to render: un, pn, or lp.
        field: String,
        /// Login password, required to rebuild the lp matrix (it is not
        /// stored).
        #[arg(long)]
        password: Option<String>,
    },
    /// Run the reference TCP server in the foreground.
    Serve,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn production_mode() -> bool {
    std::env::var(PRODUCTION_ENV).map(|v| v == "1").unwrap_or(false)
}

fn make_entropy(seed: &Option<String>) -> Result<Box<dyn EntropySource + Send>, String> {
    match seed {
        Some(hex_seed) => {
            let bytes = hex::decode(hex_seed).map_err(|e| format!("bad --seed hex: {e}"))?;
            Ok(Box::new(SeededEntropy::from_seed_bytes(&bytes)))
        }
        None => Ok(Box::new(OsEntropy)),
    }
}

fn store_path(cli_store: &Option<PathBuf>) -> PathBuf {
    cli_store
        .clone()
        .or_else(|| std::env::var(STORE_ENV).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    if cli.seed.is_some() && production_mode() {
        // Seeded entropy makes every secret predictable; a production
        // deployment must never accept it.
        eprintln!("--seed is refused in production mode ({PRODUCTION_ENV}=1)");
        return Ok(ExitCode::from(2));
    }

    match &cli.command {
        Command::Register {
            name,
            phone,
            password,
            imei,
            imsi,
        } => {
            let mut entropy = make_entropy(&cli.seed)?;
            let mut store =
                AccountStore::open(store_path(&cli.store)).map_err(|e| e.to_string())?;
            let request =
                RegistrationRequest::new(name, phone.as_deref(), password, imei, imsi);
            let registered =
                register_account(&store, &request, &mut entropy).map_err(|e| e.to_string())?;
            let account_id = registered.record.account_id.clone();
            store
                .save_account(registered.record)
                .map_err(|e| e.to_string())?;
            println!("registered account {account_id}");
            println!("ap_resample_attempts={}", registered.ap_resample_attempts);
            Ok(ExitCode::SUCCESS)
        }
        Command::Login {
            name,
            password,
            imei,
            imsi,
            connect,
        } => {
            let device = SimDevice::new(
                trident_core::identity::validate_imei(imei, false).map_err(|e| e.to_string())?,
                trident_core::identity::validate_imsi(imsi).map_err(|e| e.to_string())?,
                "cli device",
            );
            // The client-side field normalizes whatever the user typed; the
            // field filter then applies to the normalized text.
            let entered = normalize_login_name(name).map_err(|e| e.to_string())?;
            match connect {
                Some(addr) => {
                    let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
                    login_over(stream, device, &entered.normalized, password)
                }
                None => {
                    let store =
                        AccountStore::open(store_path(&cli.store)).map_err(|e| e.to_string())?;
                    let shared = Arc::new(RwLock::new(store));
                    let (client_end, mut server_end) = trident_core::wire::duplex_pair();
                    let mut entropy = make_entropy(&cli.seed)?;
                    let server = std::thread::spawn(move || {
                        let mut events = Vec::new();
                        let _ = trident_core::wire::handle_connection(
                            &mut server_end,
                            &shared,
                            &mut entropy,
                            &mut events,
                        );
                    });
                    let result = login_over(client_end, device, &entered.normalized, password);
                    let _ = server.join();
                    result
                }
            }
        }
        Command::DemoFig1 => {
            let matrix = build_matrix(
                golden::FIG1_CREDENTIAL,
                &golden::fig1_codebook(),
                &golden::fig1_labels(),
            )
            .map_err(|e| e.to_string())?;
            print!("{}", matrix.render_debug());
            let ap = compose_authentication_password(&matrix);
            println!("AP={}", ap.as_str());
            Ok(exit_iff(ap.as_str() == golden::FIG1_AUTHENTICATION_PASSWORD))
        }
        Command::DemoFig2 => {
            let matrix = build_matrix(
                golden::FIG2_CREDENTIAL,
                &golden::fig2_codebook(),
                &golden::fig2_labels(),
            )
            .map_err(|e| e.to_string())?;
            print!("{}", matrix.render_debug());
            let identifier =
                extract_identifier(&matrix, &golden::fig2_plan()).map_err(|e| e.to_string())?;
            println!("identifier={}", identifier.as_str());
            Ok(exit_iff(identifier.as_str() == golden::FIG2_IDENTIFIER))
        }
        Command::Attack {
            scenario,
            transcript,
        } => {
            let scenario: Scenario = match scenario.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let mut entropy = make_entropy(&cli.seed)?;
            let fixture =
                ScenarioFixture::provision(&mut entropy).map_err(|e| e.to_string())?;
            let report = run_scenario(scenario, &fixture).map_err(|e| e.to_string())?;
            println!("{}", report.verdict);
            if let Some(path) = transcript {
                std::fs::write(path, report.transcript.render_hex_dump())
                    .map_err(|e| e.to_string())?;
            }
            Ok(exit_iff(report.matches_expectation()))
        }
        Command::Audit => {
            let store = AccountStore::open(store_path(&cli.store)).map_err(|e| e.to_string())?;
            let report = store.audit();
            println!("checked {} account(s)", report.checked);
            for failure in &report.failures {
                println!("FAIL {}: {}", failure.account_id, failure.reason);
            }
            if report.is_clean() {
                println!("store integrity ok");
            }
            Ok(exit_iff(report.is_clean()))
        }
        Command::Inspect {
            account,
            field,
            password,
        } => {
            let store = AccountStore::open(store_path(&cli.store)).map_err(|e| e.to_string())?;
            // Accept raw login names too; account ids (lowercase hex) pass
            // through normalization unchanged.
            let key = normalize_login_name(account)
                .map(|n| n.normalized)
                .unwrap_or_else(|_| account.clone());
            let record = store.load_account(&key).map_err(|e| e.to_string())?;
            let matrix = match field.as_str() {
                "un" => build_matrix(
                    record.login_name.as_str(),
                    &record.un.codebook,
                    &record.un.labels,
                )
                .map_err(|e| e.to_string())?,
                "pn" => {
                    let pn = record.pn.as_ref().ok_or("account has no phone field")?;
                    let phone = pn.credential.as_deref().ok_or("phone field incomplete")?;
                    build_matrix(phone, &pn.codebook, &pn.labels).map_err(|e| e.to_string())?
                }
                "lp" => {
                    let lp = password
                        .as_deref()
                        .ok_or("--password is required to rebuild the lp matrix")?;
                    let identity =
                        combine_identity(lp, &record.imei, &record.imsi, record.salt);
                    if !trident_core::account_store::constant_time_equal(
                        &identity.digest,
                        &record.lp.digest,
                    ) {
                        return Err("password does not match this account".into());
                    }
                    build_matrix(lp, &record.lp.codebook, &record.lp.labels)
                        .map_err(|e| e.to_string())?
                }
                other => {
                    eprintln!("unknown field {other:?}: expected un, pn, or lp");
                    return Ok(ExitCode::from(2));
                }
            };
            print!("{}", matrix.render_debug());
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve => {
            let store = AccountStore::open(store_path(&cli.store)).map_err(|e| e.to_string())?;
            let port = cli.port.unwrap_or(DEFAULT_PORT);
            let listener =
                TcpListener::bind(("127.0.0.1", port)).map_err(|e| e.to_string())?;
            println!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
            run_server(listener, Arc::new(RwLock::new(store))).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_iff(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

/// Drive the wire protocol over any stream and print per-gate outcomes.
fn login_over<S: std::io::Read + std::io::Write>(
    stream: S,
    device: SimDevice,
    name: &str,
    password: &str,
) -> Result<ExitCode, String> {
    let mut client = SimClient::new(stream, device, "cli-login");
    let name_reply = client.submit_name(name).map_err(|e| e.to_string())?;
    let name_outcome = outcome_text(&name_reply);
    println!("name gate: {name_outcome}");
    if name_outcome != OUTCOME_PROCEED {
        return Ok(ExitCode::from(1));
    }
    let replies = client.submit_password(password).map_err(|e| e.to_string())?;
    let password_outcome = outcome_text(&replies[0]);
    println!("password gate: {password_outcome}");
    if password_outcome != OUTCOME_PROCEED {
        return Ok(ExitCode::from(1));
    }
    match replies.get(1) {
        Some(Message::Token { token_hex }) => {
            println!("authenticated: token={token_hex}");
            Ok(ExitCode::SUCCESS)
        }
        Some(other) => {
            println!("server authentication: {}", outcome_text(other));
            Ok(ExitCode::from(1))
        }
        None => Err("server closed before the authentication point".into()),
    }
}

fn outcome_text(message: &Message) -> String {
    match message {
        Message::Result { outcome } => outcome.clone(),
        Message::Token { .. } => "token".into(),
        other => format!("unexpected reply {other:?}"),
    }
}
