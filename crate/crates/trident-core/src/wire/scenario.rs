//! Attack-scenario harness.
//!
//! Each scenario provisions a victim account, drives a scripted client
//! against an in-process server over an in-memory stream, and reduces the
//! connection's server events to a verdict. The wire stays identical to
//! production — every denial is the same `RESULT` — while the harness reads
//! the server-side event log to attribute where the attempt died.

use std::str::FromStr;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::account_store::AccountStore;
use crate::entropy::{uniform_below, EntropySource};
use crate::gatekeeper::{register_account, AccountRecord, RegisterError, RegistrationRequest};
use crate::identity::{luhn_check_digit, validate_imei, validate_imsi, Imei, Imsi};
use crate::matrix_hash::{build_matrix, compose_authentication_password};

use super::{
    duplex_pair, handle_connection, GatePoint, Message, ServerEvent, SimClient, SimDevice,
    Transcript, WireError, OUTCOME_PROCEED,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("fixture registration failed: {0}")]
    Fixture(#[from] RegisterError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// The scripted attacks and the baseline login.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    HappyPath,
    SimSwap,
    StolenCredentials,
    ReplayAp,
    WrongDevice,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::HappyPath,
        Scenario::SimSwap,
        Scenario::StolenCredentials,
        Scenario::ReplayAp,
        Scenario::WrongDevice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::HappyPath => "happy-path",
            Scenario::SimSwap => "sim-swap",
            Scenario::StolenCredentials => "stolen-credentials",
            Scenario::ReplayAp => "replay-ap",
            Scenario::WrongDevice => "wrong-device",
        }
    }

    /// The verdict the system is expected to produce.
    pub fn expected_verdict(self) -> Verdict {
        match self {
            Scenario::HappyPath => Verdict::Authenticated,
            Scenario::SimSwap => Verdict::DeniedAtNameGate,
            Scenario::StolenCredentials => Verdict::DeniedAtNameGate,
            Scenario::ReplayAp => Verdict::DeniedByFieldFilter,
            Scenario::WrongDevice => Verdict::DeniedAtNameGate,
        }
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "happy-path" => Ok(Scenario::HappyPath),
            "sim-swap" => Ok(Scenario::SimSwap),
            "stolen-credentials" => Ok(Scenario::StolenCredentials),
            "replay-ap" => Ok(Scenario::ReplayAp),
            "wrong-device" => Ok(Scenario::WrongDevice),
            other => Err(ScenarioError::UnknownScenario(other.to_owned())),
        }
    }
}

/// Where a login attempt ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Authenticated,
    DeniedAtNameGate,
    DeniedAtPasswordGate,
    DeniedAtServerAuth,
    DeniedByFieldFilter,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Verdict::Authenticated => "AUTHENTICATED",
            Verdict::DeniedAtNameGate => "DENIED_AT_NAME_GATE",
            Verdict::DeniedAtPasswordGate => "DENIED_AT_PASSWORD_GATE",
            Verdict::DeniedAtServerAuth => "DENIED_AT_SERVER_AUTH",
            Verdict::DeniedByFieldFilter => "DENIED_BY_FIELD_FILTER",
        };
        f.write_str(name)
    }
}

/// A provisioned victim account plus everything the harness legitimately
/// knows about it: credentials, devices, and the secrets needed for the
/// wire-secrecy scan.
#[derive(Debug, Clone)]
pub struct ScenarioFixture {
    pub store: AccountStore,
    pub record: AccountRecord,
    pub login_name: String,
    pub phone: String,
    pub login_password: String,
    pub victim_imei: Imei,
    pub victim_imsi: Imsi,
    pub attacker_imei: Imei,
    pub attacker_imsi: Imsi,
    pub authentication_password: String,
}

fn draw_digits<E: EntropySource>(entropy: &mut E, n: usize) -> Result<String, RegisterError> {
    let mut out = String::with_capacity(n);
    for _ in 0..n {
        out.push(char::from(b'0' + uniform_below(entropy, 10)? as u8));
    }
    Ok(out)
}

fn draw_lowercase<E: EntropySource>(entropy: &mut E, n: usize) -> Result<String, RegisterError> {
    let mut out = String::with_capacity(n);
    for _ in 0..n {
        out.push(char::from(b'a' + uniform_below(entropy, 26)? as u8));
    }
    Ok(out)
}

fn draw_valid_imei<E: EntropySource>(entropy: &mut E) -> Result<String, RegisterError> {
    let prefix = draw_digits(entropy, 14)?;
    let check = luhn_check_digit(&prefix);
    Ok(format!("{prefix}{check}"))
}

/// The victim's IMEI with exactly one digit changed (checksum deliberately
/// not repaired: login-time attestation is format-only).
pub fn imei_with_one_digit_changed(imei: &Imei) -> Imei {
    let mut digits: Vec<u8> = imei.as_str().bytes().collect();
    digits[7] = b'0' + (digits[7] - b'0' + 1) % 10;
    validate_imei(std::str::from_utf8(&digits).unwrap(), false)
        .expect("still fifteen digits")
}

impl ScenarioFixture {
    /// Register a victim account (username, phone number, login password)
    /// and draw an unrelated attacker device.
    pub fn provision<E: EntropySource>(entropy: &mut E) -> Result<Self, ScenarioError> {
        let login_name = format!("victim{}", draw_lowercase(entropy, 6)?);
        let phone = format!("1415{}", draw_digits(entropy, 7)?);
        let login_password = draw_lowercase(entropy, 8)?;
        let victim_imei_text = draw_valid_imei(entropy)?;
        let victim_imsi_text = format!("310150{}", draw_digits(entropy, 9)?);
        let attacker_imei_text = draw_valid_imei(entropy)?;
        let attacker_imsi_text = format!("310260{}", draw_digits(entropy, 9)?);

        let mut store = AccountStore::in_memory();
        let request = RegistrationRequest::new(
            &login_name,
            Some(&phone),
            &login_password,
            &victim_imei_text,
            &victim_imsi_text,
        );
        let registered = register_account(&store, &request, entropy)?;
        let record = registered.record.clone();
        store
            .save_account(registered.record)
            .expect("fresh store cannot hold duplicates");

        // The harness knows the login password, so it can regenerate the
        // authentication password the way gate 3 does.
        let matrix = build_matrix(&login_password, &record.lp.codebook, &record.lp.labels)
            .expect("stored conversion inputs are valid");
        let authentication_password = compose_authentication_password(&matrix).as_str().to_owned();

        Ok(Self {
            store,
            record,
            login_name,
            phone,
            login_password,
            victim_imei: validate_imei(&victim_imei_text, true).expect("drawn with checksum"),
            victim_imsi: validate_imsi(&victim_imsi_text).expect("drawn as digits"),
            attacker_imei: validate_imei(&attacker_imei_text, true).expect("drawn with checksum"),
            attacker_imsi: validate_imsi(&attacker_imsi_text).expect("drawn as digits"),
            authentication_password,
        })
    }

    /// Byte strings that must never appear inside any frame: the stored
    /// identifiers, the authentication password, and every codebook
    /// converted string of length >= 3.
    pub fn secret_substrings(&self) -> Vec<Vec<u8>> {
        let mut secrets: Vec<Vec<u8>> = Vec::new();
        secrets.push(self.record.un.identifier.as_bytes().to_vec());
        if let Some(pn) = &self.record.pn {
            secrets.push(pn.identifier.as_bytes().to_vec());
        }
        secrets.push(self.record.lp.identifier.as_bytes().to_vec());
        secrets.push(self.record.ap.identifier.as_bytes().to_vec());
        secrets.push(self.authentication_password.clone().into_bytes());

        let mut codebooks = vec![&self.record.un.codebook, &self.record.lp.codebook];
        if let Some(pn) = &self.record.pn {
            codebooks.push(&pn.codebook);
        }
        for codebook in codebooks {
            for (_, entry) in codebook.entries() {
                if entry.string.len() >= 3 {
                    secrets.push(entry.string.clone().into_bytes());
                }
            }
        }
        secrets
    }

    /// Scan a scenario transcript for secret material the system leaked.
    ///
    /// Every server-emitted frame must be free of every secret. Client
    /// frames are held to the same bar with one exception: the replay
    /// scenario's whole point is that the attacker pastes the captured
    /// authentication password into the field, so the frames the attacker
    /// authors are the attack, not a leak — the system's obligation is to
    /// reject them, which the verdict asserts separately.
    pub fn leaked_secrets(&self, scenario: Scenario, transcript: &Transcript) -> Vec<Vec<u8>> {
        let secrets = self.secret_substrings();
        let mut leaked = Vec::new();
        for entry in transcript.entries() {
            if scenario == Scenario::ReplayAp
                && entry.direction == super::WireDirection::ClientToServer
            {
                continue;
            }
            for secret in &secrets {
                if entry
                    .frame
                    .windows(secret.len())
                    .any(|w| w == secret.as_slice())
                {
                    leaked.push(secret.clone());
                }
            }
        }
        leaked
    }

    fn victim_device(&self) -> SimDevice {
        SimDevice::new(
            self.victim_imei.clone(),
            self.victim_imsi.clone(),
            "victim handset",
        )
    }
}

/// Outcome of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub verdict: Verdict,
    pub transcript: Transcript,
    pub events: Vec<ServerEvent>,
}

impl ScenarioReport {
    pub fn matches_expectation(&self) -> bool {
        self.verdict == self.scenario.expected_verdict()
    }
}

fn verdict_from_events(events: &[ServerEvent]) -> Verdict {
    for event in events.iter().rev() {
        match event {
            ServerEvent::TokenIssued => return Verdict::Authenticated,
            ServerEvent::FilterRejected(_) => return Verdict::DeniedByFieldFilter,
            ServerEvent::GateDenied(GatePoint::Name) => return Verdict::DeniedAtNameGate,
            ServerEvent::GateDenied(GatePoint::Password) => return Verdict::DeniedAtPasswordGate,
            ServerEvent::GateDenied(GatePoint::ServerAuth) => return Verdict::DeniedAtServerAuth,
            ServerEvent::DeviceRejected | ServerEvent::ProtocolViolation => {
                return Verdict::DeniedAtNameGate
            }
            _ => continue,
        }
    }
    Verdict::DeniedAtNameGate
}

fn proceeded(reply: &Message) -> bool {
    matches!(reply, Message::Result { outcome } if outcome == OUTCOME_PROCEED)
}

/// Run one scenario against the fixture, in process, and return the
/// transcript plus the attributed verdict.
pub fn run_scenario(
    scenario: Scenario,
    fixture: &ScenarioFixture,
) -> Result<ScenarioReport, ScenarioError> {
    let store = Arc::new(RwLock::new(fixture.store.clone()));
    let (client_end, mut server_end) = duplex_pair();

    let server_store = Arc::clone(&store);
    let server = std::thread::spawn(move || {
        let mut entropy = crate::entropy::OsEntropy;
        let mut events = Vec::new();
        let result = handle_connection(&mut server_end, &server_store, &mut entropy, &mut events);
        (events, result)
    });

    let (name, password, device): (&str, &str, SimDevice) = match scenario {
        Scenario::HappyPath => (
            &fixture.login_name,
            &fixture.login_password,
            fixture.victim_device(),
        ),
        // The attacker's handset now answers to the victim's number: victim
        // IMSI on a new SIM, attacker IMEI on the device.
        Scenario::SimSwap => (
            &fixture.phone,
            &fixture.login_password,
            SimDevice::new(
                fixture.attacker_imei.clone(),
                fixture.victim_imsi.clone(),
                "attacker handset, swapped SIM",
            ),
        ),
        // Full credentials leaked, used from the attacker's own phone.
        Scenario::StolenCredentials => (
            &fixture.login_name,
            &fixture.login_password,
            SimDevice::new(
                fixture.attacker_imei.clone(),
                fixture.attacker_imsi.clone(),
                "attacker handset",
            ),
        ),
        // A captured authentication password pasted into the password field.
        Scenario::ReplayAp => (
            &fixture.login_name,
            fixture.authentication_password.as_str(),
            fixture.victim_device(),
        ),
        // Same subscriber, IMEI one digit off.
        Scenario::WrongDevice => (
            &fixture.login_name,
            &fixture.login_password,
            SimDevice::new(
                imei_with_one_digit_changed(&fixture.victim_imei),
                fixture.victim_imsi.clone(),
                "near-identical device",
            ),
        ),
    };

    let mut client = SimClient::new(client_end, device, format!("scenario-{}", scenario.name()));
    let name_reply = client.submit_name(name)?;
    if proceeded(&name_reply) {
        client.submit_password(password)?;
    }
    let transcript = client.into_transcript();

    let (events, server_result) = server.join().expect("server thread panicked");
    server_result?;

    Ok(ScenarioReport {
        scenario,
        verdict: verdict_from_events(&events),
        transcript,
        events,
    })
}
