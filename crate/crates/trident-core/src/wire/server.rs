//! Reference server: drives the three gates over framed connections.
//!
//! Per connection the server expects a `NAME` frame and then a `PASSWORD`
//! frame. Each gate answers with a `RESULT`; a pass at the password gate is
//! followed immediately by the server authentication point, which emits the
//! `TOKEN` on success. Credential text is run through the field input
//! filter before any gate is invoked, and every denial — filter, gate, or
//! protocol violation — sends the same `RESULT` and closes the connection.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::account_store::AccountStore;
use crate::entropy::{EntropySource, OsEntropy};
use crate::gatekeeper::{
    gate_login_name, gate_login_password, gate_server_authentication, register_account,
    AuthResult, DeviceIdentity, GateSession, RegistrationRequest,
};
use crate::identity::{validate_imei, validate_imsi};

use super::{
    decode_message, encode_message, field_filter_accepts, read_frame, Message, WireError,
    OUTCOME_DENIED, OUTCOME_PROCEED,
};

/// Store shared between connections: many readers, single writer.
pub type SharedStore = Arc<RwLock<AccountStore>>;

/// The three interaction points, as seen by connection instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePoint {
    Name,
    Password,
    ServerAuth,
}

/// What happened inside one connection, in order. The attack harness reads
/// these to attribute a denial; none of it is visible on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    FilterRejected(GatePoint),
    DeviceRejected,
    GateProceeded(GatePoint),
    GateDenied(GatePoint),
    TokenIssued,
    Registered,
    RegistrationDenied,
    ProtocolViolation,
}

fn send(stream: &mut impl Write, message: &Message) -> Result<(), WireError> {
    let frame = encode_message(message)?;
    stream.write_all(&frame)?;
    stream.flush()?;
    Ok(())
}

fn send_deny(stream: &mut impl Write) -> Result<(), WireError> {
    send(
        stream,
        &Message::Result {
            outcome: OUTCOME_DENIED.into(),
        },
    )
}

fn send_proceed(stream: &mut impl Write) -> Result<(), WireError> {
    send(
        stream,
        &Message::Result {
            outcome: OUTCOME_PROCEED.into(),
        },
    )
}

/// Parse device attestation fields. Format-only (no checksum): a device
/// lying about its identity is judged by the gates, not the parser.
fn parse_device(imei: &str, imsi: &str) -> Option<DeviceIdentity> {
    let imei = validate_imei(imei, false).ok()?;
    let imsi = validate_imsi(imsi).ok()?;
    Some(DeviceIdentity { imei, imsi })
}

/// Drive one connection to completion. Returns when the peer closes, after
/// a token is issued, or after any denial.
pub fn handle_connection<S: Read + Write, E: EntropySource>(
    stream: &mut S,
    store: &SharedStore,
    entropy: &mut E,
    events: &mut Vec<ServerEvent>,
) -> Result<(), WireError> {
    let mut session: Option<GateSession> = None;

    loop {
        let payload = match read_frame(stream)? {
            Some(p) => p,
            None => return Ok(()), // peer closed
        };
        let message = match decode_message(&payload) {
            Ok(m) => m,
            Err(_) => {
                events.push(ServerEvent::ProtocolViolation);
                send_deny(stream)?;
                return Ok(());
            }
        };

        match message {
            Message::Register {
                name,
                phone,
                password,
                imei,
                imsi,
                ..
            } => {
                if session.is_some() {
                    events.push(ServerEvent::ProtocolViolation);
                    send_deny(stream)?;
                    return Ok(());
                }
                let request = RegistrationRequest::new(
                    &name,
                    phone.as_deref(),
                    &password,
                    &imei,
                    &imsi,
                );
                let outcome = {
                    let mut guard = store.write().expect("store lock poisoned");
                    register_account(&guard, &request, entropy)
                        .map_err(|e| e.to_string())
                        .and_then(|registered| {
                            guard
                                .save_account(registered.record)
                                .map_err(|e| e.to_string())
                        })
                };
                match outcome {
                    Ok(()) => {
                        events.push(ServerEvent::Registered);
                        send_proceed(stream)?;
                    }
                    Err(_) => {
                        events.push(ServerEvent::RegistrationDenied);
                        send_deny(stream)?;
                    }
                }
                return Ok(());
            }
            Message::Name {
                session: session_id,
                credential,
                imei,
                imsi,
            } => {
                if session.is_some() {
                    events.push(ServerEvent::ProtocolViolation);
                    send_deny(stream)?;
                    return Ok(());
                }
                if !field_filter_accepts(&credential) {
                    events.push(ServerEvent::FilterRejected(GatePoint::Name));
                    send_deny(stream)?;
                    return Ok(());
                }
                let device = match parse_device(&imei, &imsi) {
                    Some(d) => d,
                    None => {
                        events.push(ServerEvent::DeviceRejected);
                        send_deny(stream)?;
                        return Ok(());
                    }
                };
                let mut gate_session = GateSession::new(session_id, device.clone());
                let guard = store.read().expect("store lock poisoned");
                let result = gate_login_name(&guard, &mut gate_session, &credential, &device);
                drop(guard);
                if result.proceeded() {
                    events.push(ServerEvent::GateProceeded(GatePoint::Name));
                    send_proceed(stream)?;
                    session = Some(gate_session);
                } else {
                    events.push(ServerEvent::GateDenied(GatePoint::Name));
                    send_deny(stream)?;
                    return Ok(());
                }
            }
            Message::Password {
                session: session_id,
                credential,
                imei,
                imsi,
            } => {
                let mut gate_session = match session.take() {
                    Some(s) if s.session_id() == session_id => s,
                    _ => {
                        events.push(ServerEvent::ProtocolViolation);
                        send_deny(stream)?;
                        return Ok(());
                    }
                };
                if !field_filter_accepts(&credential) {
                    events.push(ServerEvent::FilterRejected(GatePoint::Password));
                    send_deny(stream)?;
                    return Ok(());
                }
                let device = match parse_device(&imei, &imsi) {
                    Some(d) => d,
                    None => {
                        events.push(ServerEvent::DeviceRejected);
                        send_deny(stream)?;
                        return Ok(());
                    }
                };
                let guard = store.read().expect("store lock poisoned");
                let result =
                    gate_login_password(&guard, &mut gate_session, &credential, &device);
                if !result.proceeded() {
                    drop(guard);
                    events.push(ServerEvent::GateDenied(GatePoint::Password));
                    send_deny(stream)?;
                    return Ok(());
                }
                events.push(ServerEvent::GateProceeded(GatePoint::Password));
                send_proceed(stream)?;

                // The third interaction point runs server-side immediately;
                // no further user input exists for it.
                let auth = gate_server_authentication(&guard, &mut gate_session, entropy);
                drop(guard);
                match auth {
                    AuthResult::Authenticated(token) => {
                        events.push(ServerEvent::TokenIssued);
                        send(
                            stream,
                            &Message::Token {
                                token_hex: token.hex(),
                            },
                        )?;
                    }
                    AuthResult::Denied => {
                        events.push(ServerEvent::GateDenied(GatePoint::ServerAuth));
                        send_deny(stream)?;
                    }
                }
                return Ok(());
            }
            Message::Result { .. } | Message::Token { .. } => {
                events.push(ServerEvent::ProtocolViolation);
                send_deny(stream)?;
                return Ok(());
            }
        }
    }
}

/// Handle to a running TCP server.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: JoinHandle<()>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stop accepting, wake the accept loop, and join all threads.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr); // wake the accept loop
        let _ = self.accept_thread.join();
        let handles: Vec<_> = std::mem::take(&mut *self.connections.lock().unwrap());
        for h in handles {
            let _ = h.join();
        }
    }
}

/// Spawn the accept loop on a background thread. Each connection runs on
/// its own thread with OS entropy; events are discarded in TCP mode.
pub fn spawn_server(listener: TcpListener, store: SharedStore) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));

    let accept_stop = Arc::clone(&stop);
    let accept_connections = Arc::clone(&connections);
    let accept_thread = std::thread::spawn(move || {
        for incoming in listener.incoming() {
            if accept_stop.load(Ordering::SeqCst) {
                break;
            }
            let mut stream = match incoming {
                Ok(s) => s,
                Err(_) => continue,
            };
            let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
            let store = Arc::clone(&store);
            let handle = std::thread::spawn(move || {
                let mut entropy = OsEntropy;
                let mut events = Vec::new();
                let _ = handle_connection(&mut stream, &store, &mut entropy, &mut events);
            });
            accept_connections.lock().unwrap().push(handle);
        }
    });

    Ok(ServerHandle {
        addr,
        stop,
        accept_thread,
        connections,
    })
}

/// Run the server in the foreground until the process is stopped.
pub fn run_server(listener: TcpListener, store: SharedStore) -> std::io::Result<()> {
    for incoming in listener.incoming() {
        let mut stream = match incoming {
            Ok(s) => s,
            Err(_) => continue,
        };
        let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
        let store = Arc::clone(&store);
        std::thread::spawn(move || {
            let mut entropy = OsEntropy;
            let mut events = Vec::new();
            let _ = handle_connection(&mut stream, &store, &mut entropy, &mut events);
        });
    }
    Ok(())
}
