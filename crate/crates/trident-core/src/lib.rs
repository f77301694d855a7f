//! Triple-identity authentication reference implementation.
//!
//! A login system in which every credential entered through a login field is
//! converted by a per-account, table-driven "matrix" hash into a matrix of
//! hash elements. The server never verifies credentials against the hash
//! output alone: each credential is bound to the device (IMEI) and subscriber
//! (IMSI) identity as a salted combined-identity digest, and additionally
//! verified against a secret identifier assembled from randomly selected
//! matrix cells. Identifiers live only inside the server; they are never
//! transmitted, displayed, or accepted as input.
//!
//! Crate layout:
//! - [`matrix_hash`] — the open hash algorithm: codebooks, shuffle labels,
//!   authentication-password composition, identifier extraction.
//! - [`identity`] — credential/IMEI/IMSI validation and combined identities.
//! - [`gatekeeper`] — registration and the three verification gates.
//! - [`account_store`] — durable newline-delimited JSON persistence.
//! - [`wire`] — framed client/server protocol, simulated devices, and the
//!   attack-scenario harness.
//! - [`entropy`] — pluggable randomness (OS, seeded, recorded-replay).
//! - [`golden`] — built-in reference vectors used by demos and tests.

pub mod account_store;
pub mod entropy;
pub mod gatekeeper;
pub mod golden;
pub mod identity;
pub mod matrix_hash;
pub mod wire;
