//! Identity elements and combined identities.
//!
//! Three identity elements take part in every verification: the credential
//! entered through a login field, the device IMEI, and the subscriber IMSI.
//! This module validates and normalizes each element, enforces the split
//! password policies (short friendly login passwords, long multi-class
//! authentication passwords), and binds the three elements together as a
//! salted [`CombinedIdentity`] digest.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix_hash::is_valid_login_char;

/// Separator byte between the credential, IMEI, and IMSI in the canonical
/// combined-identity form. Outside the printable range, so it can never
/// occur inside any credential.
pub const IDENTITY_SEPARATOR: u8 = 0x1F;

pub const SALT_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;

/// Login-password length bounds.
pub const LOGIN_PASSWORD_MIN: usize = 5;
pub const LOGIN_PASSWORD_MAX: usize = 15;

/// Authentication-password minimum length.
pub const AUTH_PASSWORD_MIN: usize = 20;

/// Login-name maximum length after normalization.
pub const LOGIN_NAME_MAX: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImeiError {
    #[error("IMEI must be exactly 15 digits, got {got}")]
    BadLength { got: usize },
    #[error("IMEI contains non-digit character {ch:?}")]
    BadChar { ch: char },
    #[error("IMEI checksum invalid")]
    BadChecksum,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImsiError {
    #[error("IMSI must be exactly 15 digits, got {got}")]
    BadLength { got: usize },
    #[error("IMSI contains non-digit character {ch:?}")]
    BadChar { ch: char },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoginNameError {
    #[error("login name is empty after normalization")]
    EmptyAfterNormalization,
    #[error("login name exceeds {max} characters after normalization", max = LOGIN_NAME_MAX)]
    TooLong { got: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoginPasswordError {
    #[error("login password shorter than {min} characters", min = LOGIN_PASSWORD_MIN)]
    TooShort { got: usize },
    #[error("login password longer than {max} characters", max = LOGIN_PASSWORD_MAX)]
    TooLong { got: usize },
    #[error("login password contains invalid character {ch:?}")]
    InvalidCharacter { ch: char },
}

/// 15-digit device identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Imei(String);

impl Imei {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for Imei {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// 15-digit subscriber identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Imsi(String);

impl Imsi {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for Imsi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_15_digits(text: &str) -> Result<(), (Option<char>, usize)> {
    if let Some(ch) = text.chars().find(|c| !c.is_ascii_digit()) {
        return Err((Some(ch), text.len()));
    }
    if text.len() != 15 {
        return Err((None, text.len()));
    }
    Ok(())
}

/// Luhn validity over all the digits: doubling every second digit from the
/// right, the decimal digit sum must be divisible by ten.
pub fn luhn_valid(digits: &str) -> bool {
    let mut sum = 0u32;
    for (i, ch) in digits.chars().rev().enumerate() {
        let d = ch.to_digit(10).expect("caller checked digits");
        let term = if i % 2 == 1 {
            let doubled = d * 2;
            if doubled > 9 {
                doubled - 9
            } else {
                doubled
            }
        } else {
            d
        };
        sum += term;
    }
    sum.is_multiple_of(10)
}

/// The digit completing `prefix` so that the whole string is Luhn-valid.
pub fn luhn_check_digit(prefix: &str) -> char {
    ('0'..='9')
        .find(|c| luhn_valid(&format!("{prefix}{c}")))
        .expect("one of ten digits always completes the checksum")
}

/// Validate a device identity: 15 decimal digits, checksum-valid when
/// `strict_luhn` is set. Registration uses strict mode; login-time device
/// attestation is format-only so wrong-device attempts are judged by the
/// gates rather than rejected at parse time.
pub fn validate_imei(text: &str, strict_luhn: bool) -> Result<Imei, ImeiError> {
    match check_15_digits(text) {
        Err((Some(ch), _)) => return Err(ImeiError::BadChar { ch }),
        Err((None, got)) => return Err(ImeiError::BadLength { got }),
        Ok(()) => {}
    }
    if strict_luhn && !luhn_valid(text) {
        return Err(ImeiError::BadChecksum);
    }
    Ok(Imei(text.to_owned()))
}

/// Validate a subscriber identity: exactly 15 decimal digits.
pub fn validate_imsi(text: &str) -> Result<Imsi, ImsiError> {
    match check_15_digits(text) {
        Err((Some(ch), _)) => Err(ImsiError::BadChar { ch }),
        Err((None, got)) => Err(ImsiError::BadLength { got }),
        Ok(()) => Ok(Imsi(text.to_owned())),
    }
}

/// Whether a normalized login name is a username or a phone number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoginNameKind {
    Username,
    PhoneNumber,
}

/// A normalized login name: 1..=32 characters from a-z0-9.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginName {
    pub normalized: String,
    pub kind: LoginNameKind,
}

impl LoginName {
    pub fn as_str(&self) -> &str {
        &self.normalized
    }
}

/// Normalize a raw login name: keep only the part before any `@`, lowercase
/// letters, strip everything outside a-z0-9. The result classifies as a
/// phone number when it is all digits and the raw input contained no letters.
pub fn normalize_login_name(raw: &str) -> Result<LoginName, LoginNameError> {
    let local_part = match raw.find('@') {
        Some(at) => &raw[..at],
        None => raw,
    };
    let normalized: String = local_part
        .chars()
        .filter_map(|c| {
            if c.is_ascii_alphanumeric() {
                Some(c.to_ascii_lowercase())
            } else {
                None
            }
        })
        .collect();
    if normalized.is_empty() {
        return Err(LoginNameError::EmptyAfterNormalization);
    }
    if normalized.len() > LOGIN_NAME_MAX {
        return Err(LoginNameError::TooLong {
            got: normalized.len(),
        });
    }
    let raw_has_letters = raw.chars().any(|c| c.is_ascii_alphabetic());
    let kind = if !raw_has_letters && normalized.bytes().all(|b| b.is_ascii_digit()) {
        LoginNameKind::PhoneNumber
    } else {
        LoginNameKind::Username
    };
    Ok(LoginName { normalized, kind })
}

/// An accepted login password: 5..=15 characters, lowercase letters and
/// digits only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginPassword(String);

impl LoginPassword {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Enforce the login-password policy. Anything outside a-z0-9 is an invalid
/// character, matching the login-field input filter.
pub fn check_login_password_policy(value: &str) -> Result<LoginPassword, LoginPasswordError> {
    if let Some(ch) = value.chars().find(|c| !is_valid_login_char(*c)) {
        return Err(LoginPasswordError::InvalidCharacter { ch });
    }
    let len = value.chars().count();
    if len < LOGIN_PASSWORD_MIN {
        return Err(LoginPasswordError::TooShort { got: len });
    }
    if len > LOGIN_PASSWORD_MAX {
        return Err(LoginPasswordError::TooLong { got: len });
    }
    Ok(LoginPassword(value.to_owned()))
}

/// Verdict of the authentication-password policy check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApPolicyVerdict {
    Pass,
    TooShort { length: usize },
    MissingClasses { missing: Vec<&'static str> },
}

impl ApPolicyVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, ApPolicyVerdict::Pass)
    }
}

/// Check an authentication password against policy: at least 20 characters
/// and all four character classes (uppercase, lowercase, digit, symbol).
pub fn check_authentication_password_policy(value: &str) -> ApPolicyVerdict {
    let length = value.chars().count();
    if length < AUTH_PASSWORD_MIN {
        return ApPolicyVerdict::TooShort { length };
    }
    let mut upper = false;
    let mut lower = false;
    let mut digit = false;
    let mut symbol = false;
    for c in value.chars() {
        if c.is_ascii_uppercase() {
            upper = true;
        } else if c.is_ascii_lowercase() {
            lower = true;
        } else if c.is_ascii_digit() {
            digit = true;
        } else {
            symbol = true;
        }
    }
    let mut missing = Vec::new();
    if !upper {
        missing.push("uppercase");
    }
    if !lower {
        missing.push("lowercase");
    }
    if !digit {
        missing.push("digit");
    }
    if !symbol {
        missing.push("symbol");
    }
    if missing.is_empty() {
        ApPolicyVerdict::Pass
    } else {
        ApPolicyVerdict::MissingClasses { missing }
    }
}

/// A credential bound to a device and service: the canonical byte form
/// `credential 0x1F imei 0x1F imsi` plus its salted SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedIdentity {
    pub canonical: Vec<u8>,
    pub salt: [u8; SALT_LEN],
    pub digest: [u8; DIGEST_LEN],
}

/// Build the combined identity for an already-validated credential.
/// Deterministic in all four inputs.
pub fn combine_identity(
    credential: &str,
    imei: &Imei,
    imsi: &Imsi,
    salt: [u8; SALT_LEN],
) -> CombinedIdentity {
    let mut canonical =
        Vec::with_capacity(credential.len() + imei.as_str().len() + imsi.as_str().len() + 2);
    canonical.extend_from_slice(credential.as_bytes());
    canonical.push(IDENTITY_SEPARATOR);
    canonical.extend_from_slice(imei.as_bytes());
    canonical.push(IDENTITY_SEPARATOR);
    canonical.extend_from_slice(imsi.as_bytes());

    let digest = salted_digest(&salt, &canonical);
    CombinedIdentity {
        canonical,
        salt,
        digest,
    }
}

/// SHA-256 over `salt || canonical`.
pub fn salted_digest(salt: &[u8; SALT_LEN], canonical: &[u8]) -> [u8; DIGEST_LEN] {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(canonical);
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{EntropySource, SeededEntropy};
    use proptest::prelude::*;
    use std::collections::HashSet;

    /// Independent checksum oracle: pick the check digit by trying all ten
    /// candidates against a from-scratch doubling-table validity check.
    fn oracle_check_digit(prefix14: &str) -> char {
        const DOUBLE: [u32; 10] = [0, 2, 4, 6, 8, 1, 3, 5, 7, 9];
        for candidate in '0'..='9' {
            let full: String = format!("{prefix14}{candidate}");
            let mut sum = 0;
            for (i, ch) in full.chars().enumerate() {
                let d = ch.to_digit(10).unwrap();
                // Positions 2, 4, ... counted from the left of a 15-digit
                // string are the doubled ones.
                sum += if i % 2 == 1 { DOUBLE[d as usize] } else { d };
            }
            if sum % 10 == 0 {
                return candidate;
            }
        }
        unreachable!("some digit always completes the checksum");
    }

    #[test]
    fn all_zero_imei_is_valid_strict() {
        assert!(validate_imei("000000000000000", true).is_ok());
    }

    #[test]
    fn imei_rejects_bad_length() {
        assert_eq!(
            validate_imei("12345", true),
            Err(ImeiError::BadLength { got: 5 })
        );
    }

    #[test]
    fn imei_rejects_bad_char() {
        assert_eq!(
            validate_imei("49015420323751X", true),
            Err(ImeiError::BadChar { ch: 'X' })
        );
    }

    #[test]
    fn imei_accepts_oracle_completed_checksum() {
        let prefix = "49015420323751";
        let check = oracle_check_digit(prefix);
        let imei = format!("{prefix}{check}");
        assert!(validate_imei(&imei, true).is_ok());
        // Every other final digit must fail strict validation.
        for wrong in '0'..='9' {
            if wrong != check {
                assert_eq!(
                    validate_imei(&format!("{prefix}{wrong}"), true),
                    Err(ImeiError::BadChecksum)
                );
            }
        }
    }

    #[test]
    fn lenient_mode_skips_checksum() {
        assert!(validate_imei("490154203237511", false).is_ok());
    }

    #[test]
    fn imsi_validation() {
        assert!(validate_imsi("310150123456789").is_ok());
        assert_eq!(
            validate_imsi("31015012345678"),
            Err(ImsiError::BadLength { got: 14 })
        );
        assert_eq!(
            validate_imsi("31015012345678X"),
            Err(ImsiError::BadChar { ch: 'X' })
        );
    }

    #[test]
    fn normalize_keeps_email_local_part() {
        let name = normalize_login_name("Benz428@woxinet.com").unwrap();
        assert_eq!(name.normalized, "benz428");
        assert_eq!(name.kind, LoginNameKind::Username);
    }

    #[test]
    fn normalize_strips_punctuation() {
        let name = normalize_login_name("a.b_c").unwrap();
        assert_eq!(name.normalized, "abc");
        assert_eq!(name.kind, LoginNameKind::Username);
    }

    #[test]
    fn normalize_classifies_phone_numbers() {
        let name = normalize_login_name("+1 415 555 0133").unwrap();
        assert_eq!(name.normalized, "14155550133");
        assert_eq!(name.kind, LoginNameKind::PhoneNumber);
    }

    #[test]
    fn digits_with_lettered_raw_stay_usernames() {
        let name = normalize_login_name("428@list.com").unwrap();
        assert_eq!(name.normalized, "428");
        assert_eq!(name.kind, LoginNameKind::Username);
    }

    #[test]
    fn normalize_rejects_empty_results() {
        assert_eq!(
            normalize_login_name("@example.com"),
            Err(LoginNameError::EmptyAfterNormalization)
        );
        assert_eq!(
            normalize_login_name("..."),
            Err(LoginNameError::EmptyAfterNormalization)
        );
    }

    #[test]
    fn normalize_rejects_overlong_names() {
        let raw = "a".repeat(LOGIN_NAME_MAX + 1);
        assert_eq!(
            normalize_login_name(&raw),
            Err(LoginNameError::TooLong {
                got: LOGIN_NAME_MAX + 1
            })
        );
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "[ -~]{1,40}") {
            if let Ok(once) = normalize_login_name(&raw) {
                let twice = normalize_login_name(&once.normalized).unwrap();
                prop_assert_eq!(once.normalized, twice.normalized);
            }
        }
    }

    #[test]
    fn login_password_policy() {
        assert!(check_login_password_policy("dp7a3k").is_ok());
        assert_eq!(
            check_login_password_policy("dP7a3k"),
            Err(LoginPasswordError::InvalidCharacter { ch: 'P' })
        );
        assert_eq!(
            check_login_password_policy("ab1"),
            Err(LoginPasswordError::TooShort { got: 3 })
        );
        assert_eq!(
            check_login_password_policy("abcdefghij123456"),
            Err(LoginPasswordError::TooLong { got: 16 })
        );
        assert_eq!(
            check_login_password_policy("abc 3k"),
            Err(LoginPasswordError::InvalidCharacter { ch: ' ' })
        );
    }

    #[test]
    fn ap_policy_accepts_reference_password() {
        assert!(check_authentication_password_policy(crate::golden::FIG1_AUTHENTICATION_PASSWORD)
            .is_pass());
    }

    #[test]
    fn ap_policy_rejects_short_and_single_class() {
        assert_eq!(
            check_authentication_password_policy("3MovQX#&(EPC9L$d?G%"),
            ApPolicyVerdict::TooShort { length: 19 }
        );
        let verdict = check_authentication_password_policy("abcdefghijklmnopqrstuvwxy");
        assert!(matches!(verdict, ApPolicyVerdict::MissingClasses { .. }));
    }

    #[test]
    fn combined_identity_canonical_form() {
        let imei = validate_imei("000000000000000", true).unwrap();
        let imsi = validate_imsi("310150123456789").unwrap();
        let identity = combine_identity("dp7a3k", &imei, &imsi, [0u8; SALT_LEN]);
        let mut expected = b"dp7a3k".to_vec();
        expected.push(0x1F);
        expected.extend_from_slice(b"000000000000000");
        expected.push(0x1F);
        expected.extend_from_slice(b"310150123456789");
        assert_eq!(identity.canonical, expected);
        assert_eq!(
            identity.canonical.iter().filter(|b| **b == 0x1F).count(),
            2
        );

        let again = combine_identity("dp7a3k", &imei, &imsi, [0u8; SALT_LEN]);
        assert_eq!(identity.digest, again.digest);
        assert_eq!(
            identity.digest,
            salted_digest(&identity.salt, &identity.canonical)
        );
    }

    #[test]
    fn imsi_digit_flip_changes_digest() {
        let imei = validate_imei("000000000000000", true).unwrap();
        let imsi_a = validate_imsi("310150123456789").unwrap();
        let imsi_b = validate_imsi("310150123456780").unwrap();
        let a = combine_identity("dp7a3k", &imei, &imsi_a, [7u8; SALT_LEN]);
        let b = combine_identity("dp7a3k", &imei, &imsi_b, [7u8; SALT_LEN]);
        assert_ne!(a.digest, b.digest);
    }

    #[test]
    fn digests_are_collision_free_over_many_random_triples() {
        let mut entropy = SeededEntropy::from_seed_bytes(b"identity collision sweep");
        let mut digests: HashSet<[u8; DIGEST_LEN]> = HashSet::new();
        let mut triples: HashSet<(String, String, String)> = HashSet::new();
        let salt = [3u8; SALT_LEN];
        let mut buf = [0u8; 16];
        while triples.len() < 100_000 {
            entropy.fill_bytes(&mut buf).unwrap();
            let cred: String = buf[..8]
                .iter()
                .map(|b| char::from(b'a' + b % 26))
                .collect();
            let imei_digits: String = buf[4..12].iter().map(|b| char::from(b'0' + b % 10)).collect();
            let imsi_digits: String = buf[8..16].iter().map(|b| char::from(b'0' + b % 10)).collect();
            let imei_text = format!("{imei_digits}0000000");
            let imsi_text = format!("{imsi_digits}0000000");
            if !triples.insert((cred.clone(), imei_text.clone(), imsi_text.clone())) {
                continue;
            }
            let imei = validate_imei(&imei_text, false).unwrap();
            let imsi = validate_imsi(&imsi_text).unwrap();
            let identity = combine_identity(&cred, &imei, &imsi, salt);
            assert!(
                digests.insert(identity.digest),
                "digest collision for {cred} {imei_text} {imsi_text}"
            );
        }
    }
}
