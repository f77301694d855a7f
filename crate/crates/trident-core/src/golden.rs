//! Built-in reference vectors.
//!
//! Two fixed conversion examples ship with the crate: a login-password
//! conversion (credential `dp7a3k`) whose composed authentication password is
//! known, and a username conversion (credential `benz428`) with a known
//! identifier extraction. The CLI `demo-fig1` / `demo-fig2` commands print
//! them, and the test suites pin the implementation against them.

use std::collections::BTreeMap;

use crate::matrix_hash::{
    valid_login_chars, CellColumn, Codebook, CodebookEntry, PlanCell, SelectionPlan, ShuffleLabel,
};

/// Credential of the login-password reference conversion.
pub const FIG1_CREDENTIAL: &str = "dp7a3k";

/// Composed authentication password of the `dp7a3k` conversion.
pub const FIG1_AUTHENTICATION_PASSWORD: &str = "3MovQX#&(EPC9L$d?G%z";

/// Accumulated text after the first shuffle step (`vX#` at `4F`).
pub const FIG1_AFTER_STEP_4F: &str = "3MovX#&(E";

/// Accumulated text after the second step: point 16 clamps to an append and
/// the `R` direction reverses the payload `z%9CP`.
pub const FIG1_AFTER_STEP_16R: &str = "3MovX#&(EPC9%z";

/// Credential of the username reference conversion.
pub const FIG2_CREDENTIAL: &str = "benz428";

/// Identifier extracted from the `benz428` matrix by [`fig2_plan`].
pub const FIG2_IDENTIFIER: &str = "4O^&17R2zF=";

fn label(text: &str) -> ShuffleLabel {
    text.parse().expect("reference labels are well-formed")
}

/// Deterministic filler conversion unit for characters not pinned by a
/// reference vector. Valid but otherwise arbitrary.
fn filler_entry(ch: char) -> CodebookEntry {
    let code = ch as u32;
    let digit = 1 + (code % 9) as u8;
    let string: String = (0..digit)
        .map(|i| char::from(0x21 + ((code + 7 * u32::from(i) + 13) % 94) as u8))
        .collect();
    CodebookEntry { digit, string }
}

fn codebook_with(pinned: &[(char, u8, &str)]) -> Codebook {
    let mut entries: BTreeMap<char, CodebookEntry> = valid_login_chars()
        .map(|ch| (ch, filler_entry(ch)))
        .collect();
    for (ch, digit, string) in pinned {
        entries.insert(
            *ch,
            CodebookEntry {
                digit: *digit,
                string: (*string).to_owned(),
            },
        );
    }
    Codebook::from_entries(entries).expect("reference codebook is valid")
}

/// Codebook of the login-password reference conversion. Only the six
/// credential characters are pinned; the rest are deterministic filler.
pub fn fig1_codebook() -> Codebook {
    codebook_with(&[
        ('d', 6, "3Mo&(E"),
        ('p', 3, "vX#"),
        ('7', 5, "z%9CP"),
        ('a', 2, "?G"),
        ('3', 3, "d$L"),
        ('k', 1, "Q"),
    ])
}

/// Label sequence of the login-password reference conversion (rows 2..6).
pub fn fig1_labels() -> Vec<ShuffleLabel> {
    ["4F", "16R", "13F", "13R", "5F"].map(label).to_vec()
}

/// Codebook of the username reference conversion.
pub fn fig2_codebook() -> Codebook {
    codebook_with(&[
        ('b', 3, "y]Q"),
        ('e', 5, "#ws%8"),
        ('n', 3, "O^&"),
        ('z', 2, "$d"),
        ('4', 3, ")Lh"),
        ('2', 3, "zF="),
        ('8', 1, "m"),
    ])
}

/// Label sequence of the username reference conversion (rows 2..7).
pub fn fig2_labels() -> Vec<ShuffleLabel> {
    ["5F", "9R", "17R", "13F", "8F", "11F"].map(label).to_vec()
}

/// Selection plan whose extraction over the `benz428` matrix yields
/// [`FIG2_IDENTIFIER`].
pub fn fig2_plan() -> SelectionPlan {
    SelectionPlan::new(vec![
        PlanCell {
            row: 5,
            column: CellColumn::LoginChar,
        },
        PlanCell {
            row: 3,
            column: CellColumn::String,
        },
        PlanCell {
            row: 4,
            column: CellColumn::Label,
        },
        PlanCell {
            row: 6,
            column: CellColumn::LoginChar,
        },
        PlanCell {
            row: 6,
            column: CellColumn::String,
        },
    ])
}

/// A valid (checksummed) device identity usable in examples and tests.
pub const SAMPLE_IMEI: &str = "490154203237518";
pub const SAMPLE_IMSI: &str = "310150123456789";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_codebooks_are_valid() {
        fig1_codebook().validate().unwrap();
        fig2_codebook().validate().unwrap();
    }

    #[test]
    fn reference_label_counts_match_credentials() {
        assert_eq!(fig1_labels().len(), FIG1_CREDENTIAL.len() - 1);
        assert_eq!(fig2_labels().len(), FIG2_CREDENTIAL.len() - 1);
    }
}
