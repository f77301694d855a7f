//! The matrix-like open hash algorithm.
//!
//! A credential typed into a login field is converted row by row through a
//! per-account [`Codebook`]: each valid login character maps to a digit and a
//! random converted string of that length. Rows after the first carry a
//! [`ShuffleLabel`] instructing how the row's converted string is spliced
//! into the accumulating text, like shuffling cards into a deck. Executing
//! every label yields the authentication password. Because the whole matrix
//! of intermediate elements stays available to the local system, secret
//! identifiers can be assembled from any selection of its cells
//! ([`extract_identifier`]) — that openness is what the rest of the crate
//! builds on.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{uniform_below, EntropyError, EntropySource};

/// Characters accepted by the login fields: lowercase letters and digits.
pub fn is_valid_login_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit()
}

/// The 36 valid login characters in canonical (codebook) order.
pub fn valid_login_chars() -> impl Iterator<Item = char> {
    ('a'..='z').chain('0'..='9')
}

const PRINTABLE_MIN: u8 = 0x21;
const PRINTABLE_COUNT: u32 = 94; // 0x21..=0x7E

/// Largest insertion point drawn for fresh labels. Points beyond the current
/// text length clamp to an append, so over-range draws are legal.
pub const LABEL_POINT_DRAW_MAX: u32 = 24;

/// Cell-count bounds for freshly drawn selection plans.
pub const PLAN_MIN_CELLS: usize = 4;
pub const PLAN_MAX_CELLS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixHashError {
    #[error("credential is empty")]
    EmptyCredential,
    #[error("invalid login character {ch:?}")]
    InvalidCharacter { ch: char },
    #[error("label count mismatch: expected {expected}, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("selection plan cell ({row}, {column:?}) outside matrix bounds")]
    PlanOutOfBounds { row: usize, column: CellColumn },
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("invalid selection plan: {0}")]
    InvalidPlan(String),
    #[error("invalid shuffle label: {0}")]
    InvalidLabel(String),
}

/// Insertion order for a shuffle step: payload as-is or reversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn as_char(self) -> char {
        match self {
            Direction::Forward => 'F',
            Direction::Reverse => 'R',
        }
    }
}

/// A shuffle instruction: decimal insertion point followed by `F` or `R`,
/// e.g. `4F` or `16R`. Point `k` means "insert before the k-th character";
/// points past the end of the text clamp to an append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShuffleLabel {
    point: u32,
    direction: Direction,
}

impl ShuffleLabel {
    pub fn new(point: u32, direction: Direction) -> Result<Self, MatrixHashError> {
        if point == 0 {
            return Err(MatrixHashError::InvalidLabel(
                "insertion point must be at least 1".into(),
            ));
        }
        Ok(Self { point, direction })
    }

    pub fn point(&self) -> u32 {
        self.point
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Text form, e.g. `16R`.
    pub fn render(&self) -> String {
        format!("{}{}", self.point, self.direction.as_char())
    }
}

impl fmt::Display for ShuffleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.point, self.direction.as_char())
    }
}

impl FromStr for ShuffleLabel {
    type Err = MatrixHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MatrixHashError::InvalidLabel(format!("malformed label {s:?}"));
        if s.len() < 2 {
            return Err(bad());
        }
        let (digits, dir) = s.split_at(s.len() - 1);
        let direction = match dir {
            "F" => Direction::Forward,
            "R" => Direction::Reverse,
            _ => return Err(bad()),
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let point: u32 = digits.parse().map_err(|_| bad())?;
        ShuffleLabel::new(point, direction)
    }
}

impl Serialize for ShuffleLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for ShuffleLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One conversion unit: the digit picked for a login character and the
/// random converted string of exactly that length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub digit: u8,
    pub string: String,
}

impl CodebookEntry {
    fn check(&self, ch: char) -> Result<(), MatrixHashError> {
        if !(1..=9).contains(&self.digit) {
            return Err(MatrixHashError::InvalidCodebook(format!(
                "digit {} for {ch:?} outside 1..9",
                self.digit
            )));
        }
        if self.string.len() != usize::from(self.digit) {
            return Err(MatrixHashError::InvalidCodebook(format!(
                "string length {} for {ch:?} does not match digit {}",
                self.string.len(),
                self.digit
            )));
        }
        if !self.string.bytes().all(|b| (0x21..=0x7E).contains(&b)) {
            return Err(MatrixHashError::InvalidCodebook(format!(
                "string for {ch:?} contains non-printable characters"
            )));
        }
        Ok(())
    }
}

/// Per-account secret table mapping each of the 36 valid login characters to
/// its conversion unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Codebook {
    entries: BTreeMap<char, CodebookEntry>,
}

impl Codebook {
    pub fn from_entries(entries: BTreeMap<char, CodebookEntry>) -> Result<Self, MatrixHashError> {
        let codebook = Self { entries };
        codebook.validate()?;
        Ok(codebook)
    }

    pub fn entry(&self, ch: char) -> Option<&CodebookEntry> {
        self.entries.get(&ch)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&char, &CodebookEntry)> {
        self.entries.iter()
    }

    /// Structural validity, re-checked when records are loaded from disk.
    pub fn validate(&self) -> Result<(), MatrixHashError> {
        for ch in valid_login_chars() {
            match self.entries.get(&ch) {
                Some(entry) => entry.check(ch)?,
                None => {
                    return Err(MatrixHashError::InvalidCodebook(format!(
                        "missing entry for {ch:?}"
                    )))
                }
            }
        }
        if self.entries.len() != 36 {
            return Err(MatrixHashError::InvalidCodebook(format!(
                "expected 36 entries, got {}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// Replace the conversion units for the given characters with fresh
    /// draws. Used when a composed authentication password misses policy and
    /// the credential's rows must be resampled.
    pub fn redraw_entries<E: EntropySource>(
        &mut self,
        chars: impl IntoIterator<Item = char>,
        entropy: &mut E,
    ) -> Result<(), EntropyError> {
        for ch in chars {
            let entry = draw_entry(entropy)?;
            self.entries.insert(ch, entry);
        }
        Ok(())
    }
}

fn draw_entry<E: EntropySource>(entropy: &mut E) -> Result<CodebookEntry, EntropyError> {
    let digit = 1 + uniform_below(entropy, 9)? as u8;
    let mut string = String::with_capacity(usize::from(digit));
    for _ in 0..digit {
        let offset = uniform_below(entropy, PRINTABLE_COUNT)? as u8;
        string.push(char::from(PRINTABLE_MIN + offset));
    }
    Ok(CodebookEntry { digit, string })
}

/// Draw a complete codebook: independent digit and string draws per login
/// character, digits uniform in 1..9, string characters uniform over
/// printable ASCII 0x21..0x7E.
pub fn generate_codebook<E: EntropySource>(entropy: &mut E) -> Result<Codebook, EntropyError> {
    let mut entries = BTreeMap::new();
    for ch in valid_login_chars() {
        entries.insert(ch, draw_entry(entropy)?);
    }
    Ok(Codebook { entries })
}

/// Insert `insert` into `text` at the label's (clamped) insertion point,
/// reversing the payload first for `R` labels. Total: the point clamps to
/// `len + 1` (append) when it exceeds the available insertion points.
pub fn apply_shuffle_step(text: &str, insert: &str, label: ShuffleLabel) -> String {
    let chars: Vec<char> = text.chars().collect();
    let idx = (label.point() as usize).min(chars.len() + 1) - 1;
    let mut out = String::with_capacity(text.len() + insert.len());
    out.extend(&chars[..idx]);
    match label.direction() {
        Direction::Forward => out.push_str(insert),
        Direction::Reverse => out.extend(insert.chars().rev()),
    }
    out.extend(&chars[idx..]);
    out
}

/// One matrix row: the login character, its conversion unit, and the shuffle
/// label (absent on row 1, which seeds the composition).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub login_char: char,
    pub digit: u8,
    pub converted: String,
    pub label: Option<ShuffleLabel>,
}

/// The conversion of a whole credential: one row per character, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    rows: Vec<MatrixRow>,
}

impl Matrix {
    pub fn rows(&self) -> &[MatrixRow] {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Debug rendering: one row per line, tab-separated
    /// `char<TAB>digit<TAB>string<TAB>label`, label column empty for row 1.
    pub fn render_debug(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let label = row.label.map(|l| l.render()).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.login_char, row.digit, row.converted, label
            ));
        }
        out
    }
}

/// Convert a credential into its matrix using the supplied label sequence
/// (one label per row after the first — the stored sequence on login replay).
pub fn build_matrix(
    credential: &str,
    codebook: &Codebook,
    labels: &[ShuffleLabel],
) -> Result<Matrix, MatrixHashError> {
    let chars: Vec<char> = credential.chars().collect();
    if chars.is_empty() {
        return Err(MatrixHashError::EmptyCredential);
    }
    if labels.len() != chars.len() - 1 {
        return Err(MatrixHashError::LabelCountMismatch {
            expected: chars.len() - 1,
            got: labels.len(),
        });
    }
    let mut rows = Vec::with_capacity(chars.len());
    for (i, ch) in chars.iter().enumerate() {
        if !is_valid_login_char(*ch) {
            return Err(MatrixHashError::InvalidCharacter { ch: *ch });
        }
        let entry = codebook
            .entry(*ch)
            .ok_or(MatrixHashError::InvalidCharacter { ch: *ch })?;
        rows.push(MatrixRow {
            login_char: *ch,
            digit: entry.digit,
            converted: entry.string.clone(),
            label: if i == 0 { None } else { Some(labels[i - 1]) },
        });
    }
    Ok(Matrix { rows })
}

/// Draw a fresh label sequence for a credential of `row_count` rows:
/// points uniform in 1..=24, directions uniform.
pub fn draw_labels<E: EntropySource>(
    entropy: &mut E,
    row_count: usize,
) -> Result<Vec<ShuffleLabel>, EntropyError> {
    let mut labels = Vec::with_capacity(row_count.saturating_sub(1));
    for _ in 1..row_count {
        let point = 1 + uniform_below(entropy, LABEL_POINT_DRAW_MAX)?;
        let direction = if uniform_below(entropy, 2)? == 0 {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        labels.push(ShuffleLabel { point, direction });
    }
    Ok(labels)
}

/// The composed hash output: every row's converted string shuffled into one
/// longer string by executing the labels top to bottom. Never persisted;
/// regenerated per login and discarded after the authentication point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthenticationPassword(String);

impl AuthenticationPassword {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for AuthenticationPassword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Execute all label instructions: start from row 1's converted string, then
/// shuffle each subsequent row's string in at its label.
pub fn compose_authentication_password(matrix: &Matrix) -> AuthenticationPassword {
    let rows = matrix.rows();
    let mut text = rows[0].converted.clone();
    for row in &rows[1..] {
        let label = row
            .label
            .expect("rows after the first always carry a label");
        text = apply_shuffle_step(&text, &row.converted, label);
    }
    AuthenticationPassword(text)
}

/// Matrix column addressed by a selection-plan cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellColumn {
    LoginChar,
    Digit,
    String,
    Label,
}

impl fmt::Display for CellColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CellColumn::LoginChar => "login_char",
            CellColumn::Digit => "digit",
            CellColumn::String => "string",
            CellColumn::Label => "label",
        };
        f.write_str(name)
    }
}

/// One selected cell: 1-based row plus column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanCell {
    pub row: usize,
    pub column: CellColumn,
}

/// The stored, ordered cell coordinates an identifier is assembled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionPlan {
    cells: Vec<PlanCell>,
}

impl SelectionPlan {
    pub fn new(cells: Vec<PlanCell>) -> Self {
        Self { cells }
    }

    pub fn cells(&self) -> &[PlanCell] {
        &self.cells
    }

    /// Cell coordinates as an unordered set, for distinctness comparisons.
    pub fn cell_set(&self) -> std::collections::BTreeSet<PlanCell> {
        self.cells.iter().copied().collect()
    }

    /// Structural validity against a matrix of `matrix_rows` rows.
    ///
    /// Plans carry between 4 and 8 distinct cells with at least one from the
    /// String column; matrices too small to offer 4 distinct cells (single-
    /// character credentials expose only 3) are allowed to use them all.
    pub fn validate(&self, matrix_rows: usize) -> Result<(), MatrixHashError> {
        let available = 4 * matrix_rows - 1; // row 1 has no label cell
        let min_cells = PLAN_MIN_CELLS.min(available);
        if self.cells.len() < min_cells || self.cells.len() > PLAN_MAX_CELLS {
            return Err(MatrixHashError::InvalidPlan(format!(
                "cell count {} outside {}..={}",
                self.cells.len(),
                min_cells,
                PLAN_MAX_CELLS
            )));
        }
        if self.cell_set().len() != self.cells.len() {
            return Err(MatrixHashError::InvalidPlan("duplicate cells".into()));
        }
        if !self
            .cells
            .iter()
            .any(|c| c.column == CellColumn::String)
        {
            return Err(MatrixHashError::InvalidPlan(
                "no String-column cell selected".into(),
            ));
        }
        for cell in &self.cells {
            if !cell_in_bounds(cell, matrix_rows) {
                return Err(MatrixHashError::PlanOutOfBounds {
                    row: cell.row,
                    column: cell.column,
                });
            }
        }
        Ok(())
    }
}

fn cell_in_bounds(cell: &PlanCell, matrix_rows: usize) -> bool {
    if cell.row < 1 || cell.row > matrix_rows {
        return false;
    }
    // Row 1 carries no label, so its label cell does not exist.
    !(cell.row == 1 && cell.column == CellColumn::Label)
}

fn all_cells(matrix_rows: usize) -> Vec<PlanCell> {
    let mut cells = Vec::with_capacity(4 * matrix_rows - 1);
    for row in 1..=matrix_rows {
        for column in [
            CellColumn::LoginChar,
            CellColumn::Digit,
            CellColumn::String,
            CellColumn::Label,
        ] {
            if cell_in_bounds(&PlanCell { row, column }, matrix_rows) {
                cells.push(PlanCell { row, column });
            }
        }
    }
    cells
}

/// Draw a selection plan for a matrix of `matrix_rows` rows: a target size
/// uniform in 4..=8 (capped by the available cells), a guaranteed String-
/// column cell first, then distinct further cells in draw order.
pub fn draw_selection_plan<E: EntropySource>(
    entropy: &mut E,
    matrix_rows: usize,
) -> Result<SelectionPlan, EntropyError> {
    assert!(
        (1..=32).contains(&matrix_rows),
        "matrix row count out of range"
    );
    let target =
        PLAN_MIN_CELLS + uniform_below(entropy, (PLAN_MAX_CELLS - PLAN_MIN_CELLS + 1) as u32)? as usize;
    let mut remaining = all_cells(matrix_rows);
    let size = target.min(remaining.len());

    let string_row = 1 + uniform_below(entropy, matrix_rows as u32)? as usize;
    let first = PlanCell {
        row: string_row,
        column: CellColumn::String,
    };
    remaining.retain(|c| *c != first);

    let mut cells = Vec::with_capacity(size);
    cells.push(first);
    while cells.len() < size {
        let idx = uniform_below(entropy, remaining.len() as u32)? as usize;
        cells.push(remaining.remove(idx));
    }
    Ok(SelectionPlan { cells })
}

/// A server-side secret string concatenated from selected matrix cells.
/// Never transmitted, displayed, or accepted as input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Identifier(String);

impl Identifier {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Concatenate the plan's cells in order: characters and digits render as
/// themselves, converted strings verbatim, labels in text form (`17R`).
pub fn extract_identifier(
    matrix: &Matrix,
    plan: &SelectionPlan,
) -> Result<Identifier, MatrixHashError> {
    let mut value = String::new();
    for cell in plan.cells() {
        if !cell_in_bounds(cell, matrix.row_count()) {
            return Err(MatrixHashError::PlanOutOfBounds {
                row: cell.row,
                column: cell.column,
            });
        }
        let row = &matrix.rows()[cell.row - 1];
        match cell.column {
            CellColumn::LoginChar => value.push(row.login_char),
            CellColumn::Digit => value.push(char::from(b'0' + row.digit)),
            CellColumn::String => value.push_str(&row.converted),
            CellColumn::Label => {
                let label = row.label.ok_or(MatrixHashError::PlanOutOfBounds {
                    row: cell.row,
                    column: cell.column,
                })?;
                value.push_str(&label.render());
            }
        }
    }
    Ok(Identifier(value))
}
