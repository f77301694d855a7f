//! Durable persistence for account records.
//!
//! One JSON document per account, newline-delimited, fixed key order, binary
//! fields hex-encoded. Writes go through a write-to-temp / fsync / rename
//! sequence so a crash at any point leaves either the old or the new store
//! on disk, never a partial one. Records are recomputable at rest: loading
//! re-derives what the stored inputs allow and rejects records that no
//! longer agree with themselves.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gatekeeper::AccountRecord;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate account: {key}")]
    DuplicateAccount { key: String },
    #[error("account not found: {key}")]
    NotFound { key: String },
    #[error("corrupt record {key}: {reason}")]
    CorruptRecord { key: String, reason: String },
}

/// Byte equality that inspects every byte of the shorter input regardless of
/// where the first mismatch sits. Used for all identifier and digest
/// comparisons.
pub fn constant_time_equal(a: &[u8], b: &[u8]) -> bool {
    let mut diff = u8::from(a.len() != b.len());
    for (x, y) in a.iter().zip(b.iter()) {
        diff |= x ^ y;
    }
    diff == 0
}

/// Crash-injection points inside the save path, ordered as the real write
/// sequence executes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Crash before the temp file is created.
    BeforeTempWrite,
    /// Crash after writing the temp file, before fsync.
    AfterTempWrite,
    /// Crash after fsync of the temp file, before the rename.
    AfterSync,
    /// Crash after the rename, before the directory fsync.
    AfterRename,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 4] = [
        FaultPoint::BeforeTempWrite,
        FaultPoint::AfterTempWrite,
        FaultPoint::AfterSync,
        FaultPoint::AfterRename,
    ];
}

/// In-memory view of the store plus its backing file (if any).
///
/// Single writer, many readers: mutation requires `&mut self`, server code
/// wraps the store in a lock. Lookups index account ids, login names, and
/// phone numbers; credential uniqueness is enforced across the latter two
/// namespaces jointly so a lookup string can never be ambiguous.
#[derive(Debug, Clone, Default)]
pub struct AccountStore {
    path: Option<PathBuf>,
    records: Vec<AccountRecord>,
    by_id: HashMap<String, usize>,
    by_login_name: HashMap<String, usize>,
    by_phone: HashMap<String, usize>,
}

impl AccountStore {
    /// A store with no backing file; used by tests and scenario harnesses.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a file-backed store, loading every existing record.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let mut store = Self {
            path: Some(path.clone()),
            ..Self::default()
        };
        if path.exists() {
            let file = File::open(&path)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: AccountRecord =
                    serde_json::from_str(&line).map_err(|e| StoreError::CorruptRecord {
                        key: format!("line {}", i + 1),
                        reason: e.to_string(),
                    })?;
                store.index_record(record)?;
            }
        }
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AccountRecord] {
        &self.records
    }

    fn credential_taken(&self, normalized: &str) -> bool {
        self.by_login_name.contains_key(normalized) || self.by_phone.contains_key(normalized)
    }

    fn check_duplicates(&self, record: &AccountRecord) -> Result<(), StoreError> {
        if self.by_id.contains_key(&record.account_id) {
            return Err(StoreError::DuplicateAccount {
                key: record.account_id.clone(),
            });
        }
        if self.credential_taken(record.login_name.as_str()) {
            return Err(StoreError::DuplicateAccount {
                key: record.login_name.as_str().to_owned(),
            });
        }
        if let Some(phone) = record.phone_number() {
            if self.credential_taken(phone) {
                return Err(StoreError::DuplicateAccount {
                    key: phone.to_owned(),
                });
            }
        }
        Ok(())
    }

    fn index_record(&mut self, record: AccountRecord) -> Result<(), StoreError> {
        self.check_duplicates(&record)?;
        let idx = self.records.len();
        self.by_id.insert(record.account_id.clone(), idx);
        self.by_login_name
            .insert(record.login_name.as_str().to_owned(), idx);
        if let Some(phone) = record.phone_number() {
            self.by_phone.insert(phone.to_owned(), idx);
        }
        self.records.push(record);
        Ok(())
    }

    fn unindex_last(&mut self) {
        if let Some(record) = self.records.pop() {
            self.by_id.remove(&record.account_id);
            self.by_login_name.remove(record.login_name.as_str());
            if let Some(phone) = record.phone_number() {
                self.by_phone.remove(phone);
            }
        }
    }

    /// Persist a new record: reject duplicates, then commit the whole store
    /// atomically (temp file, fsync, rename, directory fsync).
    pub fn save_account(&mut self, record: AccountRecord) -> Result<(), StoreError> {
        self.index_record(record)?;
        if let Some(path) = self.path.clone() {
            let contents = serialize_records(&self.records);
            if let Err(e) = write_atomically(&path, &contents, None) {
                self.unindex_last();
                return Err(e);
            }
        }
        Ok(())
    }

    /// Persist many records with a single atomic write. Used for bulk
    /// provisioning; duplicate checks apply to the whole batch.
    pub fn save_accounts(
        &mut self,
        records: impl IntoIterator<Item = AccountRecord>,
    ) -> Result<(), StoreError> {
        let mut added = 0usize;
        for record in records {
            if let Err(e) = self.index_record(record) {
                for _ in 0..added {
                    self.unindex_last();
                }
                return Err(e);
            }
            added += 1;
        }
        if let Some(path) = self.path.clone() {
            let contents = serialize_records(&self.records);
            if let Err(e) = write_atomically(&path, &contents, None) {
                for _ in 0..added {
                    self.unindex_last();
                }
                return Err(e);
            }
        }
        Ok(())
    }

    /// Run the save write sequence but stop ("crash") at the given fault
    /// point, leaving the in-memory store untouched. Only meaningful for
    /// file-backed stores; tests reopen the path afterwards to observe what
    /// survived.
    pub fn simulate_crash_during_save(
        &self,
        record: AccountRecord,
        fault: FaultPoint,
    ) -> Result<(), StoreError> {
        self.check_duplicates(&record)?;
        let path = self
            .path
            .clone()
            .ok_or_else(|| StoreError::NotFound {
                key: "store has no backing file".into(),
            })?;
        let mut all: Vec<&AccountRecord> = self.records.iter().collect();
        all.push(&record);
        let contents = all
            .iter()
            .map(|r| serde_json::to_string(r).expect("records always serialize"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        write_atomically(&path, &contents, Some(fault))
    }

    /// Fetch by account id, login name, or phone number, re-checking the
    /// record's internal consistency before returning it.
    pub fn load_account(&self, key: &str) -> Result<&AccountRecord, StoreError> {
        let record = self
            .find_by_account_id(key)
            .or_else(|| self.find_by_login_name(key))
            .or_else(|| self.find_by_phone(key))
            .ok_or_else(|| StoreError::NotFound {
                key: key.to_owned(),
            })?;
        record
            .verify_integrity()
            .map_err(|reason| StoreError::CorruptRecord {
                key: record.account_id.clone(),
                reason,
            })?;
        Ok(record)
    }

    /// Index lookups without the integrity recheck; the gate logic uses
    /// these and performs its own constant-time comparisons.
    pub fn find_by_account_id(&self, id: &str) -> Option<&AccountRecord> {
        self.by_id.get(id).map(|i| &self.records[*i])
    }

    pub fn find_by_login_name(&self, normalized: &str) -> Option<&AccountRecord> {
        self.by_login_name.get(normalized).map(|i| &self.records[*i])
    }

    pub fn find_by_phone(&self, normalized: &str) -> Option<&AccountRecord> {
        self.by_phone.get(normalized).map(|i| &self.records[*i])
    }

    /// Full-store integrity audit: every record must still agree with what
    /// its stored inputs recompute to.
    pub fn audit(&self) -> AuditReport {
        let mut failures = Vec::new();
        for record in &self.records {
            if let Err(reason) = record.verify_integrity() {
                failures.push(AuditFailure {
                    account_id: record.account_id.clone(),
                    reason,
                });
            }
        }
        AuditReport {
            checked: self.records.len(),
            failures,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditFailure {
    pub account_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub checked: usize,
    pub failures: Vec<AuditFailure>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

fn serialize_records(records: &[AccountRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("records always serialize"));
        out.push('\n');
    }
    out
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// temp write → fsync → rename → directory fsync. `fault` stops the
/// sequence early to emulate a crash at that point.
fn write_atomically(
    path: &Path,
    contents: &str,
    fault: Option<FaultPoint>,
) -> Result<(), StoreError> {
    if fault == Some(FaultPoint::BeforeTempWrite) {
        return Ok(());
    }
    let tmp = temp_path(path);
    let mut file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(&tmp)?;
    file.write_all(contents.as_bytes())?;
    if fault == Some(FaultPoint::AfterTempWrite) {
        return Ok(());
    }
    file.sync_all()?;
    drop(file);
    if fault == Some(FaultPoint::AfterSync) {
        return Ok(());
    }
    fs::rename(&tmp, path)?;
    if fault == Some(FaultPoint::AfterRename) {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        if let Ok(dir) = File::open(parent) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}
