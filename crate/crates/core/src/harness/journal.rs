//! Write-ahead journal of expert confirmations. A record is appended and
//! synced before the index is touched, so a crash between the two loses
//! nothing: [`Journal::replay`] re-applies records missing from the index.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::index::{now_unix, DatabaseEntry, IdentityIndex, Provenance};
use crate::scalar::{lit, to_f64, Real};

/// An expert's decision that a query image shows `individual_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConfirmRequest {
    pub query_image_id: String,
    pub individual_id: String,
    /// The individual is new to the database.
    #[serde(default)]
    pub new_individual: bool,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub descriptor_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct JournalRecord {
    pub seq: u64,
    pub added_at: u64,
    #[serde(flatten)]
    pub request: ConfirmRequest,
}

impl JournalRecord {
    fn entry<T: Real>(&self) -> DatabaseEntry<T> {
        let r = &self.request;
        let mut e = DatabaseEntry::new(
            r.individual_id.clone(),
            r.query_image_id.clone(),
            r.embedding.iter().map(|&v| lit::<T>(v)).collect(),
        )
        .with_provenance(Provenance::ExpertConfirmed)
        .with_added_at(self.added_at);
        e.descriptor_ref = r.descriptor_ref.clone();
        e
    }
}

/// Append-only JSON-lines file.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl Journal {
    /// Opens (creating if needed) the journal at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref().to_path_buf();
        let next_seq = Self::read(&path)?.last().map_or(0, |r| r.seq + 1);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file, next_seq })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in order. A torn final line (crash mid-append) is ignored.
    pub fn read(path: &Path) -> Result<Vec<JournalRecord>, HarnessError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<JournalRecord>(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(HarnessError::Journal(format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    fn append(&mut self, request: &ConfirmRequest) -> Result<JournalRecord, HarnessError> {
        let record = JournalRecord { seq: self.next_seq, added_at: now_unix(), request: request.clone() };
        let mut line = serde_json::to_string(&record).map_err(|e| HarnessError::Journal(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.next_seq += 1;
        Ok(record)
    }

    /// Applies records whose image is not yet in the index; returns how many.
    pub fn replay<T: Real>(&self, index: &mut IdentityIndex<T>) -> Result<usize, HarnessError> {
        let mut applied = 0;
        for r in Self::read(&self.path)? {
            if index.entries().iter().any(|e| e.image_id == r.request.query_image_id) {
                continue;
            }
            index.add_entry(r.entry()).map_err(|e| HarnessError::Journal(format!("record {}: {e}", r.seq)))?;
            applied += 1;
        }
        Ok(applied)
    }
}

/// Validates a confirmation, journals it, then adds it to the index as an
/// expert-confirmed entry. On error nothing is journaled and the index is
/// unchanged.
pub fn confirm_match<T: Real>(
    index: &mut IdentityIndex<T>,
    journal: Option<&mut Journal>,
    request: &ConfirmRequest,
) -> Result<DatabaseEntry<T>, HarnessError> {
    let bad = |m: String| Err(HarnessError::Confirm(m));
    if request.query_image_id.is_empty() || request.individual_id.is_empty() {
        return bad("query-image-id and individual-id are required".into());
    }
    if index.entries().iter().any(|e| e.image_id == request.query_image_id) {
        return bad(format!("duplicate image-id {}", request.query_image_id));
    }
    let exists = index.entries().iter().any(|e| e.individual_id == request.individual_id);
    if request.new_individual && exists {
        return bad(format!("individual {} already exists", request.individual_id));
    }
    if !request.new_individual && !exists {
        return bad(format!("unknown individual {}", request.individual_id));
    }
    let values: Vec<T> = request.embedding.iter().map(|&v| lit::<T>(v)).collect();
    index.check_values(&values).map_err(|e| HarnessError::Confirm(e.to_string()))?;
    let record = match journal {
        Some(j) => j.append(request)?,
        None => JournalRecord { seq: 0, added_at: now_unix(), request: request.clone() },
    };
    let entry: DatabaseEntry<T> = record.entry();
    index.add_entry(entry.clone()).map_err(|e| HarnessError::Confirm(e.to_string()))?;
    Ok(entry)
}

/// Embedding as `f64` for a [`ConfirmRequest`].
pub fn embedding_to_f64<T: Real>(values: &[T]) -> Vec<f64> {
    values.iter().map(|&v| to_f64(v)).collect()
}
