//! Index files.
//!
//! Little-endian layout: magic `NRPI`, `u32` version (1), `u32` embedding
//! dim (0 when empty), `u8` state code, `u8` vocabulary-id flag + 16 bytes,
//! config JSON (`u32` length + UTF-8), `u32` entry count, then per entry:
//! individual id, image id (length-prefixed strings), `u8` flag + descriptor
//! path, `u64` added-at, `u8` provenance (0 initial, 1 expert-confirmed),
//! `f64` embedding `[dim]`. Finally two optional embedded model blobs
//! (`u64` length, 0 when absent): a vocabulary file and a kernel-PCA file.
//!
//! `save_index` also writes a JSON sidecar next to the file listing the
//! entries without embeddings.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::binio::{write_atomic, Reader, Truncated, Writer};
use crate::encoder::{decode_kpca, encode_kpca, FvState};
use crate::scalar::{lit, to_f64, Real};
use crate::vocab::{decode_vocabulary, encode_vocabulary, VocabId};

use super::{DatabaseEntry, IdentityIndex, IndexError, Provenance};

const MAGIC: &[u8; 4] = b"NRPI";
const VERSION: u32 = 1;

impl From<Truncated> for IndexError {
    fn from(_: Truncated) -> Self {
        IndexError::CorruptFile
    }
}

pub fn encode_index<T: Real>(idx: &IdentityIndex<T>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    let dim = idx.dim.unwrap_or(0);
    w.u32(dim as u32);
    w.u8(idx.state.code());
    match idx.vocab_id {
        Some(id) => {
            w.u8(1);
            w.bytes(&id.0);
        }
        None => {
            w.u8(0);
            w.bytes(&[0; 16]);
        }
    }
    w.str(&idx.config.to_string());
    w.u32(idx.entries.len() as u32);
    for e in &idx.entries {
        w.str(&e.individual_id);
        w.str(&e.image_id);
        match &e.descriptor_ref {
            Some(p) => {
                w.u8(1);
                w.str(p);
            }
            None => w.u8(0),
        }
        w.u64(e.added_at);
        w.u8(match e.provenance {
            Provenance::Initial => 0,
            Provenance::ExpertConfirmed => 1,
        });
        for &v in &e.embedding {
            w.f64(to_f64(v));
        }
    }
    let blob = |w: &mut Writer, b: Option<Vec<u8>>| match b {
        Some(b) => {
            w.u64(b.len() as u64);
            w.bytes(&b);
        }
        None => w.u64(0),
    };
    blob(&mut w, idx.vocabulary.as_ref().map(encode_vocabulary));
    blob(&mut w, idx.kpca.as_ref().map(encode_kpca));
    w.buf
}

pub fn decode_index<T: Real>(bytes: &[u8]) -> Result<IdentityIndex<T>, IndexError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(IndexError::CorruptFile);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(IndexError::VersionMismatch(version));
    }
    let mut r = Reader::open(bytes, MAGIC, VERSION).map_err(|_| IndexError::CorruptFile)?;
    let dim = r.u32()? as usize;
    let state = FvState::from_code(r.u8()?).ok_or(IndexError::CorruptFile)?;
    let has_id = r.u8()?;
    let id = VocabId(r.take(16)?.try_into().unwrap());
    let vocab_id = match has_id {
        0 => None,
        1 => Some(id),
        _ => return Err(IndexError::CorruptFile),
    };
    let config: serde_json::Value = serde_json::from_str(&r.str()?).map_err(|_| IndexError::CorruptFile)?;
    let count = r.u32()? as usize;
    let mut idx = IdentityIndex::new(state, vocab_id);
    idx.config = config;
    for _ in 0..count {
        let individual_id = r.str()?;
        let image_id = r.str()?;
        let descriptor_ref = match r.u8()? {
            0 => None,
            1 => Some(r.str()?),
            _ => return Err(IndexError::CorruptFile),
        };
        let added_at = r.u64()?;
        let provenance = match r.u8()? {
            0 => Provenance::Initial,
            1 => Provenance::ExpertConfirmed,
            _ => return Err(IndexError::CorruptFile),
        };
        let embedding = r.f64s(dim)?.into_iter().map(lit::<T>).collect();
        let entry = DatabaseEntry { individual_id, image_id, embedding, descriptor_ref, added_at, provenance };
        idx.add_entry(entry).map_err(|_| IndexError::CorruptFile)?;
    }
    if let Some(b) = blob(&mut r)? {
        idx.vocabulary = Some(decode_vocabulary(b).map_err(|_| IndexError::CorruptFile)?);
    }
    if let Some(b) = blob(&mut r)? {
        idx.kpca = Some(decode_kpca(b).map_err(|_| IndexError::CorruptFile)?);
    }
    r.finish()?;
    Ok(idx)
}

fn blob<'a>(r: &mut Reader<'a>) -> Result<Option<&'a [u8]>, IndexError> {
    let n = r.u64()?;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(r.take(usize::try_from(n).map_err(|_| IndexError::CorruptFile)?)?))
}

/// `index.nrpi` → `index.nrpi.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_index<T: Real>(idx: &IdentityIndex<T>, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let path = path.as_ref();
    write_atomic(path, &encode_index(idx))?;
    let sidecar = json!({
        "format": "NRPI",
        "version": VERSION,
        "entry-count": idx.len(),
        "dim": idx.dim,
        "state": idx.state,
        "vocab-id": idx.vocab_id.map(|v| v.to_hex()),
        "kpca": idx.kpca.is_some(),
        "config": idx.config,
        "individuals": idx.individuals(),
        "entries": idx.entries,
    });
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar).expect("json").as_bytes())?;
    Ok(())
}

pub fn load_index<T: Real>(path: impl AsRef<Path>) -> Result<IdentityIndex<T>, IndexError> {
    decode_index(&std::fs::read(path)?)
}
