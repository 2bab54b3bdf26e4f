//! Embedding and kernel-PCA files.
//!
//! Embedding (little-endian): magic `NRPF`, `u32` version (1), `u32` length,
//! `u8` state (0 raw, 1 power-normalized, 2 final, 3 compressed), 16-byte
//! vocabulary id, then `length` `f32` values. The image id is the file stem.
//!
//! Kernel PCA: magic `NRPK`, `u32` version (1), `u8` kernel (0 linear,
//! 1 RBF), `f64` RBF gamma, 16-byte vocabulary id, `u32` anchors N, `u32`
//! input length L, `u32` output dim M, then `f64` anchors `[N·L]`,
//! coefficients `[M·N]`, eigenvalues `[M]`, kernel row means `[N]` and the
//! kernel mean.

use std::path::Path;

use crate::binio::{write_atomic, HeaderError, Reader, Truncated, Writer};
use crate::linalg::Matrix;
use crate::scalar::{lit, to_f64, Real};
use crate::vocab::VocabId;

use super::{EncodeError, FisherVector, FvState, Kernel, KpcaModel};

const FV_MAGIC: &[u8; 4] = b"NRPF";
const KPCA_MAGIC: &[u8; 4] = b"NRPK";
const VERSION: u32 = 1;

impl From<Truncated> for EncodeError {
    fn from(_: Truncated) -> Self {
        EncodeError::CorruptFile
    }
}

impl From<HeaderError> for EncodeError {
    fn from(_: HeaderError) -> Self {
        EncodeError::UnsupportedFormat
    }
}

pub fn encode_embedding<T: Real>(fv: &FisherVector<T>) -> Vec<u8> {
    let mut w = Writer::new(FV_MAGIC, VERSION);
    w.u32(fv.len() as u32);
    w.u8(fv.state().code());
    w.bytes(&fv.vocab_id().0);
    for &v in fv.values() {
        w.f32(to_f64(v) as f32);
    }
    w.buf
}

pub fn decode_embedding<T: Real>(bytes: &[u8], image_id: &str) -> Result<FisherVector<T>, EncodeError> {
    let mut r = Reader::open(bytes, FV_MAGIC, VERSION)?;
    let len = r.u32()? as usize;
    let state = FvState::from_code(r.u8()?).ok_or(EncodeError::CorruptFile)?;
    let id = VocabId(r.take(16)?.try_into().unwrap());
    let values = r.f32s(len)?.into_iter().map(|v| lit::<T>(v as f64)).collect();
    r.finish()?;
    Ok(FisherVector::from_parts(values, state, id, vec![image_id.to_string()]))
}

pub fn load_embedding<T: Real>(path: impl AsRef<Path>) -> Result<FisherVector<T>, EncodeError> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_embedding(&std::fs::read(path)?, &id)
}

pub fn save_embedding<T: Real>(fv: &FisherVector<T>, path: impl AsRef<Path>) -> Result<(), EncodeError> {
    write_atomic(path.as_ref(), &encode_embedding(fv))?;
    Ok(())
}

pub fn encode_kpca<T: Real>(m: &KpcaModel<T>) -> Vec<u8> {
    let mut w = Writer::new(KPCA_MAGIC, VERSION);
    match m.kernel {
        Kernel::Linear => {
            w.u8(0);
            w.f64(0.0);
        }
        Kernel::Rbf { gamma } => {
            w.u8(1);
            w.f64(gamma);
        }
    }
    w.bytes(&m.vocab_id.0);
    w.u32(m.anchor_count() as u32);
    w.u32(m.input_dim() as u32);
    w.u32(m.output_dim() as u32);
    let arrays = m.anchors.as_slice().iter().chain(m.coefficients.as_slice()).chain(&m.eigenvalues).chain(&m.row_means);
    for &v in arrays.chain(std::iter::once(&m.total_mean)) {
        w.f64(to_f64(v));
    }
    w.buf
}

pub fn decode_kpca<T: Real>(bytes: &[u8]) -> Result<KpcaModel<T>, EncodeError> {
    let mut r = Reader::open(bytes, KPCA_MAGIC, VERSION)?;
    let kind = r.u8()?;
    let gamma = r.f64()?;
    let kernel = match kind {
        0 => Kernel::Linear,
        1 => Kernel::Rbf { gamma },
        _ => return Err(EncodeError::CorruptFile),
    };
    let vocab_id = VocabId(r.take(16)?.try_into().unwrap());
    let n = r.u32()? as usize;
    let len = r.u32()? as usize;
    let out = r.u32()? as usize;
    let conv = |v: Vec<f64>| v.into_iter().map(lit::<T>).collect::<Vec<T>>();
    let nl = n.checked_mul(len).ok_or(EncodeError::CorruptFile)?;
    let anchors = Matrix::from_rows(n, len, conv(r.f64s(nl)?));
    let on = out.checked_mul(n).ok_or(EncodeError::CorruptFile)?;
    let coefficients = Matrix::from_rows(out, n, conv(r.f64s(on)?));
    let eigenvalues = conv(r.f64s(out)?);
    let row_means = conv(r.f64s(n)?);
    let total_mean = lit::<T>(r.f64()?);
    r.finish()?;
    if n == 0 || out >= n {
        return Err(EncodeError::CorruptFile);
    }
    Ok(KpcaModel { anchors, kernel, coefficients, eigenvalues, row_means, total_mean, vocab_id })
}

pub fn load_kpca<T: Real>(path: impl AsRef<Path>) -> Result<KpcaModel<T>, EncodeError> {
    decode_kpca(&std::fs::read(path)?)
}

pub fn save_kpca<T: Real>(m: &KpcaModel<T>, path: impl AsRef<Path>) -> Result<(), EncodeError> {
    write_atomic(path.as_ref(), &encode_kpca(m))?;
    Ok(())
}
