//! Vocabulary files.
//!
//! Little-endian layout: magic `NRPV`, `u32` version (1), `u32` K, `u32` D,
//! `f64` weights `[K]`, means `[K·D]`, deviations `[K·D]`; then the PCA block:
//! `u32` input dim D0, `u8` whitening flag, `f64` mean `[D0]`, components
//! `[D·D0]`, explained variance `[D]`; then the training trailer: `f64`
//! log-likelihood, `u32` n, `f64` history `[n]`, `u32` m, `u32` re-seed
//! indices `[m]`.

use std::path::Path;

use crate::binio::{write_atomic, Reader, Truncated, Writer};
use crate::linalg::Matrix;
use crate::scalar::{lit, to_f64, Real};

use super::{GmmVocabulary, PcaModel, VocabError, Vocabulary};

const MAGIC: &[u8; 4] = b"NRPV";
const VERSION: u32 = 1;

impl From<Truncated> for VocabError {
    fn from(_: Truncated) -> Self {
        VocabError::CorruptFile
    }
}

pub fn encode_vocabulary<T: Real>(v: &Vocabulary<T>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    let g = &v.gmm;
    w.u32(g.components() as u32);
    w.u32(g.dim() as u32);
    for x in g.weights().iter().chain(g.means().as_slice()).chain(g.sigmas().as_slice()) {
        w.f64(to_f64(*x));
    }
    let p = &v.pca;
    w.u32(p.input_dim() as u32);
    w.u8(p.whiten() as u8);
    for x in p.mean().iter().chain(p.components().as_slice()).chain(p.explained_variance()) {
        w.f64(to_f64(*x));
    }
    w.f64(to_f64(g.log_likelihood));
    w.u32(g.history.len() as u32);
    for x in &g.history {
        w.f64(to_f64(*x));
    }
    w.u32(g.reinitialized_at.len() as u32);
    for &i in &g.reinitialized_at {
        w.u32(i as u32);
    }
    w.buf
}

pub fn decode_vocabulary<T: Real>(bytes: &[u8]) -> Result<Vocabulary<T>, VocabError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION).map_err(|_| VocabError::UnsupportedFormat)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let conv = |v: Vec<f64>| v.into_iter().map(lit::<T>).collect::<Vec<T>>();
    let weights = conv(r.f64s(k)?);
    let kd = k.checked_mul(d).ok_or(VocabError::CorruptFile)?;
    let means = Matrix::from_rows(k, d, conv(r.f64s(kd)?));
    let sigmas = Matrix::from_rows(k, d, conv(r.f64s(kd)?));
    let d0 = r.u32()? as usize;
    let whiten = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(VocabError::CorruptFile),
    };
    let mean = conv(r.f64s(d0)?);
    let components = Matrix::from_rows(d, d0, conv(r.f64s(d.checked_mul(d0).ok_or(VocabError::CorruptFile)?)?));
    let variance = conv(r.f64s(d)?);
    let ll = lit::<T>(r.f64()?);
    let nh = r.u32()? as usize;
    let history = conv(r.f64s(nh)?);
    let nr = r.u32()? as usize;
    if nr.checked_mul(4).is_none_or(|b| b > r.remaining()) {
        return Err(VocabError::CorruptFile);
    }
    let reinit = (0..nr).map(|_| r.u32().map(|i| i as usize)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;

    let mut gmm = GmmVocabulary::new(weights, means, sigmas).map_err(|_| VocabError::CorruptFile)?;
    gmm.log_likelihood = ll;
    gmm.history = history;
    gmm.reinitialized_at = reinit;
    let pca = PcaModel::from_parts(mean, components, variance, whiten).map_err(|_| VocabError::CorruptFile)?;
    Ok(Vocabulary { pca, gmm })
}

pub fn load_vocabulary<T: Real>(path: impl AsRef<Path>) -> Result<Vocabulary<T>, VocabError> {
    decode_vocabulary(&std::fs::read(path)?)
}

pub fn save_vocabulary<T: Real>(v: &Vocabulary<T>, path: impl AsRef<Path>) -> Result<(), VocabError> {
    write_atomic(path.as_ref(), &encode_vocabulary(v))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{fit_gmm, GmmParams};

    fn sample() -> Vocabulary<f64> {
        let data: Vec<Vec<f64>> =
            (0..200).map(|i| vec![(i % 7) as f64 * 0.3, (i % 11) as f64 * -0.2, (i % 3) as f64]).collect();
        let pca = crate::vocab::fit_pca(&data, 2, false).unwrap();
        let proj: Vec<Vec<f64>> = data.iter().map(|x| pca.project(x).unwrap()).collect();
        let gmm = fit_gmm(&proj, &GmmParams { components: 3, ..Default::default() }).unwrap();
        Vocabulary { pca, gmm }
    }

    #[test]
    fn round_trip_is_exact() {
        let v = sample();
        let back: Vocabulary<f64> = decode_vocabulary(&encode_vocabulary(&v)).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id(), v.id());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nrpv");
        let v = sample();
        save_vocabulary(&v, &path).unwrap();
        assert_eq!(load_vocabulary::<f64>(&path).unwrap(), v);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = encode_vocabulary(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vocabulary::<f64>(&bad), Err(VocabError::UnsupportedFormat)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_vocabulary::<f64>(&bad), Err(VocabError::UnsupportedFormat)));
        for cut in [9, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_vocabulary::<f64>(&bytes[..cut]), Err(VocabError::CorruptFile)), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_vocabulary::<f64>(&long), Err(VocabError::CorruptFile)));
    }

    #[test]
    fn header_dims() {
        let bytes = encode_vocabulary(&sample());
        assert_eq!(&bytes[..4], b"NRPV");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    }
}
