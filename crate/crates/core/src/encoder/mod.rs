//! Fisher Vector embeddings: gradient encoding against a GMM vocabulary,
//! aggregation, normalization, kernel and optional kernel-PCA compression.

mod io;
mod kpca;

pub use io::{decode_embedding, encode_embedding, load_embedding, save_embedding};
pub use io::{decode_kpca, encode_kpca, load_kpca, save_kpca};
pub use kpca::{fit_kpca, project_kpca, project_kpca_coordinates, Kernel, KpcaModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};
use crate::vocab::{GmmVocabulary, VocabId, Vocabulary};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("no features")]
    NoFeatures,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vocabulary mismatch")]
    VocabularyMismatch,
    #[error("already normalized")]
    AlreadyNormalized,
    #[error("wrong state: expected {expected:?}, got {got:?}")]
    WrongState { expected: FvState, got: FvState },
    #[error("degenerate embedding")]
    Degenerate,
    #[error("insufficient training vectors: {0}")]
    InsufficientTraining(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported format")]
    UnsupportedFormat,
    #[error("corrupt embedding file")]
    CorruptFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalization stage of an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FvState {
    Raw,
    PowerNormalized,
    Final,
    /// Kernel-PCA projection of a final vector, re-normalized to unit length.
    Compressed,
}

impl FvState {
    pub fn code(self) -> u8 {
        match self {
            FvState::Raw => 0,
            FvState::PowerNormalized => 1,
            FvState::Final => 2,
            FvState::Compressed => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => FvState::Raw,
            1 => FvState::PowerNormalized,
            2 => FvState::Final,
            3 => FvState::Compressed,
            _ => return None,
        })
    }

    /// Unit-norm states comparable by cosine distance.
    pub fn is_normalized(self) -> bool {
        matches!(self, FvState::Final | FvState::Compressed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector<T> {
    values: Vec<T>,
    state: FvState,
    vocab_id: VocabId,
    image_ids: Vec<String>,
}

impl<T: Real> FisherVector<T> {
    pub fn from_parts(values: Vec<T>, state: FvState, vocab_id: VocabId, image_ids: Vec<String>) -> Self {
        Self { values, state, vocab_id, image_ids }
    }

    /// All-zero raw vector: the neutral element of `aggregate`.
    pub fn zeros(len: usize, vocab_id: VocabId) -> Self {
        Self::from_parts(vec![T::zero(); len], FvState::Raw, vocab_id, Vec::new())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn state(&self) -> FvState {
        self.state
    }

    pub fn vocab_id(&self) -> VocabId {
        self.vocab_id
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn norm(&self) -> T {
        crate::scalar::norm(&self.values)
    }
}

/// Raw Fisher Vector of a projected descriptor set.
///
/// Layout: the K gradient blocks with respect to the means, then the K
/// blocks with respect to the deviations, each D values long:
/// `G_μk = 1/√w_k Σ_t γ_t(k) (x_t − μ_k)/σ_k` and
/// `G_σk = 1/√w_k Σ_t γ_t(k) [(x_t − μ_k)²/σ_k² − 1]/√2`.
pub fn encode<T: Real, S: AsRef<[T]>>(
    gmm: &GmmVocabulary<T>,
    descriptors: &[S],
    image_id: &str,
) -> Result<FisherVector<T>, EncodeError> {
    if descriptors.is_empty() {
        return Err(EncodeError::NoFeatures);
    }
    let (k, d) = (gmm.components(), gmm.dim());
    let mut g_mu = vec![T::zero(); k * d];
    let mut g_sigma = vec![T::zero(); k * d];
    let means = gmm.means();
    let sigmas = gmm.sigmas();
    for x in descriptors {
        let x = x.as_ref();
        if x.len() != d {
            return Err(EncodeError::DimensionMismatch { expected: d, got: x.len() });
        }
        let gamma = gmm.posterior_unchecked(x);
        for c in 0..k {
            let g = gamma[c];
            if g == T::zero() {
                continue;
            }
            let (mu, sd) = (means.row(c), sigmas.row(c));
            for j in 0..d {
                let u = (x[j] - mu[j]) / sd[j];
                g_mu[c * d + j] += g * u;
                g_sigma[c * d + j] += g * (u * u - T::one());
            }
        }
    }
    let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
    for c in 0..k {
        let s = T::one() / gmm.weights()[c].sqrt();
        for j in 0..d {
            g_mu[c * d + j] *= s;
            g_sigma[c * d + j] *= s * inv_sqrt2;
        }
    }
    g_mu.extend_from_slice(&g_sigma);
    Ok(FisherVector::from_parts(g_mu, FvState::Raw, gmm.fingerprint(), vec![image_id.to_string()]))
}

/// Elementwise sum of raw encodings; image ids are concatenated in order.
pub fn aggregate<T: Real>(parts: &[FisherVector<T>]) -> Result<FisherVector<T>, EncodeError> {
    let first = parts.first().ok_or(EncodeError::NoFeatures)?;
    let mut out = FisherVector::zeros(first.len(), first.vocab_id);
    for p in parts {
        if p.vocab_id != first.vocab_id {
            return Err(EncodeError::VocabularyMismatch);
        }
        if p.state != FvState::Raw {
            return Err(EncodeError::AlreadyNormalized);
        }
        if p.len() != first.len() {
            return Err(EncodeError::DimensionMismatch { expected: first.len(), got: p.len() });
        }
        out.values.iter_mut().zip(&p.values).for_each(|(a, &b)| *a += b);
        out.image_ids.extend(p.image_ids.iter().cloned());
    }
    Ok(out)
}

/// Signed power `z → sign(z)·|z|^α`.
pub fn power_normalize<T: Real>(fv: FisherVector<T>, alpha: f64) -> Result<FisherVector<T>, EncodeError> {
    if fv.state != FvState::Raw {
        return Err(EncodeError::WrongState { expected: FvState::Raw, got: fv.state });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EncodeError::InvalidParameter(format!("power exponent {alpha} outside (0, 1]")));
    }
    let a = lit::<T>(alpha);
    let values = fv.values.into_iter().map(|z| z.signum() * z.abs().powf(a)).collect();
    Ok(FisherVector { values, state: FvState::PowerNormalized, ..fv })
}

/// Scales to unit L2 norm, producing the final embedding.
pub fn l2_normalize<T: Real>(fv: FisherVector<T>) -> Result<FisherVector<T>, EncodeError> {
    if fv.state.is_normalized() {
        return Err(EncodeError::AlreadyNormalized);
    }
    let n = fv.norm();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(EncodeError::Degenerate);
    }
    let values = fv.values.into_iter().map(|v| v / n).collect();
    Ok(FisherVector { values, state: FvState::Final, ..fv })
}

/// Power then L2 normalization.
pub fn finalize<T: Real>(fv: FisherVector<T>, alpha: f64) -> Result<FisherVector<T>, EncodeError> {
    l2_normalize(power_normalize(fv, alpha)?)
}

/// Dot product of two embeddings from the same vocabulary.
pub fn fisher_kernel<T: Real>(a: &FisherVector<T>, b: &FisherVector<T>) -> Result<T, EncodeError> {
    if a.vocab_id != b.vocab_id {
        return Err(EncodeError::VocabularyMismatch);
    }
    if a.len() != b.len() {
        return Err(EncodeError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(crate::scalar::dot(&a.values, &b.values))
}

/// Projects raw `f32` descriptors through the vocabulary PCA and returns
/// the final embedding.
pub fn embed_descriptors<T: Real, S: AsRef<[f32]>>(
    vocab: &Vocabulary<T>,
    descriptors: &[S],
    image_id: &str,
    alpha: f64,
) -> Result<FisherVector<T>, EncodeError> {
    let projected = project(vocab, descriptors)?;
    finalize(encode(&vocab.gmm, &projected, image_id)?, alpha)
}

/// Raw encoding of `f32` descriptors after the vocabulary PCA.
pub fn encode_descriptors<T: Real, S: AsRef<[f32]>>(
    vocab: &Vocabulary<T>,
    descriptors: &[S],
    image_id: &str,
) -> Result<FisherVector<T>, EncodeError> {
    encode(&vocab.gmm, &project(vocab, descriptors)?, image_id)
}

fn project<T: Real, S: AsRef<[f32]>>(vocab: &Vocabulary<T>, descriptors: &[S]) -> Result<Vec<Vec<T>>, EncodeError> {
    if descriptors.is_empty() {
        return Err(EncodeError::NoFeatures);
    }
    vocab.project_descriptors(descriptors.iter().map(|d| d.as_ref())).map_err(|e| match e {
        crate::vocab::VocabError::DimensionMismatch { expected, got } => {
            EncodeError::DimensionMismatch { expected, got }
        }
        other => EncodeError::InvalidParameter(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn unit_gmm(d: usize) -> GmmVocabulary<f64> {
        GmmVocabulary::new(vec![1.0], Matrix::zeros(1, d), Matrix::from_rows(1, d, vec![1.0; d])).unwrap()
    }

    #[test]
    fn sample_at_mean() {
        let fv = encode(&unit_gmm(3), &[vec![0.0; 3]], "a").unwrap();
        assert_eq!(fv.len(), 6);
        assert_eq!(&fv.values()[..3], &[0.0; 3]);
        for &v in &fv.values()[3..] {
            assert!((v + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_one_sigma_away() {
        let fv = encode(&unit_gmm(2), &[vec![1.0; 2]], "a").unwrap();
        assert_eq!(fv.values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let none: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(encode(&unit_gmm(2), &none, "a"), Err(EncodeError::NoFeatures)));
        assert!(matches!(encode(&unit_gmm(2), &[vec![0.0; 3]], "a"), Err(EncodeError::DimensionMismatch { .. })));
    }

    #[test]
    fn power_examples() {
        let id = VocabId::default();
        let fv = FisherVector::from_parts(vec![4.0f64, -9.0, 0.0], FvState::Raw, id, vec![]);
        assert_eq!(power_normalize(fv.clone(), 0.5).unwrap().values(), &[2.0, -3.0, 0.0]);
        assert_eq!(power_normalize(fv.clone(), 1.0).unwrap().values(), fv.values());
        assert!(power_normalize(fv.clone(), 0.0).is_err());
        let p = power_normalize(fv, 0.5).unwrap();
        assert!(matches!(power_normalize(p, 0.5), Err(EncodeError::WrongState { .. })));
    }

    #[test]
    fn l2_examples() {
        let id = VocabId::default();
        let fv = FisherVector::from_parts(vec![3.0f64, 4.0, 0.0, 0.0], FvState::Raw, id, vec![]);
        let n = l2_normalize(fv).unwrap();
        assert_eq!(n.values(), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(n.state(), FvState::Final);
        let z = FisherVector::<f64>::zeros(4, id);
        assert!(matches!(l2_normalize(z), Err(EncodeError::Degenerate)));
    }

    #[test]
    fn aggregate_errors() {
        let a = FisherVector::<f64>::zeros(4, VocabId([1; 16]));
        let b = FisherVector::<f64>::zeros(4, VocabId([2; 16]));
        assert!(matches!(aggregate(&[a.clone(), b]), Err(EncodeError::VocabularyMismatch)));
        let mut c = a.clone();
        c.values[0] = 1.0;
        let f = l2_normalize(c).unwrap();
        assert!(matches!(aggregate(&[a, f]), Err(EncodeError::AlreadyNormalized)));
    }

    #[test]
    fn kernel_requires_same_vocabulary() {
        let a = FisherVector::<f64>::from_parts(vec![1.0, 0.0], FvState::Final, VocabId([1; 16]), vec![]);
        let b = FisherVector::<f64>::from_parts(vec![0.0, 1.0], FvState::Final, VocabId([2; 16]), vec![]);
        assert!(matches!(fisher_kernel(&a, &b), Err(EncodeError::VocabularyMismatch)));
        let b = FisherVector::from_parts(vec![0.0, 1.0], FvState::Final, VocabId([1; 16]), vec![]);
        assert_eq!(fisher_kernel(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn state_codes_round_trip() {
        for s in [FvState::Raw, FvState::PowerNormalized, FvState::Final, FvState::Compressed] {
            assert_eq!(FvState::from_code(s.code()), Some(s));
        }
        assert_eq!(FvState::from_code(9), None);
    }
}
