//! Feature-space models learned from database descriptors: a PCA rotation
//! and a diagonal-covariance Gaussian mixture vocabulary.

mod gmm;
mod io;
mod pca;

pub use gmm::{fit_gmm, GmmParams, GmmVocabulary, VocabId};
pub use io::{decode_vocabulary, encode_vocabulary, load_vocabulary, save_vocabulary};
pub use pca::{fit_pca, PcaModel};

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported format")]
    UnsupportedFormat,
    #[error("corrupt vocabulary file")]
    CorruptFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// PCA projection plus GMM vocabulary, as stored in a vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary<T> {
    pub pca: PcaModel<T>,
    pub gmm: GmmVocabulary<T>,
}

impl<T: Real> Vocabulary<T> {
    /// Fits PCA on the raw descriptors, then the GMM on their projections.
    pub fn train<S: AsRef<[f32]> + Sync>(
        descriptors: &[S],
        pca_dim: usize,
        whiten: bool,
        params: &GmmParams,
    ) -> Result<Self, VocabError> {
        let raw: Vec<Vec<T>> =
            descriptors.iter().map(|d| d.as_ref().iter().map(|&v| T::from_f32(v).unwrap()).collect()).collect();
        let pca = fit_pca(&raw, pca_dim, whiten)?;
        let projected: Vec<Vec<T>> = raw.iter().map(|x| pca.project(x)).collect::<Result<_, _>>()?;
        let gmm = fit_gmm(&projected, params)?;
        Ok(Self { pca, gmm })
    }

    pub fn id(&self) -> VocabId {
        self.gmm.fingerprint()
    }

    /// Projects raw `f32` descriptors into the vocabulary space.
    pub fn project_descriptors<'a>(
        &self,
        descriptors: impl IntoIterator<Item = &'a [f32]>,
    ) -> Result<Vec<Vec<T>>, VocabError> {
        descriptors
            .into_iter()
            .map(|d| {
                let x: Vec<T> = d.iter().map(|&v| T::from_f32(v).unwrap()).collect();
                self.pca.project(&x)
            })
            .collect()
    }
}
