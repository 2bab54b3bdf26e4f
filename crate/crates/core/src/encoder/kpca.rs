use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{dot, from_usize, lit, Real};
use crate::vocab::VocabId;

use super::{EncodeError, FisherVector, FvState};

/// Kernel used by kernel PCA.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    /// Dot product; on unit vectors this is cosine similarity.
    #[default]
    Linear,
    /// `exp(−γ‖a − b‖²)`.
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval<T: Real>(&self, a: &[T], b: &[T]) -> T {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => {
                let d2: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
                (-lit::<T>(gamma) * d2).exp()
            }
        }
    }
}

/// Kernel PCA fitted on a set of final embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KpcaModel<T> {
    pub(crate) anchors: Matrix<T>,
    pub(crate) kernel: Kernel,
    /// `output_dim × n_anchors`; row j is `v_j / √λ_j`.
    pub(crate) coefficients: Matrix<T>,
    pub(crate) eigenvalues: Vec<T>,
    pub(crate) row_means: Vec<T>,
    pub(crate) total_mean: T,
    pub(crate) vocab_id: VocabId,
}

impl<T: Real> KpcaModel<T> {
    pub fn output_dim(&self) -> usize {
        self.coefficients.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.rows()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn vocab_id(&self) -> VocabId {
        self.vocab_id
    }
}

/// Fits kernel PCA on the double-centered kernel matrix of `training`.
///
/// Directions with eigenvalue below `1e-10·λ_max` get zero coefficients.
pub fn fit_kpca<T: Real>(
    training: &[FisherVector<T>],
    output_dim: usize,
    kernel: Kernel,
) -> Result<KpcaModel<T>, EncodeError> {
    let n = training.len();
    if output_dim == 0 {
        return Err(EncodeError::InvalidParameter("output dimension must be >= 1".into()));
    }
    if n <= output_dim {
        return Err(EncodeError::InsufficientTraining(format!("{n} vectors for output dimension {output_dim}")));
    }
    if let Kernel::Rbf { gamma } = kernel {
        if !(gamma > 0.0) {
            return Err(EncodeError::InvalidParameter("RBF gamma must be positive".into()));
        }
    }
    let first = &training[0];
    let len = first.len();
    for fv in training {
        if fv.vocab_id() != first.vocab_id() {
            return Err(EncodeError::VocabularyMismatch);
        }
        if fv.len() != len {
            return Err(EncodeError::DimensionMismatch { expected: len, got: fv.len() });
        }
    }
    let mut anchor_data = Vec::with_capacity(n * len);
    for fv in training {
        anchor_data.extend_from_slice(fv.values());
    }
    let anchors = Matrix::from_rows(n, len, anchor_data);

    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if j < i { T::zero() } else { kernel.eval(anchors.row(i), anchors.row(j)) }).collect())
        .collect();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            gram[(i, j)] = rows[i][j];
            gram[(j, i)] = rows[i][j];
        }
    }
    let nt = from_usize::<T>(n);
    let row_means: Vec<T> = (0..n).map(|i| gram.row(i).iter().copied().sum::<T>() / nt).collect();
    let total_mean = row_means.iter().copied().sum::<T>() / nt;
    let mut centered = gram;
    for i in 0..n {
        for j in 0..n {
            centered[(i, j)] = centered[(i, j)] - row_means[i] - row_means[j] + total_mean;
        }
    }
    let eig = symmetric_eigen(&centered);
    let lmax = eig.values[0].max(T::zero());
    let cutoff = lit::<T>(1e-10) * lmax;
    let mut coefficients = Matrix::zeros(output_dim, n);
    let mut eigenvalues = Vec::with_capacity(output_dim);
    for j in 0..output_dim {
        let l = eig.values[j];
        eigenvalues.push(l.max(T::zero()));
        if l > cutoff && l > T::zero() {
            let s = T::one() / l.sqrt();
            for i in 0..n {
                coefficients[(j, i)] = eig.vectors[(j, i)] * s;
            }
        }
    }
    Ok(KpcaModel { anchors, kernel, coefficients, eigenvalues, row_means, total_mean, vocab_id: first.vocab_id() })
}

/// Centered kernel-PCA coordinates of `fv`, without renormalization.
pub fn project_kpca_coordinates<T: Real>(model: &KpcaModel<T>, fv: &FisherVector<T>) -> Result<Vec<T>, EncodeError> {
    if fv.vocab_id() != model.vocab_id {
        return Err(EncodeError::VocabularyMismatch);
    }
    if fv.len() != model.input_dim() {
        return Err(EncodeError::DimensionMismatch { expected: model.input_dim(), got: fv.len() });
    }
    let n = model.anchor_count();
    let k: Vec<T> = (0..n).map(|i| model.kernel.eval(fv.values(), model.anchors.row(i))).collect();
    let mean = k.iter().copied().sum::<T>() / from_usize::<T>(n);
    let centered: Vec<T> = k.iter().zip(&model.row_means).map(|(&v, &rm)| v - mean - rm + model.total_mean).collect();
    Ok(model.coefficients.mul_vec(&centered))
}

/// Compressed, unit-length embedding of a final Fisher Vector.
pub fn project_kpca<T: Real>(model: &KpcaModel<T>, fv: &FisherVector<T>) -> Result<FisherVector<T>, EncodeError> {
    if fv.state() != FvState::Final {
        return Err(EncodeError::WrongState { expected: FvState::Final, got: fv.state() });
    }
    let y = project_kpca_coordinates(model, fv)?;
    let n = crate::scalar::norm(&y);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(EncodeError::Degenerate);
    }
    let values = y.into_iter().map(|v| v / n).collect();
    Ok(FisherVector::from_parts(values, FvState::Compressed, fv.vocab_id(), fv.image_ids().to_vec()))
}
