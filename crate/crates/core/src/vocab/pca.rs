use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{from_usize, lit, Real};

use super::VocabError;

/// Orthonormal linear projection onto the leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    pub(crate) mean: Vec<T>,
    /// `output_dim × input_dim`, rows orthonormal.
    pub(crate) components: Matrix<T>,
    pub(crate) explained_variance: Vec<T>,
    pub(crate) whiten: bool,
}

impl<T: Real> PcaModel<T> {
    pub fn from_parts(
        mean: Vec<T>,
        components: Matrix<T>,
        explained_variance: Vec<T>,
        whiten: bool,
    ) -> Result<Self, VocabError> {
        if components.cols() != mean.len() {
            return Err(VocabError::DimensionMismatch { expected: mean.len(), got: components.cols() });
        }
        if components.rows() != explained_variance.len() || components.rows() > mean.len() {
            return Err(VocabError::DimensionMismatch { expected: components.rows(), got: explained_variance.len() });
        }
        Ok(Self { mean, components, explained_variance, whiten })
    }

    /// Identity projection for data that should not be rotated.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            components: Matrix::identity(dim),
            explained_variance: vec![T::one(); dim],
            whiten: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix<T> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[T] {
        &self.explained_variance
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    /// `components · (x − mean)`, divided per axis by the standard deviation when whitening.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>, VocabError> {
        if x.len() != self.input_dim() {
            return Err(VocabError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        let mut y = self.components.mul_vec(&centered);
        if self.whiten {
            let eps = lit::<T>(1e-12);
            for (v, &var) in y.iter_mut().zip(&self.explained_variance) {
                *v /= (var + eps).sqrt();
            }
        }
        Ok(y)
    }

    /// Maps a projection back to input space (`mean + componentsᵀ · y`); exact
    /// inverse of `project` for a full-rank, non-whitened model.
    pub fn reconstruct(&self, y: &[T]) -> Vec<T> {
        let mut x = self.mean.clone();
        for (r, &coef) in y.iter().enumerate() {
            let c = if self.whiten { coef * (self.explained_variance[r] + lit::<T>(1e-12)).sqrt() } else { coef };
            for (xi, &a) in x.iter_mut().zip(self.components.row(r)) {
                *xi += c * a;
            }
        }
        x
    }
}

/// Principal axes of the sample covariance (unbiased, `1/(n−1)`).
pub fn fit_pca<T: Real, S: AsRef<[T]>>(
    samples: &[S],
    output_dim: usize,
    whiten: bool,
) -> Result<PcaModel<T>, VocabError> {
    if output_dim == 0 {
        return Err(VocabError::InvalidParameter("output dimension must be >= 1".into()));
    }
    let n = samples.len();
    if n <= output_dim {
        return Err(VocabError::InsufficientSamples(format!("{n} samples for {output_dim} principal components")));
    }
    let d0 = samples[0].as_ref().len();
    if output_dim > d0 {
        return Err(VocabError::InvalidParameter(format!(
            "output dimension {output_dim} exceeds input dimension {d0}"
        )));
    }
    let mut mean = vec![T::zero(); d0];
    for s in samples {
        let s = s.as_ref();
        if s.len() != d0 {
            return Err(VocabError::DimensionMismatch { expected: d0, got: s.len() });
        }
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let nt = from_usize::<T>(n);
    mean.iter_mut().for_each(|m| *m /= nt);

    let mut cov = Matrix::<T>::zeros(d0, d0);
    let mut centered = vec![T::zero(); d0];
    for s in samples {
        for ((c, &v), &m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d0 {
            let ci = centered[i];
            if ci == T::zero() {
                continue;
            }
            for j in i..d0 {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = from_usize::<T>(n - 1);
    for i in 0..d0 {
        for j in i..d0 {
            cov[(i, j)] /= denom;
        }
    }
    let eig = symmetric_eigen(&cov);
    let mut components = Matrix::zeros(output_dim, d0);
    for r in 0..output_dim {
        components.row_mut(r).copy_from_slice(eig.vectors.row(r));
    }
    let explained_variance = eig.values[..output_dim].iter().map(|&v| v.max(T::zero())).collect();
    Ok(PcaModel { mean, components, explained_variance, whiten })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn line_direction_recovered() {
        let dir = [1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let t: f64 = rng.random_range(-5.0..5.0);
                dir.iter().enumerate().map(|(i, &d)| 1.0 + i as f64 + t * d).collect()
            })
            .collect();
        let pca = fit_pca(&data, 1, false).unwrap();
        let dot: f64 = pca.components().row(0).iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(dot.abs() >= 0.999);
    }

    #[test]
    fn full_rank_preserves_distances_and_inverts() {
        let data = gaussian_data(50, 5, 1);
        let pca = fit_pca(&data, 5, false).unwrap();
        let p: Vec<Vec<f64>> = data.iter().map(|x| pca.project(x).unwrap()).collect();
        for i in 0..10 {
            for j in 0..10 {
                let d0: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let d1: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d0.sqrt() - d1.sqrt()).abs() < 1e-6);
            }
            let back = pca.reconstruct(&p[i]);
            for (a, b) in back.iter().zip(&data[i]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn isotropic_variances_similar() {
        let data = gaussian_data(10_000, 4, 2);
        let pca = fit_pca(&data, 4, false).unwrap();
        let v = pca.explained_variance();
        assert!(v.windows(2).all(|w| w[0] >= w[1]));
        assert!((v[0] - v[3]) / v[3] < 0.1, "{v:?}");
    }

    #[test]
    fn mean_projects_to_zero_and_axis_to_unit() {
        let data = gaussian_data(100, 3, 4);
        let pca = fit_pca(&data, 3, false).unwrap();
        assert!(pca.project(pca.mean()).unwrap().iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = pca.mean().iter().zip(pca.components().row(0)).map(|(m, c)| m + c).collect();
        let y = pca.project(&x).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12 && y[2].abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_and_dim_mismatch() {
        let data = gaussian_data(3, 5, 1);
        assert!(matches!(fit_pca(&data, 3, false), Err(VocabError::InsufficientSamples(_))));
        let pca = fit_pca(&gaussian_data(20, 5, 1), 2, false).unwrap();
        assert!(matches!(pca.project(&[1.0, 2.0]), Err(VocabError::DimensionMismatch { .. })));
    }

    #[test]
    fn refit_on_projection_is_orthonormal() {
        let data = gaussian_data(200, 6, 5);
        let pca = fit_pca(&data, 3, false).unwrap();
        let p: Vec<Vec<f64>> = data.iter().map(|x| pca.project(x).unwrap()).collect();
        let again = fit_pca(&p, 3, false).unwrap();
        let g = again.components().mul(&again.components().transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whitening_gives_unit_variance() {
        let data: Vec<Vec<f64>> = gaussian_data(5000, 2, 9).into_iter().map(|v| vec![3.0 * v[0], 0.5 * v[1]]).collect();
        let pca = fit_pca(&data, 2, true).unwrap();
        let p: Vec<Vec<f64>> = data.iter().map(|x| pca.project(x).unwrap()).collect();
        for k in 0..2 {
            let var: f64 = p.iter().map(|v| v[k] * v[k]).sum::<f64>() / 4999.0;
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
