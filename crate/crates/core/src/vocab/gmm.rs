use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::Matrix;
use crate::scalar::{from_usize, lit, log_sum_exp, to_f64, Real};

use super::VocabError;

/// 16-byte fingerprint of a vocabulary's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VocabId(pub [u8; 16]);

impl VocabId {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 32 {
            return None;
        }
        let mut out = [0u8; 16];
        for (i, o) in out.iter_mut().enumerate() {
            *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl std::fmt::Display for VocabId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmParams {
    pub components: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound on every per-dimension variance.
    pub variance_floor: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self { components: 256, seed: 42, max_iters: 200, tol: 1e-5, variance_floor: 1e-4 }
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmVocabulary<T> {
    weights: Vec<T>,
    means: Matrix<T>,
    sigmas: Matrix<T>,
    /// Mean per-sample log-likelihood of the training data under the final
    /// parameters; `-inf` for a mixture built directly from parameters.
    pub log_likelihood: T,
    /// Mean log-likelihood after each EM iteration, starting from the initialization.
    pub history: Vec<T>,
    /// History indices at which a collapsed component was re-seeded.
    pub reinitialized_at: Vec<usize>,
    // ln w_k − D/2·ln 2π − Σ_d ln σ_kd
    log_norm: Vec<T>,
    inv_var: Matrix<T>,
    id: VocabId,
}

impl<T: Real> GmmVocabulary<T> {
    pub fn new(weights: Vec<T>, means: Matrix<T>, sigmas: Matrix<T>) -> Result<Self, VocabError> {
        let k = weights.len();
        if k == 0 || means.rows() != k || sigmas.rows() != k || means.cols() != sigmas.cols() {
            return Err(VocabError::InvalidParameter("inconsistent mixture shapes".into()));
        }
        if weights.iter().any(|&w| !(w > T::zero())) {
            return Err(VocabError::InvalidParameter("mixture weights must be positive".into()));
        }
        if sigmas.as_slice().iter().any(|&s| !(s > T::zero())) {
            return Err(VocabError::InvalidParameter("deviations must be positive".into()));
        }
        let d = means.cols();
        let half_log_2pi = lit::<T>(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut log_norm = Vec::with_capacity(k);
        let mut inv_var = Matrix::zeros(k, d);
        for c in 0..k {
            let mut ln = weights[c].ln() - from_usize::<T>(d) * half_log_2pi;
            for j in 0..d {
                let s = sigmas[(c, j)];
                ln -= s.ln();
                inv_var[(c, j)] = T::one() / (s * s);
            }
            log_norm.push(ln);
        }
        let id = fingerprint(&weights, &means, &sigmas);
        Ok(Self {
            id,
            weights,
            means,
            sigmas,
            log_likelihood: T::neg_infinity(),
            history: Vec::new(),
            reinitialized_at: Vec::new(),
            log_norm,
            inv_var,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix<T> {
        &self.means
    }

    pub fn sigmas(&self) -> &Matrix<T> {
        &self.sigmas
    }

    /// `ln(w_k · u_k(x))` for every component.
    pub fn component_log_densities(&self, x: &[T]) -> Vec<T> {
        let half = lit::<T>(0.5);
        (0..self.components())
            .map(|c| {
                let mu = self.means.row(c);
                let iv = self.inv_var.row(c);
                let mut q = T::zero();
                for j in 0..x.len() {
                    let diff = x[j] - mu[j];
                    q += diff * diff * iv[j];
                }
                self.log_norm[c] - half * q
            })
            .collect()
    }

    /// `ln u_λ(x)`.
    pub fn log_density(&self, x: &[T]) -> T {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Soft assignment `γ_k(x) = w_k u_k(x) / Σ_j w_j u_j(x)`, evaluated in log space.
    pub fn posterior(&self, x: &[T]) -> Result<Vec<T>, VocabError> {
        if x.len() != self.dim() {
            return Err(VocabError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(self.posterior_unchecked(x))
    }

    pub(crate) fn posterior_unchecked(&self, x: &[T]) -> Vec<T> {
        let lp = self.component_log_densities(x);
        normalize_log(&lp)
    }

    /// Hash of the parameters (as `f64` little-endian bytes) identifying this vocabulary.
    pub fn fingerprint(&self) -> VocabId {
        self.id
    }
}

fn fingerprint<T: Real>(weights: &[T], means: &Matrix<T>, sigmas: &Matrix<T>) -> VocabId {
    let mut h = Sha256::new();
    h.update(b"NRPV-GMM");
    h.update((weights.len() as u32).to_le_bytes());
    h.update((means.cols() as u32).to_le_bytes());
    for v in weights.iter().chain(means.as_slice()).chain(sigmas.as_slice()) {
        h.update(to_f64(*v).to_le_bytes());
    }
    let digest = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    VocabId(id)
}

fn normalize_log<T: Real>(lp: &[T]) -> Vec<T> {
    let max = lp.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = lp.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

const CHUNK: usize = 512;

struct Stats<T> {
    nk: Vec<T>,
    s1: Vec<T>,
    s2: Vec<T>,
    ll: T,
    worst: (T, usize),
}

impl<T: Real> Stats<T> {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            nk: vec![T::zero(); k],
            s1: vec![T::zero(); k * d],
            s2: vec![T::zero(); k * d],
            ll: T::zero(),
            worst: (T::infinity(), usize::MAX),
        }
    }

    fn merge(&mut self, o: &Stats<T>) {
        self.nk.iter_mut().zip(&o.nk).for_each(|(a, &b)| *a += b);
        self.s1.iter_mut().zip(&o.s1).for_each(|(a, &b)| *a += b);
        self.s2.iter_mut().zip(&o.s2).for_each(|(a, &b)| *a += b);
        self.ll += o.ll;
        if o.worst.0 < self.worst.0 {
            self.worst = o.worst;
        }
    }
}

/// E-step sufficient statistics. Chunks are reduced in index order, so the
/// result does not depend on the thread count.
fn e_step<T: Real, S: AsRef<[T]> + Sync>(gmm: &GmmVocabulary<T>, samples: &[S]) -> Stats<T> {
    let (k, d) = (gmm.components(), gmm.dim());
    let partials: Vec<Stats<T>> = samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut st = Stats::zeros(k, d);
            for (i, s) in chunk.iter().enumerate() {
                let x = s.as_ref();
                let lp = gmm.component_log_densities(x);
                let lse = log_sum_exp(&lp);
                st.ll += lse;
                if lse < st.worst.0 {
                    st.worst = (lse, ci * CHUNK + i);
                }
                for c in 0..k {
                    let g = (lp[c] - lse).exp();
                    if g == T::zero() {
                        continue;
                    }
                    st.nk[c] += g;
                    let s1 = &mut st.s1[c * d..(c + 1) * d];
                    for j in 0..d {
                        s1[j] += g * x[j];
                    }
                    let s2 = &mut st.s2[c * d..(c + 1) * d];
                    for j in 0..d {
                        s2[j] += g * x[j] * x[j];
                    }
                }
            }
            st
        })
        .collect();
    let mut total = Stats::zeros(k, d);
    for p in &partials {
        total.merge(p);
    }
    total
}

/// Expectation–maximization with k-means++ seeding.
///
/// Variances are clamped at `variance_floor`; the clamped update is still
/// the constrained maximizer of the M-step objective, so the log-likelihood
/// never decreases. A component whose responsibility mass collapses is
/// re-seeded on the worst-fit sample; that step is recorded in
/// `reinitialized_at` because it can lower the likelihood.
pub fn fit_gmm<T: Real, S: AsRef<[T]> + Sync>(
    samples: &[S],
    params: &GmmParams,
) -> Result<GmmVocabulary<T>, VocabError> {
    let k = params.components;
    if k == 0 {
        return Err(VocabError::InvalidParameter("component count must be >= 1".into()));
    }
    let n = samples.len();
    if n < 10 * k {
        return Err(VocabError::InsufficientSamples(format!("{n} samples for {k} components (need >= {})", 10 * k)));
    }
    let d = samples[0].as_ref().len();
    if let Some(bad) = samples.iter().find(|s| s.as_ref().len() != d) {
        return Err(VocabError::DimensionMismatch { expected: d, got: bad.as_ref().len() });
    }
    if d == 0 {
        return Err(VocabError::InvalidParameter("zero-dimensional samples".into()));
    }
    let floor = lit::<T>(params.variance_floor);
    let nt = from_usize::<T>(n);

    // Global per-dimension variance, used for sparse clusters and re-seeding.
    let mut gmean = vec![T::zero(); d];
    for s in samples {
        gmean.iter_mut().zip(s.as_ref()).for_each(|(m, &v)| *m += v);
    }
    gmean.iter_mut().for_each(|m| *m /= nt);
    let mut gvar = vec![T::zero(); d];
    for s in samples {
        gvar.iter_mut().zip(s.as_ref()).zip(&gmean).for_each(|((g, &v), &m)| *g += (v - m) * (v - m));
    }
    gvar.iter_mut().for_each(|g| *g = (*g / nt).max(floor));

    let mut gmm = kmeanspp_init(samples, k, d, params.seed, floor, &gvar)?;
    let mut history: Vec<T> = Vec::new();
    let mut reinit = Vec::new();
    let tol = lit::<T>(params.tol);
    let mut converged = false;
    for _ in 0..params.max_iters.max(1) {
        let st = e_step(&gmm, samples);
        let ll = st.ll / nt;
        if !ll.is_finite() {
            return Err(VocabError::InvalidParameter("non-finite log-likelihood".into()));
        }
        history.push(ll);
        if history.len() >= 2 && ll - history[history.len() - 2] < tol && !reinit.contains(&(history.len() - 1)) {
            converged = true;
            break;
        }
        let (next, reseeded) = m_step(&st, samples, d, floor, &gvar)?;
        if reseeded {
            reinit.push(history.len());
        }
        gmm = next;
    }
    if !converged {
        let st = e_step(&gmm, samples);
        history.push(st.ll / nt);
    }
    gmm.log_likelihood = *history.last().expect("at least one iteration");
    gmm.history = history;
    gmm.reinitialized_at = reinit;
    Ok(gmm)
}

fn m_step<T: Real, S: AsRef<[T]>>(
    st: &Stats<T>,
    samples: &[S],
    d: usize,
    floor: T,
    gvar: &[T],
) -> Result<(GmmVocabulary<T>, bool), VocabError> {
    let k = st.nk.len();
    let nt = from_usize::<T>(samples.len());
    // Less than a millionth of a sample's worth of responsibility counts as collapsed.
    let dead = lit::<T>(1e-6);
    let mut weights = Vec::with_capacity(k);
    let mut means = Matrix::zeros(k, d);
    let mut sigmas = Matrix::zeros(k, d);
    let mut reseeded = false;
    for c in 0..k {
        let nk = st.nk[c];
        if !(nk > dead) {
            reseeded = true;
            let worst = samples[st.worst.1.min(samples.len() - 1)].as_ref();
            means.row_mut(c).copy_from_slice(worst);
            for j in 0..d {
                sigmas[(c, j)] = gvar[j].sqrt();
            }
            weights.push(T::one() / nt);
            continue;
        }
        weights.push(nk / nt);
        for j in 0..d {
            let mu = st.s1[c * d + j] / nk;
            let var = (st.s2[c * d + j] / nk - mu * mu).max(floor);
            means[(c, j)] = mu;
            sigmas[(c, j)] = var.sqrt();
        }
    }
    let total: T = weights.iter().copied().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((GmmVocabulary::new(weights, means, sigmas)?, reseeded))
}

fn kmeanspp_init<T: Real, S: AsRef<[T]>>(
    samples: &[S],
    k: usize,
    d: usize,
    seed: u64,
    floor: T,
    gvar: &[T],
) -> Result<GmmVocabulary<T>, VocabError> {
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqdist = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum() };
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut best: Vec<T> = samples.iter().map(|s| sqdist(s.as_ref(), samples[centers[0]].as_ref())).collect();
    while centers.len() < k {
        let total: f64 = best.iter().map(|&v| to_f64(v)).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &v) in best.iter().enumerate() {
                target -= to_f64(v);
                if target < 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(pick);
        let c = samples[pick].as_ref();
        for (b, s) in best.iter_mut().zip(samples) {
            let dd = sqdist(s.as_ref(), c);
            if dd < *b {
                *b = dd;
            }
        }
    }

    // Hard assignment to the nearest seed gives the starting statistics.
    let mut counts = vec![0usize; k];
    let mut s1 = vec![T::zero(); k * d];
    let mut s2 = vec![T::zero(); k * d];
    for s in samples {
        let x = s.as_ref();
        let (c, _) = centers
            .iter()
            .enumerate()
            .map(|(ci, &idx)| (ci, sqdist(x, samples[idx].as_ref())))
            .fold((0, T::infinity()), |acc, v| if v.1 < acc.1 { v } else { acc });
        counts[c] += 1;
        for j in 0..d {
            s1[c * d + j] += x[j];
            s2[c * d + j] += x[j] * x[j];
        }
    }
    let mut weights = Vec::with_capacity(k);
    let mut means = Matrix::zeros(k, d);
    let mut sigmas = Matrix::zeros(k, d);
    for c in 0..k {
        let cnt = counts[c];
        weights.push(from_usize::<T>(cnt.max(1)));
        for j in 0..d {
            if cnt >= 2 {
                let ct = from_usize::<T>(cnt);
                let mu = s1[c * d + j] / ct;
                means[(c, j)] = mu;
                sigmas[(c, j)] = (s2[c * d + j] / ct - mu * mu).max(floor).sqrt();
            } else {
                means[(c, j)] = samples[centers[c]].as_ref()[j];
                sigmas[(c, j)] = gvar[j].sqrt();
            }
        }
    }
    let total: T = weights.iter().copied().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmVocabulary::new(weights, means, sigmas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_clusters(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 5.0 } else { -5.0 };
                (0..2)
                    .map(|_| {
                        c + {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_component_is_closed_form() {
        let data = two_clusters(400, 1);
        let g = fit_gmm(&data, &GmmParams { components: 1, ..Default::default() }).unwrap();
        let n = data.len() as f64;
        for j in 0..2 {
            let mean: f64 = data.iter().map(|x| x[j]).sum::<f64>() / n;
            let var: f64 = data.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            assert!((g.means()[(0, j)] - mean).abs() < 1e-6);
            assert!((g.sigmas()[(0, j)].powi(2) - var).abs() < 1e-6);
        }
        assert_eq!(g.weights(), &[1.0]);
    }

    #[test]
    fn posterior_single_component_is_one() {
        let g = GmmVocabulary::new(
            vec![1.0f64],
            Matrix::from_rows(1, 2, vec![0.0, 0.0]),
            Matrix::from_rows(1, 2, vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(g.posterior(&[3.0, -100.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn posterior_symmetric_components_split_evenly() {
        let g = GmmVocabulary::new(
            vec![0.5f64, 0.5],
            Matrix::from_rows(2, 1, vec![1.0, 1.0]),
            Matrix::from_rows(2, 1, vec![2.0, 2.0]),
        )
        .unwrap();
        for x in [-50.0, 0.0, 1.0, 1e3] {
            assert_eq!(g.posterior(&[x]).unwrap(), vec![0.5, 0.5]);
        }
    }

    #[test]
    fn posterior_far_component_negligible() {
        let g = GmmVocabulary::new(
            vec![0.5f64, 0.5],
            Matrix::from_rows(2, 1, vec![0.0, 10.0]),
            Matrix::from_rows(2, 1, vec![1.0, 1.0]),
        )
        .unwrap();
        let gamma = g.posterior(&[0.0]).unwrap();
        // Exact ratio: exp(-50) / (1 + exp(-50)).
        assert!(gamma[0] >= 1.0 - 1e-10);
        assert!((gamma[1] - (-50f64).exp() / (1.0 + (-50f64).exp())).abs() < 1e-30);
    }

    #[test]
    fn posterior_dimension_checked() {
        let g = GmmVocabulary::new(
            vec![1.0f64],
            Matrix::from_rows(1, 2, vec![0.0, 0.0]),
            Matrix::from_rows(1, 2, vec![1.0, 1.0]),
        )
        .unwrap();
        assert!(g.posterior(&[1.0]).is_err());
    }

    #[test]
    fn insufficient_samples_rejected() {
        let data = two_clusters(50, 1);
        let r = fit_gmm(&data, &GmmParams { components: 6, ..Default::default() });
        assert!(matches!(r, Err(VocabError::InsufficientSamples(_))));
    }

    #[test]
    fn seeded_fit_is_bit_identical() {
        let data = two_clusters(1000, 2);
        let p = GmmParams { components: 4, seed: 9, ..Default::default() };
        let a = fit_gmm(&data, &p).unwrap();
        let b = fit_gmm(&data, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn duplicate_samples_respect_floor() {
        let data: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 2) as f64, 0.0]).collect();
        let g = fit_gmm(&data, &GmmParams { components: 2, ..Default::default() }).unwrap();
        assert!(g.sigmas().as_slice().iter().all(|&s| s * s >= 1e-4 - 1e-15));
        let w: f64 = g.weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-9);
        assert!(g.log_likelihood.is_finite());
    }

    #[test]
    fn works_in_single_precision() {
        let data: Vec<Vec<f32>> =
            two_clusters(400, 3).into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect();
        let g = fit_gmm(&data, &GmmParams { components: 2, ..Default::default() }).unwrap();
        let s: f32 = g.posterior(&[0.5, 0.5]).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vocab_id_hex_round_trip() {
        let id = VocabId([0xab; 16]);
        assert_eq!(VocabId::from_hex(&id.to_hex()), Some(id));
        assert_eq!(VocabId::from_hex("zz"), None);
    }
}
