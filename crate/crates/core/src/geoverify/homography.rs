use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{from_usize, lit, to_f64, Real};

use super::{FeatureMatch, GeoError};

/// Planar projective transform, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    pub h: [T; 9],
    pub inlier_count: usize,
    /// Mean reprojection error in pixels over the correspondences it was scored on.
    pub mean_error: T,
}

impl<T: Real> Homography<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { h: [o, z, z, z, o, z, z, z, o], inlier_count: 0, mean_error: z }
    }

    /// Scales so that `h[8] = 1` when that entry is usable, otherwise to unit
    /// Frobenius norm.
    pub fn normalized(mut self) -> Self {
        let fro = self.h.iter().map(|&v| v * v).sum::<T>().sqrt();
        let s = if self.h[8].abs() > lit::<T>(1e-12) * fro { self.h[8] } else { fro };
        if s != T::zero() {
            self.h.iter_mut().for_each(|v| *v /= s);
        }
        self
    }

    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        let h = &self.h;
        let w = h[6] * p[0] + h[7] * p[1] + h[8];
        [(h[0] * p[0] + h[1] * p[1] + h[2]) / w, (h[3] * p[0] + h[4] * p[1] + h[5]) / w]
    }

    pub fn to_f64_array(&self) -> [f64; 9] {
        self.h.map(to_f64)
    }
}

/// Euclidean distance between `H·src` and `dst`; infinite when `src` maps
/// to the line at infinity.
pub fn reprojection_error<T: Real>(h: &Homography<T>, src: [T; 2], dst: [T; 2]) -> T {
    let p = h.apply(src);
    let e = ((p[0] - dst[0]).powi(2) + (p[1] - dst[1]).powi(2)).sqrt();
    if e.is_finite() {
        e
    } else {
        T::infinity()
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizer<T: Real>(pts: &[[T; 2]]) -> Result<[T; 3], GeoError> {
    let n = from_usize::<T>(pts.len());
    let cx = pts.iter().map(|p| p[0]).sum::<T>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<T>() / n;
    let md = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<T>() / n;
    if !(md > T::zero()) || !md.is_finite() {
        return Err(GeoError::Degenerate);
    }
    Ok([lit::<T>(std::f64::consts::SQRT_2) / md, cx, cy])
}

/// Direct linear transform with Hartley normalization. The solution is the
/// eigenvector of `AᵀA` with the smallest eigenvalue; a second near-zero
/// eigenvalue means the correspondences do not determine a homography.
pub fn estimate_homography_dlt<T: Real>(src: &[[T; 2]], dst: &[[T; 2]]) -> Result<Homography<T>, GeoError> {
    if src.len() != dst.len() {
        return Err(GeoError::InvalidParameter("point lists differ in length".into()));
    }
    if src.len() < 4 {
        return Err(GeoError::TooFewMatches(src.len()));
    }
    let [ss, sx, sy] = normalizer(src)?;
    let [ds, dx, dy] = normalizer(dst)?;
    let mut a = Matrix::<T>::zeros(2 * src.len(), 9);
    let z = T::zero();
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let (x, y) = ((p[0] - sx) * ss, (p[1] - sy) * ss);
        let (u, v) = ((q[0] - dx) * ds, (q[1] - dy) * ds);
        let o = T::one();
        a.row_mut(2 * i).copy_from_slice(&[z, z, z, -x, -y, -o, v * x, v * y, v]);
        a.row_mut(2 * i + 1).copy_from_slice(&[x, y, o, z, z, z, -u * x, -u * y, -u]);
    }
    let eig = symmetric_eigen(&a.gram());
    let scale = eig.values[0].abs().max(T::min_positive_value());
    // Rank of A must be 8: the second-smallest eigenvalue has to be clear of zero.
    let tol = T::epsilon().sqrt() * lit::<T>(1e-2);
    if eig.values[7] <= tol * scale {
        return Err(GeoError::Degenerate);
    }
    let hn = eig.vectors.row(8);
    // H = T_dst⁻¹ · Hn · T_src with T = [[s, 0, −s·cx], [0, s, −s·cy], [0, 0, 1]].
    let t_src = Matrix::from_rows(3, 3, vec![ss, z, -ss * sx, z, ss, -ss * sy, z, z, T::one()]);
    let t_dst_inv = Matrix::from_rows(3, 3, vec![T::one() / ds, z, dx, z, T::one() / ds, dy, z, z, T::one()]);
    let hm = t_dst_inv.mul(&Matrix::from_rows(3, 3, hn.to_vec())).mul(&t_src);
    let mut h = [T::zero(); 9];
    h.copy_from_slice(hm.as_slice());
    let mut out = Homography { h, inlier_count: src.len(), mean_error: T::zero() }.normalized();
    let errs: Vec<T> = src.iter().zip(dst).map(|(&p, &q)| reprojection_error(&out, p, q)).collect();
    out.mean_error = errs.iter().copied().sum::<T>() / from_usize::<T>(errs.len());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct RansacParams {
    /// Upper bound on sampled minimal models.
    pub iterations: usize,
    /// Inlier threshold on reprojection error, in pixels.
    pub threshold: f64,
    pub seed: u64,
    /// Stop early once this confidence of having drawn an all-inlier sample is reached.
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 2000, threshold: 5.0, seed: 42, confidence: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<T> {
    pub homography: Homography<T>,
    /// Indices into the input matches.
    pub inliers: Vec<usize>,
}

/// Twice the signed triangle area, relative to the squared longest side.
fn collinear<T: Real>(a: [T; 2], b: [T; 2], c: [T; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let d2 = |p: [T; 2], q: [T; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let l = d2(a, b).max(d2(b, c)).max(d2(a, c));
    !(cross.abs() > lit::<T>(1e-6) * l)
}

fn degenerate_sample<T: Real>(p: &[[T; 2]; 4]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<[T; 2]> = (0..4).filter(|&i| i != skip).map(|i| p[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

fn score<T: Real>(h: &Homography<T>, src: &[[T; 2]], dst: &[[T; 2]], thr: T) -> (Vec<usize>, T) {
    let mut inliers = Vec::new();
    let mut total = T::zero();
    for (i, (&p, &q)) in src.iter().zip(dst).enumerate() {
        let e = reprojection_error(h, p, q);
        if e <= thr {
            inliers.push(i);
            total += e;
        }
    }
    let mean = if inliers.is_empty() { T::infinity() } else { total / from_usize::<T>(inliers.len()) };
    (inliers, mean)
}

fn better<T: Real>(count: usize, err: T, best: &Option<(Homography<T>, Vec<usize>)>) -> bool {
    match best {
        None => true,
        Some((h, inl)) => count > inl.len() || (count == inl.len() && err < h.mean_error),
    }
}

/// Seeded RANSAC over minimal 4-point samples. The best model (most
/// inliers, then lowest mean error) is re-fitted on its inliers; the refit
/// is kept only when it does not lose inliers.
pub fn ransac_homography<T: Real>(
    matches: &[FeatureMatch],
    params: &RansacParams,
) -> Result<RansacResult<T>, GeoError> {
    let src: Vec<[T; 2]> =
        matches.iter().map(|m| [lit::<T>(m.query_region.cx as f64), lit::<T>(m.query_region.cy as f64)]).collect();
    let dst: Vec<[T; 2]> =
        matches.iter().map(|m| [lit::<T>(m.db_region.cx as f64), lit::<T>(m.db_region.cy as f64)]).collect();
    ransac_points(&src, &dst, params)
}

/// RANSAC on raw point correspondences.
pub fn ransac_points<T: Real>(
    src: &[[T; 2]],
    dst: &[[T; 2]],
    params: &RansacParams,
) -> Result<RansacResult<T>, GeoError> {
    let n = src.len();
    if n < 4 {
        return Err(GeoError::TooFewMatches(n));
    }
    if !(params.threshold > 0.0) {
        return Err(GeoError::InvalidParameter("threshold must be positive".into()));
    }
    let thr = lit::<T>(params.threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography<T>, Vec<usize>)> = None;
    let mut needed = params.iterations;
    let mut it = 0;
    while it < needed.min(params.iterations) {
        it += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let s = [src[idx[0]], src[idx[1]], src[idx[2]], src[idx[3]]];
        let d = [dst[idx[0]], dst[idx[1]], dst[idx[2]], dst[idx[3]]];
        if degenerate_sample(&s) || degenerate_sample(&d) {
            continue;
        }
        let Ok(h) = estimate_homography_dlt(&s, &d) else { continue };
        let (inl, err) = score(&h, src, dst, thr);
        if inl.len() >= 4 && better(inl.len(), err, &best) {
            let w = inl.len() as f64 / n as f64;
            let p_good = w.powi(4);
            if p_good >= 1.0 {
                needed = it;
            } else if p_good > 0.0 {
                let k = ((1.0 - params.confidence).ln() / (1.0 - p_good).ln()).ceil();
                needed = if k.is_finite() { (k as usize).max(1) } else { params.iterations };
            }
            best = Some((Homography { inlier_count: inl.len(), mean_error: err, ..h }, inl));
        }
    }
    let Some((mut h, mut inl)) = best else { return Err(GeoError::NoConsistentGeometry) };
    for _ in 0..5 {
        let s: Vec<[T; 2]> = inl.iter().map(|&i| src[i]).collect();
        let d: Vec<[T; 2]> = inl.iter().map(|&i| dst[i]).collect();
        let Ok(refit) = estimate_homography_dlt(&s, &d) else { break };
        let (r_inl, r_err) = score(&refit, src, dst, thr);
        if r_inl.len() < inl.len() || (r_inl == inl && !(r_err < h.mean_error)) {
            break;
        }
        h = Homography { inlier_count: r_inl.len(), mean_error: r_err, ..refit };
        inl = r_inl;
    }
    Ok(RansacResult { homography: h, inliers: inl })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h0() -> Homography<f64> {
        Homography { h: [1.1, 0.05, 3.0, -0.04, 0.95, -2.0, 1e-4, -2e-4, 1.0], inlier_count: 0, mean_error: 0.0 }
    }

    #[test]
    fn identity_from_four_points() {
        let p = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let h = estimate_homography_dlt(&p, &p).unwrap();
        for (a, b) in h.h.iter().zip(Homography::<f64>::identity().h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_known_perspective() {
        let src = [[3.0, 5.0], [120.0, 8.0], [110.0, 97.0], [7.0, 130.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h0().apply(p)).collect();
        let h = estimate_homography_dlt(&src, &dst).unwrap();
        for (a, b) in h.h.iter().zip(h0().h) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (&p, &q) in src.iter().zip(&dst) {
            assert!(reprojection_error(&h, p, q) < 1e-6);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [5.0, 5.0]];
        let dst = [[0.0, 1.0], [2.0, 1.0], [3.0, 4.0], [1.0, 7.0]];
        assert!(matches!(estimate_homography_dlt(&src, &dst), Err(GeoError::Degenerate)));
        assert!(matches!(estimate_homography_dlt(&src[..3], &dst[..3]), Err(GeoError::TooFewMatches(3))));
    }

    #[test]
    fn works_in_single_precision() {
        let src = [[3.0f32, 5.0], [120.0, 8.0], [110.0, 97.0], [7.0, 130.0], [60.0, 60.0]];
        let hf = Homography { h: h0().h.map(|v| v as f32), inlier_count: 0, mean_error: 0.0 };
        let dst: Vec<[f32; 2]> = src.iter().map(|&p| hf.apply(p)).collect();
        let h = estimate_homography_dlt(&src, &dst).unwrap();
        for (&p, &q) in src.iter().zip(&dst) {
            assert!(reprojection_error(&h, p, q) < 1e-2);
        }
    }

    #[test]
    fn ransac_on_exact_identity() {
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [(i * 7 % 13) as f64 * 5.0, (i * 3 % 11) as f64 * 4.0]).collect();
        let r = ransac_points(&pts, &pts, &RansacParams::default()).unwrap();
        assert_eq!(r.inliers.len(), 20);
        for (a, b) in r.homography.h.iter().zip(Homography::<f64>::identity().h) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            ransac_points(&pts[..3], &pts[..3], &RansacParams::default()),
            Err(GeoError::TooFewMatches(3))
        ));
    }
}
