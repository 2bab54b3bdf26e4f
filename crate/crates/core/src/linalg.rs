//! Small dense linear algebra: a row-major matrix and a symmetric eigensolver.
//!
//! The sizes involved are modest (descriptor covariances of a few hundred
//! dimensions, kernel matrices over database images, 9×9 DLT normal
//! equations), so cyclic Jacobi rotation is accurate and fast enough.

use crate::scalar::{lit, Real};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matrix product shape");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(r).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape");
        (0..self.rows).map(|r| crate::scalar::dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let a = row[i];
                if a == T::zero() {
                    continue;
                }
                for j in i..n {
                    g.data[i * n + j] += a * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in descending order.
    pub values: Vec<T>,
    /// Eigenvectors stored as rows, matching `values`.
    pub vectors: Matrix<T>,
}

/// Eigendecomposition of a symmetric matrix. Only the upper triangle of `a` is read.
///
/// Small matrices use cyclic Jacobi; larger ones use Householder
/// tridiagonalization followed by implicit QL.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>) -> SymmetricEigen<T> {
    assert_eq!(a.rows(), a.cols(), "eigendecomposition of a non-square matrix");
    if a.rows() > 32 {
        return tridiagonal_ql(a);
    }
    jacobi(a)
}

fn jacobi<T: Real>(a: &Matrix<T>) -> SymmetricEigen<T> {
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    // Columns of v accumulate the rotations; transposed at the end.
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();
    let half = lit::<T>(0.5);

    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += m[(i, i)] * m[(i, i)];
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= eps * eps * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                if apq.abs() <= eps * eps * (app.abs() + aqq.abs()) {
                    m[(p, q)] = T::zero();
                    m[(q, p)] = T::zero();
                    continue;
                }
                let theta = (aqq - app) * half / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let diag: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    sorted_eigen(&diag, &v)
}

/// Orders eigenpairs by descending value; `v` holds eigenvectors as columns.
fn sorted_eigen<T: Real>(d: &[T], v: &Matrix<T>) -> SymmetricEigen<T> {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry positive, so results are reproducible.
        let mut pivot = T::zero();
        for k in 0..n {
            if v[(k, i)].abs() > pivot.abs() {
                pivot = v[(k, i)];
            }
        }
        let sign = if pivot < T::zero() { -T::one() } else { T::one() };
        for k in 0..n {
            vectors[(r, k)] = sign * v[(k, i)];
        }
    }
    SymmetricEigen { values, vectors }
}

fn tridiagonal_ql<T: Real>(a: &Matrix<T>) -> SymmetricEigen<T> {
    let n = a.rows();
    let mut v = Matrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            v[(i, j)] = a[(i, j)];
            v[(j, i)] = a[(i, j)];
        }
    }
    let mut d: Vec<T> = (0..n).map(|j| v[(n - 1, j)]).collect();
    let mut e = vec![T::zero(); n];

    // Householder reduction to tridiagonal form.
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = T::zero();
                v[(j, i)] = T::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = T::zero();
    }
    v[(n - 1, n - 1)] = T::one();
    e[0] = T::zero();

    // Implicit QL on the tridiagonal matrix.
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    let two = lit::<T>(2.0);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            for _iter in 0..60 {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    sorted_eigen(&d, &v)
}

/// Eigenvalues (descending) and unit eigenvectors of a symmetric 2×2 matrix `[[a, b], [b, c]]`.
pub fn eigen_sym2<T: Real>(a: T, b: T, c: T) -> ([T; 2], [[T; 2]; 2]) {
    let half = lit::<T>(0.5);
    let mean = (a + c) * half;
    let diff = (a - c) * half;
    let r = (diff * diff + b * b).sqrt();
    let l1 = mean + r;
    let l2 = mean - r;
    let v1 = if b.abs() > T::epsilon() * (a.abs() + c.abs() + T::one()) {
        let (x, y) = (l1 - c, b);
        let n = (x * x + y * y).sqrt();
        [x / n, y / n]
    } else if a >= c {
        [T::one(), T::zero()]
    } else {
        [T::zero(), T::one()]
    };
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = Matrix::from_rows(3, 3, vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0]);
        let e = symmetric_eigen(&a);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| e.values[k] * e.vectors[(k, i)] * e.vectors[(k, j)]).sum();
                assert!((r - a[(i, j)]).abs() < 1e-12);
            }
        }
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        let trace: f64 = e.values.iter().sum();
        assert!((trace - 12.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_vectors_orthonormal() {
        let n = 12;
        let mut a = Matrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = ((i * 7 + j * 3) % 11) as f64 + if i == j { 10.0 } else { 0.0 };
            }
        }
        let sym = {
            let t = a.transpose();
            let mut s = a.clone();
            for i in 0..n {
                for j in 0..n {
                    s[(i, j)] = 0.5 * (a[(i, j)] + t[(i, j)]);
                }
            }
            s
        };
        let e = symmetric_eigen(&sym);
        let g = e.vectors.mul(&e.vectors.transpose());
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sym2_matches_general_solver() {
        let (l, v) = eigen_sym2(2.0f64, 0.7, 1.0);
        let e = symmetric_eigen(&Matrix::from_rows(2, 2, vec![2.0, 0.7, 0.7, 1.0]));
        assert!((l[0] - e.values[0]).abs() < 1e-12);
        assert!((l[1] - e.values[1]).abs() < 1e-12);
        assert!((v[0][0] * e.vectors[(0, 0)] + v[0][1] * e.vectors[(0, 1)]).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn large_matrix_reconstructs() {
        let n = 70;
        let mut a = Matrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = (((i * 31 + j * 17) % 23) as f64 - 11.0) / 7.0;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        // Repeated eigenvalues exercise the deflation path.
        a[(0, 0)] = 3.0;
        let e = symmetric_eigen(&a);
        let small = jacobi(&a);
        for k in 0..n {
            assert!((e.values[k] - small.values[k]).abs() < 1e-9, "{k}");
            if k > 0 {
                assert!(e.values[k - 1] >= e.values[k]);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.values[k] * e.vectors[(k, i)] * e.vectors[(k, j)]).sum();
                assert!((r - a[(i, j)]).abs() < 1e-9);
                let g: f64 = (0..n).map(|k| e.vectors[(i, k)] * e.vectors[(j, k)]).sum();
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_rank_deficient_matrix() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = Matrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = x[i] * x[j];
            }
        }
        let e = symmetric_eigen(&a);
        let nx: f64 = x.iter().map(|v| v * v).sum();
        assert!((e.values[0] - nx).abs() < 1e-10);
        assert!(e.values[1..].iter().all(|v| v.abs() < 1e-10));
    }
}
