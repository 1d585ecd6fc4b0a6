//! Small dense linear algebra over a generic scalar.
//!
//! Domains are at most three dimensional, so everything here is written for
//! tiny matrices: Gaussian elimination with partial pivoting, cyclic Jacobi
//! for symmetric eigenproblems, Cholesky for SPD metrics and modified
//! Gram-Schmidt for frame re-orthonormalization. No external matrix crate is
//! worth the trait friction at these sizes.

use crate::real::Real;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<T>]) -> Self {
        let c = cols.len();
        let r = if c == 0 { 0 } else { cols[0].len() };
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), r, "ragged columns");
            for i in 0..r {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[T]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mat_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn mat_mat(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                out[(i, j)] = (0..self.cols).map(|k| self[(i, k)] * other[(k, j)]).sum();
            }
        }
        out
    }

    /// Determinant by LU with partial pivoting.
    pub fn det(&self) -> T {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut det = T::one();
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if a[(i, k)].abs() > a[(p, k)].abs() {
                    p = i;
                }
            }
            if a[(p, k)] == T::zero() {
                return T::zero();
            }
            if p != k {
                for j in 0..n {
                    let t = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = t;
                }
                det = -det;
            }
            det *= a[(k, k)];
            for i in k + 1..n {
                let factor = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    let s = a[(k, j)];
                    a[(i, j)] = a[(i, j)] - factor * s;
                }
            }
        }
        det
    }

    /// Solve `self * x = b` by Gaussian elimination with partial pivoting.
    /// Returns `None` when the pivot collapses (singular to working precision).
    pub fn solve(&self, b: &[T]) -> Option<Vec<T>> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(b.len(), self.rows);
        let n = self.rows;
        let mut a = self.clone();
        let mut x = b.to_vec();
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if a[(i, k)].abs() > a[(p, k)].abs() {
                    p = i;
                }
            }
            if a[(p, k)].abs() < T::epsilon() * T::of(64.0) {
                return None;
            }
            if p != k {
                for j in 0..n {
                    let t = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = t;
                }
                x.swap(k, p);
            }
            for i in k + 1..n {
                let factor = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    let s = a[(k, j)];
                    a[(i, j)] = a[(i, j)] - factor * s;
                }
                let s = x[k];
                x[i] = x[i] - factor * s;
            }
        }
        for k in (0..n).rev() {
            for j in k + 1..n {
                let s = x[j];
                x[k] = x[k] - a[(k, j)] * s;
            }
            x[k] = x[k] / a[(k, k)];
        }
        Some(x)
    }

    /// Cholesky factor L with `self = L L^T`. Requires SPD input.
    pub fn cholesky(&self) -> Option<Self> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= T::zero() {
                        return None;
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// Forward-substitute `L x = b` for lower-triangular `self`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.rows;
        let mut x = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                let s = x[j];
                x[i] = x[i] - self[(i, j)] * s;
            }
            x[i] = x[i] / self[(i, i)];
        }
        x
    }

    /// Back-substitute `L^T x = b` for lower-triangular `self`.
    pub fn solve_lower_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.rows;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            for j in i + 1..n {
                let s = x[j];
                x[i] = x[i] - self[(j, i)] * s;
            }
            x[i] = x[i] / self[(i, i)];
        }
        x
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn scale<T: Real>(v: &mut [T], alpha: T) {
    for x in v.iter_mut() {
        *x *= alpha;
    }
}

pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x - *y).collect()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with matching unit eigenvectors as
/// matrix columns. Eigenvector signs are normalized so the first component of
/// largest magnitude is positive, which pins the canonical frame convention.
pub fn sym_eigen<T: Real>(a: &Mat<T>) -> (Vec<T>, Mat<T>) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut a = a.clone();
    let mut v = Mat::identity(n);
    let tol = T::epsilon() * T::of(16.0);
    for _sweep in 0..64 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() <= tol * (a[(p, p)].abs() + a[(q, q)].abs() + T::one()) {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * a[(p, q)]);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(i, i)].partial_cmp(&a[(j, j)]).expect("eigenvalues are finite")
    });
    let vals: Vec<T> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        let mut col = v.col(old_j);
        let mut lead = 0usize;
        for k in 0..n {
            if col[k].abs() > col[lead].abs() {
                lead = k;
            }
        }
        if col[lead] < T::zero() {
            scale(&mut col, -T::one());
        }
        vecs.set_col(new_j, &col);
    }
    (vals, vecs)
}

/// Modified Gram-Schmidt on the columns.
///
/// Returns the orthonormalized frame. The triangular change of basis has
/// positive diagonal, so the span orientation is preserved; `None` when a
/// column collapses below `tol` (frame lost rank).
pub fn orthonormalize<T: Real>(frame: &Mat<T>, tol: T) -> Option<Mat<T>> {
    let mut q = frame.clone();
    for j in 0..q.cols {
        let mut col = q.col(j);
        for i in 0..j {
            let qi = q.col(i);
            let r = dot(&qi, &col);
            axpy(&mut col, -r, &qi);
        }
        let n = norm(&col);
        if n < tol {
            return None;
        }
        scale(&mut col, T::one() / n);
        q.set_col(j, &col);
    }
    Some(q)
}

/// Generalized symmetric eigenproblem `H v = lambda G v` for SPD `G`.
///
/// Eigenvectors are G-orthonormal, eigenvalues ascending. These are the
/// eigenpairs of the metric-adjusted Hessian `G^{-1} H`.
pub fn generalized_sym_eigen<T: Real>(h: &Mat<T>, g: &Mat<T>) -> Option<(Vec<T>, Mat<T>)> {
    let n = h.rows;
    let l = g.cholesky()?;
    // B = L^{-1} H L^{-T}, symmetric.
    let mut b = Mat::zeros(n, n);
    for j in 0..n {
        let hj = h.col(j);
        b.set_col(j, &l.solve_lower(&hj));
    }
    let bt = b.transpose();
    let mut c = Mat::zeros(n, n);
    for j in 0..n {
        let bj = bt.col(j);
        c.set_col(j, &l.solve_lower(&bj));
    }
    // Symmetrize against roundoff before Jacobi.
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = (c[(i, j)] + c[(j, i)]) / T::of(2.0);
        }
    }
    let (vals, w) = sym_eigen(&s);
    let mut vecs = Mat::zeros(n, n);
    for j in 0..n {
        let wj = w.col(j);
        let mut vj = l.solve_lower_transpose(&wj);
        let mut lead = 0usize;
        for k in 0..n {
            if vj[k].abs() > vj[lead].abs() {
                lead = k;
            }
        }
        if vj[lead] < T::zero() {
            scale(&mut vj, -T::one());
        }
        vecs.set_col(j, &vj);
    }
    Some((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        let a: Mat<f64> = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let x = a.solve(&[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn det_matches_cofactor_expansion() {
        let a: Mat<f64> = Mat::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![0.0, 4.0, 5.0],
            vec![1.0, 0.0, 6.0],
        ]);
        // 1*(24-0) - 2*(0-5) + 3*(0-4) = 24 + 10 - 12 = 22
        assert!((a.det() - 22.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigen_diagonalizes_symmetric_matrix() {
        let a: Mat<f64> = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (vals, vecs) = sym_eigen(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        for j in 0..2 {
            let v = vecs.col(j);
            let av = a.mat_vec(&v);
            for i in 0..2 {
                assert!((av[i] - vals[j] * v[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigenvector_sign_convention_is_leading_component_positive() {
        let a: Mat<f64> = Mat::from_rows(&[vec![-4.0, 0.0], vec![0.0, 9.0]]);
        let (vals, vecs) = sym_eigen(&a);
        assert_eq!(vals, vec![-4.0, 9.0]);
        assert!(vecs[(0, 0)] > 0.0);
        assert!(vecs[(1, 1)] > 0.0);
    }

    #[test]
    fn generalized_eigen_reduces_to_standard_for_identity_metric() {
        let h: Mat<f64> = Mat::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
        let g = Mat::identity(2);
        let (vals, vecs) = generalized_sym_eigen(&h, &g).unwrap();
        assert!((vals[0] + 2.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        // G-orthonormal = orthonormal here.
        let v0 = vecs.col(0);
        let v1 = vecs.col(1);
        assert!(dot(&v0, &v1).abs() < 1e-12);
        assert!((norm(&v0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generalized_eigen_counts_negative_directions_with_metric() {
        // H = diag(-1, 4), G = diag(4, 1): G^{-1}H = diag(-1/4, 4).
        let h: Mat<f64> = Mat::from_rows(&[vec![-1.0, 0.0], vec![0.0, 4.0]]);
        let g = Mat::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]);
        let (vals, vecs) = generalized_sym_eigen(&h, &g).unwrap();
        assert!((vals[0] + 0.25).abs() < 1e-12);
        assert!((vals[1] - 4.0).abs() < 1e-12);
        // G-orthonormality: v^T G v = 1.
        let v0 = vecs.col(0);
        let gv0 = g.mat_vec(&v0);
        assert!((dot(&v0, &gv0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_preserves_orientation_and_detects_rank_loss() {
        let f: Mat<f64> = Mat::from_cols(&[vec![2.0, 0.0], vec![1.0, 1.0]]);
        let q = orthonormalize(&f, 1e-12).unwrap();
        assert!((q.det() - 1.0).abs() < 1e-12, "positive det preserved");
        let collapsed: Mat<f64> = Mat::from_cols(&[vec![1.0, 0.0], vec![1.0, 1e-15]]);
        assert!(orthonormalize(&collapsed, 1e-9).is_none());
    }

    #[test]
    fn works_over_f32_too() {
        let a: Mat<f32> = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let x = a.solve(&[4.0, 9.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-5);
        assert!((x[1] - 3.0).abs() < 1e-5);
    }
}
