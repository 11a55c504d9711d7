//! Small dense linear algebra used throughout the toolkit.
//!
//! Every matrix in this problem is tiny (at most 19x19), so a plain
//! row-major `Vec<f64>` container plus a cyclic Jacobi eigensolver covers
//! all needs without pulling in a linear algebra dependency. Spectral
//! norms of the n x m mapping matrices (n = 2) are obtained from the Gram
//! matrix on the small side.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row slices; panics if rows have unequal lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty row set");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    /// Build from a row-major flat slice.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "from_row_major: size mismatch");
        Self { rows, cols, data: data.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`
    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "mul: dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn mul_transpose(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "mul_transpose: dimension mismatch");
        Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `self * v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T * v`
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for j in 0..self.cols {
                out[j] += row[j] * vi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Rank-one update `self += s * u v^T`.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let su = s * u[i];
            let row = self.row_mut(i);
            for j in 0..v.len() {
                row[j] += su * v[j];
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Eigendecomposition of a symmetric matrix.
///
/// `values` are sorted non-increasing and `vectors` holds the matching
/// eigenvectors as rows.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps rotations until the off-diagonal Frobenius norm falls below
/// `1e-12` relative to the matrix norm. Dimensions here never exceed 19,
/// so convergence takes a handful of sweeps.
pub fn sym_eigen(a: &Mat) -> SymEigen {
    assert_eq!(a.rows(), a.cols(), "sym_eigen: matrix not square");
    let n = a.rows();
    let mut m = a.clone();
    // Symmetrize against accumulated round-off in the caller.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Mat::identity(n);
    let norm = m.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * norm;

    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m.
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
                // Accumulate: columns of v are eigenvectors.
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
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |i, j| v[(j, order[i])]);
    SymEigen { values, vectors }
}

/// Largest eigenvalue of a symmetric 2x2 (or 1x1) matrix, closed form.
fn lambda_max_small(g: &Mat) -> Option<f64> {
    match g.rows() {
        1 => Some(g[(0, 0)]),
        2 => {
            let a = g[(0, 0)];
            let b = 0.5 * (g[(0, 1)] + g[(1, 0)]);
            let c = g[(1, 1)];
            let half = 0.5 * (a - c);
            Some(0.5 * (a + c) + (half * half + b * b).sqrt())
        }
        _ => None,
    }
}

/// Spectral norm (largest singular value) via the Gram matrix on the
/// smaller side.
pub fn spectral_norm(a: &Mat) -> f64 {
    let g = if a.rows() <= a.cols() { a.mul_transpose(a) } else { a.transpose().mul_transpose(&a.transpose()) };
    let lam = match lambda_max_small(&g) {
        Some(l) => l,
        None => sym_eigen(&g).values[0],
    };
    lam.max(0.0).sqrt()
}

pub fn smallest_singular_value(a: &Mat) -> f64 {
    let g = if a.rows() <= a.cols() { a.mul_transpose(a) } else { a.transpose().mul_transpose(&a.transpose()) };
    let eig = sym_eigen(&g);
    eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Orthonormal basis of the row space of `a`, keeping singular directions
/// with singular value above `tol`. Rows of the result are the basis.
pub fn row_space_basis(a: &Mat, tol: f64) -> Mat {
    let g = a.mul_transpose(a);
    let eig = sym_eigen(&g);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, &lam) in eig.values.iter().enumerate() {
        let sigma = lam.max(0.0).sqrt();
        if sigma > tol {
            // Right singular vector: w = A^T v / sigma.
            let v = eig.vectors.row(i);
            let mut w = a.tr_matvec(v);
            for x in &mut w {
                *x /= sigma;
            }
            rows.push(w);
        }
    }
    if rows.is_empty() {
        Mat::zeros(0, a.cols())
    } else {
        Mat::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_against_hand_computation() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.mul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = a.mul_transpose(&b);
        assert_eq!(ct.data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn jacobi_recovers_planted_spectrum() {
        // Q diag(5, 2, 1, 0.5) Q^T with a fixed rotation Q.
        let n = 4;
        let planted = [5.0, 2.0, 1.0, 0.5];
        let q = orthonormal_test_basis(n);
        let a = Mat::from_fn(n, n, |i, j| {
            (0..n).map(|k| q[(k, i)] * planted[k] * q[(k, j)]).sum()
        });
        let eig = sym_eigen(&a);
        for (got, want) in eig.values.iter().zip(planted.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-10);
        }
        // Eigenvectors orthonormal and satisfy A v = lambda v.
        for i in 0..n {
            let v = eig.vectors.row(i).to_vec();
            let av = a.matvec(&v);
            for (x, y) in av.iter().zip(v.iter()) {
                assert_relative_eq!(x, &(eig.values[i] * y), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spectral_norm_of_known_matrix() {
        // Rank-one 2x3: norm is the vector product of the factors.
        let a = Mat::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        assert_relative_eq!(spectral_norm(&a), 2.0, epsilon = 1e-12);
        let b = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]]);
        assert_relative_eq!(spectral_norm(&b), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn row_space_projection_splits_norm() {
        let a = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let basis = row_space_basis(&a, 1e-10);
        assert_eq!(basis.rows(), 2);
        let u = [1.0, 0.0, 1.0];
        let mut proj = vec![0.0; 3];
        for i in 0..basis.rows() {
            let coef = dot(basis.row(i), &u);
            axpy(&mut proj, coef, basis.row(i));
        }
        assert_relative_eq!(norm2(&proj), 1.0, epsilon = 1e-12);
    }

    fn orthonormal_test_basis(n: usize) -> Mat {
        // Deterministic orthonormal basis via Gram-Schmidt on a fixed
        // well-conditioned seed matrix.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let mut v: Vec<f64> =
                (0..n).map(|j| ((i * n + j + 1) as f64).sin() + if i == j { 2.0 } else { 0.0 }).collect();
            for r in &rows {
                let c = dot(&v, r);
                axpy(&mut v, -c, r);
            }
            let nv = norm2(&v);
            for x in &mut v {
                *x /= nv;
            }
            rows.push(v);
        }
        Mat::from_rows(&rows)
    }
}
