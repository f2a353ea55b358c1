//! Small stack-allocated m x d matrices for gradients of vector fields.
//!
//! Both dimensions are at most 3, so a fixed 3x3 backing array avoids heap
//! traffic in the per-element hot loops.

use crate::MAX_DIM;

/// An m x d matrix (m components, d spatial directions) backed by a fixed
/// 3x3 array. Unused entries stay zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatMd {
    pub m: usize,
    pub d: usize,
    a: [[f64; MAX_DIM]; MAX_DIM],
}

impl MatMd {
    pub fn zeros(m: usize, d: usize) -> Self {
        assert!(m >= 1 && m <= MAX_DIM && d >= 1 && d <= MAX_DIM);
        MatMd { m, d, a: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    /// A single-row matrix (scalar-valued field, m = 1).
    pub fn row(v: &[f64]) -> Self {
        let mut out = Self::zeros(1, v.len());
        out.a[0][..v.len()].copy_from_slice(v);
        out
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let m = rows.len();
        let d = rows[0].len();
        let mut out = Self::zeros(m, d);
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), d);
            out.a[k][..d].copy_from_slice(r);
        }
        out
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        debug_assert!(k < self.m && j < self.d);
        self.a[k][j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        debug_assert!(k < self.m && j < self.d);
        self.a[k][j] = v;
    }

    #[inline]
    pub fn add_assign_scaled(&mut self, other: &MatMd, s: f64) {
        debug_assert!(self.m == other.m && self.d == other.d);
        for k in 0..self.m {
            for j in 0..self.d {
                self.a[k][j] += s * other.a[k][j];
            }
        }
    }

    pub fn scaled(&self, s: f64) -> MatMd {
        let mut out = *self;
        for k in 0..self.m {
            for j in 0..self.d {
                out.a[k][j] *= s;
            }
        }
        out
    }

    pub fn add(&self, other: &MatMd) -> MatMd {
        let mut out = *self;
        out.add_assign_scaled(other, 1.0);
        out
    }

    pub fn sub(&self, other: &MatMd) -> MatMd {
        let mut out = *self;
        out.add_assign_scaled(other, -1.0);
        out
    }

    /// Column-scaled product xi * diag(a): column j is multiplied by a[j].
    #[inline]
    pub fn scale_cols(&self, diag: &[f64; MAX_DIM]) -> MatMd {
        let mut out = *self;
        for k in 0..self.m {
            for j in 0..self.d {
                out.a[k][j] *= diag[j];
            }
        }
        out
    }

    /// Squared Frobenius norm.
    #[inline]
    pub fn frob2(&self) -> f64 {
        let mut s = 0.0;
        for k in 0..self.m {
            for j in 0..self.d {
                s += self.a[k][j] * self.a[k][j];
            }
        }
        s
    }

    pub fn frob(&self) -> f64 {
        self.frob2().sqrt()
    }

    /// Frobenius inner product.
    #[inline]
    pub fn dot(&self, other: &MatMd) -> f64 {
        debug_assert!(self.m == other.m && self.d == other.d);
        let mut s = 0.0;
        for k in 0..self.m {
            for j in 0..self.d {
                s += self.a[k][j] * other.a[k][j];
            }
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        (0..self.m).all(|k| (0..self.d).all(|j| self.a[k][j].is_finite()))
    }

    /// Operator norm (largest singular value) via power iteration on M^T M.
    /// For m = 1 this coincides with the Euclidean norm of the row.
    pub fn norm_op(&self) -> f64 {
        if self.m == 1 {
            return self.frob();
        }
        // Power iteration on the d x d Gram matrix; d <= 3 so a handful of
        // iterations is plenty.
        let mut g = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..self.d {
            for j in 0..self.d {
                let mut s = 0.0;
                for k in 0..self.m {
                    s += self.a[k][i] * self.a[k][j];
                }
                g[i][j] = s;
            }
        }
        let mut v = [1.0; MAX_DIM];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut w = [0.0; MAX_DIM];
            for i in 0..self.d {
                for j in 0..self.d {
                    w[i] += g[i][j] * v[j];
                }
            }
            let norm = w.iter().take(self.d).map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for i in 0..self.d {
                v[i] = w[i] / norm;
            }
            lambda = norm;
        }
        lambda.sqrt()
    }
}
