//! Sparse symmetric matrices and their Cholesky factorization.
//!
//! Factorization is delegated to `faer`'s supernodal sparse Cholesky with a
//! fill-reducing ordering.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("invalid sparse matrix: {0}")]
    Structure(String),
}

/// Symmetric sparse matrix in compressed column form, both triangles stored.
#[derive(Debug, Clone)]
pub struct SparseSym {
    inner: SparseColMat<usize, f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push(Triplet::new(row, col, val));
    }

    pub fn build(self) -> Result<SparseSym, LinalgError> {
        let inner = SparseColMat::try_new_from_triplets(self.n, self.n, &self.entries)
            .map_err(|e| LinalgError::Structure(format!("{e:?}")))?;
        Ok(SparseSym { inner })
    }
}

impl SparseSym {
    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.push(i, i, 1.0);
        }
        b.build().expect("identity is well formed")
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n = rows.len();
        let mut b = TripletBuilder::new(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LinalgError::Structure("matrix is not square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.inner.compute_nnz()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let m = self.inner.as_ref();
        let sym = m.symbolic();
        let vals = m.val();
        let col_ptr = sym.col_ptr();
        let row_idx = sym.row_idx();
        for j in 0..self.dim() {
            for p in col_ptr[j]..col_ptr[j + 1] {
                f(row_idx[p], j, vals[p]);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let mut y = vec![0.0; self.dim()];
        self.for_each(|i, j, v| y[i] += v * x[j]);
        y
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        self.for_each(|i, j, v| s += x[i] * v * y[j]);
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        self.for_each(|i, j, v| d[i][j] += v);
        d
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.to_dense();
        let n = d.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((d[i][j] - d[j][i]).abs());
            }
        }
        worst
    }

    pub fn scaled(&self, alpha: f64) -> SparseSym {
        let mut b = TripletBuilder::with_capacity(self.dim(), self.nnz());
        self.for_each(|i, j, v| b.push(i, j, alpha * v));
        b.build().expect("scaling keeps the structure")
    }

    pub fn factorize(&self) -> Result<SpdFactor, LinalgError> {
        SpdFactor::new(self)
    }
}

/// A Cholesky factorization that can be applied to any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    llt: Llt<usize, f64>,
    symbolic: SymbolicLlt<usize>,
    n: usize,
}

impl SpdFactor {
    pub fn new(matrix: &SparseSym) -> Result<Self, LinalgError> {
        let symbolic = SymbolicLlt::try_new(matrix.inner.symbolic(), Side::Lower)
            .map_err(|e| LinalgError::Structure(format!("{e:?}")))?;
        Self::with_symbolic(symbolic, matrix)
    }

    /// Numeric factorization reusing the analysis of a matrix with the same pattern.
    pub fn with_symbolic(symbolic: SymbolicLlt<usize>, matrix: &SparseSym) -> Result<Self, LinalgError> {
        let llt = Llt::try_new_with_symbolic(symbolic.clone(), matrix.inner.as_ref(), Side::Lower)
            .map_err(|_| LinalgError::NotSpd)?;
        Ok(Self {
            llt,
            symbolic,
            n: matrix.dim(),
        })
    }

    pub fn symbolic(&self) -> SymbolicLlt<usize> {
        self.symbolic.clone()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let mut x = Mat::<f64>::from_fn(self.n, 1, |i, _| rhs[i]);
        self.llt.solve_in_place(x.as_mut());
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// One-shot solve of `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(matrix: &SparseSym, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    Ok(matrix.factorize()?.solve(rhs))
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_solve() {
        let b = vec![1.0, -2.0, 3.5];
        assert_eq!(solve_spd(&SparseSym::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn two_by_two() {
        let a = SparseSym::from_dense(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let x = solve_spd(&a, &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 50;
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| m[i][k] * m[j][k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let a = SparseSym::from_dense(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = a.factorize().unwrap();
        let x = f.solve(&b);
        let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm(&r) <= 1e-10 * norm(&b));
        // factor reuse
        let x2 = f.solve(&r);
        assert_eq!(x2.len(), n);
    }

    #[test]
    fn indefinite_rejected() {
        let a = SparseSym::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(solve_spd(&a, &[1.0, 1.0]).unwrap_err(), LinalgError::NotSpd);
    }
}
