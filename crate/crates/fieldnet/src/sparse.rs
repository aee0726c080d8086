//! Sparse matrix storage with exact structural zeros, and a sparse
//! Cholesky factorization for symmetric positive definite systems.
//!
//! Storage is index-pair keyed with per-row neighbor lists: only true
//! nonzeros are stored, so the sparsity pattern of a covariance matrix
//! is the interaction graph itself. Dense conversion is allowed only for
//! small matrices (oracle tests); there is no dense fallback above
//! [`DENSE_CAP`].

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest dimension for which `to_dense` is permitted.
pub const DENSE_CAP: usize = 64;

/// Sparse matrix whose stored entries are exactly the nonzeros.
///
/// Iteration over a row always visits columns in increasing order, which
/// pins the floating-point summation order of every product computed
/// from this structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCovariance {
    rows: usize,
    cols: usize,
    entries: BTreeMap<(usize, usize), f64>,
    row_index: Vec<Vec<usize>>,
}

impl SparseCovariance {
    /// Build from explicit entries. Entries equal to zero are dropped so
    /// the stored pattern stays exact.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut row_index = vec![Vec::new(); rows];
        for (i, j, v) in entries {
            if i >= rows || j >= cols {
                return Err(Error::InvalidInput(format!(
                    "entry ({i},{j}) outside {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("entry ({i},{j}) is not finite")));
            }
            if v != 0.0 && map.insert((i, j), v).is_none() {
                row_index[i].push(j);
            }
        }
        for r in &mut row_index {
            r.sort_unstable();
        }
        Ok(Self { rows, cols, entries: map, row_index })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Entry value; structural zeros read as exactly 0.0.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    /// Column ids with stored entries in row `i`, ascending.
    pub fn row_neighbors(&self, i: usize) -> &[usize] {
        &self.row_index[i]
    }

    /// Stored entries of row `i` as (col, value), ascending by column.
    pub fn row_iter(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_index[i].iter().map(move |&j| (j, self.entries[&(i, j)]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    /// `(A + diag(shift)) * v`, accumulating the diagonal shift first and
    /// then stored entries in ascending column order.
    pub fn shifted_matvec(&self, shift: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols || shift.len() != self.rows || self.rows != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let mut acc = shift[i] * v[i];
            for (j, a) in self.row_iter(i) {
                acc += a * v[j];
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Plain matvec in ascending column order.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let mut acc = 0.0;
            for (j, a) in self.row_iter(i) {
                acc += a * v[j];
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Dot product of row `m` with a dense vector.
    pub fn row_dot(&self, m: usize, v: &[f64]) -> f64 {
        self.row_iter(m).map(|(j, a)| a * v[j]).sum()
    }

    /// Dense copy for oracle tests; refuses matrices above [`DENSE_CAP`].
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.rows.max(self.cols) > DENSE_CAP {
            return Err(Error::InvalidInput(format!(
                "dense fallback refused for {}x{} (cap {DENSE_CAP})",
                self.rows, self.cols
            )));
        }
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        Ok(m)
    }

    fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.iter().all(|(i, j, v)| self.get(j, i) == v)
    }
}

/// Sparse Cholesky factor `L` with `A = L L^T`, columns stored with the
/// diagonal first.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseCholesky {
    /// Factor `A + diag(shift)` where `A` is symmetric. Fill-in is
    /// created as needed; fails on a non-positive pivot.
    pub fn factor(a: &SparseCovariance, shift: &[f64]) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::InvalidInput(format!(
                "cannot factor non-square {}x{} matrix",
                a.rows, a.cols
            )));
        }
        if shift.len() != a.rows {
            return Err(Error::DimensionMismatch { expected: a.rows, got: shift.len() });
        }
        let n = a.rows;
        // Active lower triangle, column-major: active[j][i] for i >= j.
        let mut active: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, v) in a.iter() {
            if i >= j {
                active[j].insert(i, v);
            }
        }
        for (j, s) in shift.iter().enumerate() {
            *active[j].entry(j).or_insert(0.0) += s;
        }

        let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for j in 0..n {
            let col = std::mem::take(&mut active[j]);
            let pivot = col.get(&j).copied().unwrap_or(0.0);
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, value: pivot });
            }
            let ljj = pivot.sqrt();
            let below: Vec<(usize, f64)> =
                col.into_iter().filter(|&(i, _)| i > j).map(|(i, v)| (i, v / ljj)).collect();
            // Rank-one update of the trailing submatrix on the column pattern.
            for (idx, &(k, lkj)) in below.iter().enumerate() {
                for &(i, lij) in &below[idx..] {
                    *active[k].entry(i).or_insert(0.0) -= lij * lkj;
                }
            }
            let mut stored = Vec::with_capacity(below.len() + 1);
            stored.push((j, ljj));
            stored.extend(below);
            cols.push(stored);
        }
        Ok(Self { n, cols })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: b.len() });
        }
        let mut x = b.to_vec();
        // Forward: L y = b.
        for j in 0..self.n {
            let (_, ljj) = self.cols[j][0];
            x[j] /= ljj;
            let yj = x[j];
            for &(i, lij) in &self.cols[j][1..] {
                x[i] -= lij * yj;
            }
        }
        // Backward: L^T x = y.
        for j in (0..self.n).rev() {
            let mut acc = x[j];
            for &(i, lij) in &self.cols[j][1..] {
                acc -= lij * x[i];
            }
            x[j] = acc / self.cols[j][0].1;
        }
        Ok(x)
    }
}

/// True iff a symmetric factorization of `c + jitter * I` succeeds.
pub fn spd_check(c: &SparseCovariance, jitter: f64) -> Result<bool> {
    if c.rows != c.cols {
        return Err(Error::InvalidInput(format!(
            "spd_check needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    if !c.is_symmetric() {
        return Err(Error::InvalidInput("spd_check needs a symmetric matrix".into()));
    }
    let shift = vec![jitter; c.rows];
    Ok(SparseCholesky::factor(c, &shift).is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tridiag(n: usize, diag: f64, off: f64) -> SparseCovariance {
        let mut e = Vec::new();
        for i in 0..n {
            e.push((i, i, diag));
            if i + 1 < n {
                e.push((i, i + 1, off));
                e.push((i + 1, i, off));
            }
        }
        SparseCovariance::from_entries(n, n, e).unwrap()
    }

    #[test]
    fn structural_zeros_are_not_stored() {
        let m = SparseCovariance::from_entries(2, 2, vec![(0, 0, 1.0), (0, 1, 0.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.row_neighbors(0), &[0]);
    }

    #[test]
    fn spd_check_diagonal_true() {
        let m = SparseCovariance::from_entries(2, 2, vec![(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(spd_check(&m, 0.0).unwrap());
    }

    #[test]
    fn spd_check_indefinite_false() {
        // [[1, 2], [2, 1]] has eigenvalues 3 and -1.
        let m = SparseCovariance::from_entries(
            2,
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        )
        .unwrap();
        assert!(!spd_check(&m, 0.0).unwrap());
    }

    #[test]
    fn spd_check_rejects_non_square() {
        let m = SparseCovariance::from_entries(2, 3, vec![(0, 0, 1.0)]).unwrap();
        assert!(spd_check(&m, 0.0).is_err());
    }

    #[test]
    fn cholesky_solve_matches_dense_inverse() {
        let a = tridiag(6, 4.0, 1.0);
        let chol = SparseCholesky::factor(&a, &vec![0.5; 6]).unwrap();
        let b: Vec<f64> = (0..6).map(|i| (i as f64) - 2.5).collect();
        let x = chol.solve(&b).unwrap();

        let mut dense = a.to_dense().unwrap();
        for i in 0..6 {
            dense[(i, i)] += 0.5;
        }
        let expect = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(x[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_handles_fill_in() {
        // Arrow matrix: dense first row/column, diagonal elsewhere.
        let n = 8;
        let mut e = vec![(0usize, 0usize, 10.0)];
        for i in 1..n {
            e.push((i, i, 4.0));
            e.push((0, i, 1.0));
            e.push((i, 0, 1.0));
        }
        let a = SparseCovariance::from_entries(n, n, e).unwrap();
        let chol = SparseCholesky::factor(&a, &vec![0.0; n]).unwrap();
        let b = vec![1.0; n];
        let x = chol.solve(&b).unwrap();
        let r = a.shifted_matvec(&vec![0.0; n], &x).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(r[i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dense_cap_enforced() {
        let m = SparseCovariance::from_entries(65, 65, vec![(0, 0, 1.0)]).unwrap();
        assert!(m.to_dense().is_err());
    }

    proptest! {
        // Random diagonally dominant symmetric matrices factor and solve
        // to residuals at solver precision.
        #[test]
        fn random_spd_solve(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..10usize);
            let mut e = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random_bool(0.4) {
                        let v = rng.random_range(-0.5..0.5);
                        e.push((i, j, v));
                        e.push((j, i, v));
                    }
                }
            }
            for i in 0..n {
                e.push((i, i, (n as f64) + 1.0));
            }
            let a = SparseCovariance::from_entries(n, n, e).unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let chol = SparseCholesky::factor(&a, &vec![0.0; n]).unwrap();
            let x = chol.solve(&b).unwrap();
            let r = a.shifted_matvec(&vec![0.0; n], &x).unwrap();
            for i in 0..n {
                prop_assert!((r[i] - b[i]).abs() < 1e-10);
            }
        }
    }
}
