//! Compressed sparse rows and envelope (profile) factorisations.
//!
//! The stencil matrices in this crate have a structurally symmetric pattern,
//! a narrow band and, on periodic grids, a few wrap-around entries. An
//! envelope factorisation keeps all fill inside the row/column profile, so a
//! 1-D periodic factor costs `O(N)` and a 2-D `n x n` periodic one
//! `O(n^4)` flops.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed, columns sorted.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            debug_assert!(r < nrows && c < ncols);
            rows[r].push((c, v));
        }
        Self::from_rows(ncols, rows)
    }

    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn row_values_mut(&mut self, r: usize) -> &mut [f64] {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        &mut self.values[range]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += v * x[r];
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &t)
    }

    /// `scale * AᵀA`.
    pub fn gram(&self, scale: f64) -> CsrMatrix {
        let mut out = Vec::new();
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&ci, &vi) in cols.iter().zip(vals) {
                for (&cj, &vj) in cols.iter().zip(vals) {
                    out.push((ci, cj, scale * vi * vj));
                }
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.ncols, &out)
    }

    pub fn add(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let t: Vec<_> = self.triplets().chain(other.triplets()).collect();
        CsrMatrix::from_triplets(self.nrows, self.ncols, &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Per-index start of the symmetric envelope: the smallest index `j` such
/// that `A[i][j]` or `A[j][i]` is structurally nonzero (capped at `i`).
fn envelope_starts(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut first: Vec<usize> = (0..n).collect();
    for (r, c, _) in a.triplets() {
        if c < r {
            first[r] = first[r].min(c);
        } else if r < c {
            first[c] = first[c].min(r);
        }
    }
    first
}

fn offsets(first: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(first.len() + 1);
    off.push(0);
    for (i, &f) in first.iter().enumerate() {
        off.push(off[i] + (i - f) + 1);
    }
    off
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LU factorisation without pivoting inside the symmetric envelope.
///
/// Intended for row diagonally dominant matrices (the SPDE factors), for
/// which elimination without pivoting is backward stable.
#[derive(Clone, Debug)]
pub struct ProfileLu {
    n: usize,
    first: Vec<usize>,
    off: Vec<usize>,
    // row i of the unit lower factor, columns first[i]..i (diagonal slot unused)
    lower: Vec<f64>,
    // column j of the upper factor, rows first[j]..=j
    upper: Vec<f64>,
}

impl ProfileLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidParameter("LU needs a square matrix".into()));
        }
        let n = a.nrows();
        let first = envelope_starts(a);
        let off = offsets(&first);
        let mut lower = vec![0.0; off[n]];
        let mut upper = vec![0.0; off[n]];
        for (r, c, v) in a.triplets() {
            if c < r {
                lower[off[r] + c - first[r]] += v;
            } else {
                upper[off[c] + r - first[c]] += v;
            }
        }
        for k in 0..n {
            let fk = first[k];
            // column k of U, rows fk..k
            for i in fk..k {
                let p0 = fk.max(first[i]);
                let s = dot(
                    &lower[off[i] + p0 - first[i]..off[i] + i - first[i]],
                    &upper[off[k] + p0 - fk..off[k] + i - fk],
                );
                upper[off[k] + i - fk] -= s;
            }
            // row k of L, columns fk..k
            for j in fk..k {
                let p0 = fk.max(first[j]);
                let s = dot(
                    &lower[off[k] + p0 - fk..off[k] + j - fk],
                    &upper[off[j] + p0 - first[j]..off[j] + j - first[j]],
                );
                let pivot = upper[off[j] + j - first[j]];
                lower[off[k] + j - fk] = (lower[off[k] + j - fk] - s) / pivot;
            }
            let s = dot(&lower[off[k]..off[k] + k - fk], &upper[off[k]..off[k] + k - fk]);
            let d = upper[off[k] + k - fk] - s;
            if !(d.abs() > 0.0) || !d.is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            upper[off[k] + k - fk] = d;
        }
        Ok(Self { n, first, off, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let s = dot(&self.lower[self.off[i]..self.off[i] + i - fi], &b[fi..i]);
            b[i] -= s;
        }
        for j in (0..n).rev() {
            let fj = self.first[j];
            let col = &self.upper[self.off[j]..self.off[j] + j - fj + 1];
            let xj = b[j] / col[j - fj];
            b[j] = xj;
            for (p, u) in (fj..j).zip(col) {
                b[p] -= u * xj;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `log |det A|` and the sign of `det A`.
    pub fn log_abs_det(&self) -> (f64, f64) {
        let mut sign = 1.0;
        let mut log = 0.0;
        for j in 0..self.n {
            let d = self.upper[self.off[j] + j - self.first[j]];
            if d < 0.0 {
                sign = -sign;
            }
            log += d.abs().ln();
        }
        (log, sign)
    }
}

/// Cholesky factorisation `A = G Gᵀ` inside the envelope of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct ProfileCholesky {
    n: usize,
    first: Vec<usize>,
    off: Vec<usize>,
    // row i of G, columns first[i]..=i
    rows: Vec<f64>,
}

impl ProfileCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidParameter("Cholesky needs a square matrix".into()));
        }
        let n = a.nrows();
        let first = envelope_starts(a);
        let off = offsets(&first);
        let mut rows = vec![0.0; off[n]];
        for (r, c, v) in a.triplets() {
            if c <= r {
                rows[off[r] + c - first[r]] += v;
            }
        }
        for k in 0..n {
            let fk = first[k];
            for j in fk..k {
                let p0 = fk.max(first[j]);
                let s = dot(
                    &rows[off[k] + p0 - fk..off[k] + j - fk],
                    &rows[off[j] + p0 - first[j]..off[j] + j - first[j]],
                );
                let gjj = rows[off[j] + j - first[j]];
                rows[off[k] + j - fk] = (rows[off[k] + j - fk] - s) / gjj;
            }
            let row = &rows[off[k]..off[k] + k - fk];
            let d = rows[off[k] + k - fk] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular(format!("matrix not positive definite at row {k}")));
            }
            rows[off[k] + k - fk] = d.sqrt();
        }
        Ok(Self { n, first, off, rows })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.rows[self.off[i]..self.off[i] + i - fi + 1];
            let s = dot(&row[..i - fi], &b[fi..i]);
            b[i] = (b[i] - s) / row[i - fi];
        }
        for j in (0..n).rev() {
            let fj = self.first[j];
            let row = &self.rows[self.off[j]..self.off[j] + j - fj + 1];
            let xj = b[j] / row[j - fj];
            b[j] = xj;
            for (p, g) in (fj..j).zip(row) {
                b[p] -= g * xj;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|j| self.rows[self.off[j] + j - self.first[j]].ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic_tridiag(n: usize, d: f64, e: f64, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let mut t = vec![];
        for i in 0..n {
            let jitter: f64 = rng.random_range(-0.2..0.2);
            t.push((i, i, d + jitter));
            t.push((i, (i + 1) % n, e + rng.random_range(-0.1..0.1)));
            t.push((i, (i + n - 1) % n, e + rng.random_range(-0.1..0.1)));
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn lu_matches_dense_solve_on_cyclic_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = periodic_tridiag(40, 3.0, -1.0, &mut rng);
        let lu = ProfileLu::factor(&a).unwrap();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = lu.solve(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
        let dense_det = a.to_dense().lu().determinant();
        let (log, sign) = lu.log_abs_det();
        assert!((sign * log.exp() - dense_det).abs() < 1e-9 * dense_det.abs());
    }

    #[test]
    fn cholesky_matches_dense_on_2d_periodic_gram() {
        let n = 6;
        let idx = |x: usize, y: usize| (y % n) * n + (x % n);
        let mut t = vec![];
        for y in 0..n {
            for x in 0..n {
                let i = idx(x, y);
                t.push((i, i, 5.0));
                for j in [idx(x + 1, y), idx(x + n - 1, y), idx(x, y + 1), idx(x, y + n - 1)] {
                    t.push((i, j, -1.0));
                }
            }
        }
        let l = CsrMatrix::from_triplets(n * n, n * n, &t);
        let q = l.gram(1.0);
        let chol = ProfileCholesky::factor(&q).unwrap();
        let b: Vec<f64> = (0..n * n).map(|i| i as f64 - 7.0).collect();
        let x = chol.solve(&b);
        let r = q.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
        let dense = q.to_dense().cholesky().unwrap();
        let dense_logdet: f64 = 2.0 * dense.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert!((chol.log_det() - dense_logdet).abs() < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(ProfileCholesky::factor(&a).is_err());
    }

    #[test]
    fn gram_and_transpose() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]);
        let g = a.gram(2.0).to_dense();
        let d = a.to_dense();
        let expect = d.transpose() * &d * 2.0;
        assert!((g - expect).abs().max() < 1e-15);
        assert_eq!(a.transpose().to_dense(), d.transpose());
        assert_eq!(a.tr_matvec(&[1.0, 1.0]), vec![1.0, 3.0, 2.0]);
    }
}
