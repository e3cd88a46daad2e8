//! Compressed sparse row storage and a left-looking sparse LU factorization
//! with partial pivoting.

use std::ops::{AddAssign, Mul};

/// Pivots with magnitude below this value are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T> CsrMatrix<T>
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    /// Assembles a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; column indices within a row end up sorted.
    pub fn from_triplets<I>(nrows: usize, ncols: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, T)>,
    {
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); nrows];
        for (i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            rows[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let mut iter = row.into_iter().peekable();
            while let Some((j, mut v)) = iter.next() {
                while let Some(&(jn, vn)) = iter.peek() {
                    if jn != j {
                        break;
                    }
                    v += vn;
                    iter.next();
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
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

    /// Stored entries of row `i` as `(col, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => T::default(),
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let mut acc = T::default();
                for (j, v) in self.row(i) {
                    acc += v * x[j];
                }
                acc
            })
            .collect()
    }

    /// Iterates over every stored entry as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn map<U, F>(&self, f: F) -> CsrMatrix<U>
    where
        F: Fn(T) -> U,
    {
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Keeps the rows in `rows` and the columns in `cols`, renumbered by
    /// their position in those slices.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix<T> {
        let mut col_pos = vec![usize::MAX; self.ncols];
        for (p, &c) in cols.iter().enumerate() {
            col_pos[c] = p;
        }
        let triplets = rows.iter().enumerate().flat_map(|(pi, &r)| {
            let col_pos = &col_pos;
            self.row(r).filter_map(move |(j, v)| {
                let pj = col_pos[j];
                (pj != usize::MAX).then_some((pi, pj, v))
            })
        });
        CsrMatrix::from_triplets(rows.len(), cols.len(), triplets.collect::<Vec<_>>())
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::default(); self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            out[i][j] = v;
        }
        out
    }
}

impl CsrMatrix<f64> {
    /// `selfᵀ x`.
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, j, v) in self.triplets() {
            out[j] += v * x[i];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is singular: pivot {pivot:.3e} at elimination step {step}")]
pub struct SingularMatrix {
    pub step: usize,
    pub pivot: f64,
}

/// Factorization `P A Q = L U` of a square sparse matrix, with `L` unit
/// lower triangular. Rows are chosen by partial pivoting; columns are
/// visited in order of increasing nonzero count.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    /// pivot position -> original row
    prow: Vec<usize>,
    /// pivot position -> original column
    qcol: Vec<usize>,
    /// strictly-lower part of `L`, by column, as (pivot position, value)
    lower: Vec<Vec<(usize, f64)>>,
    /// strictly-upper part of `U`, by column, as (pivot position, value)
    upper: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix<f64>) -> Result<Self, SingularMatrix> {
        assert_eq!(a.nrows(), a.ncols(), "LU needs a square matrix");
        let n = a.nrows();

        let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in a.triplets() {
            if v != 0.0 {
                columns[j].push((i, v));
            }
        }
        let mut qcol: Vec<usize> = (0..n).collect();
        qcol.sort_by_key(|&j| columns[j].len());

        const UNSET: usize = usize::MAX;
        let mut pinv = vec![UNSET; n];
        let mut prow = vec![0; n];
        // L columns hold original row indices until the end
        let mut lower_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut upper: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);

        let mut work = vec![0.0; n];
        let mut stamp = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();

        for k in 0..n {
            touched.clear();
            for &(i, v) in &columns[qcol[k]] {
                work[i] = v;
                stamp[i] = k;
                touched.push(i);
            }

            let mut ucol = Vec::new();
            for j in 0..k {
                let xr = work[prow[j]];
                if xr == 0.0 {
                    continue;
                }
                ucol.push((j, xr));
                for &(i, l) in &lower_rows[j] {
                    if stamp[i] != k {
                        stamp[i] = k;
                        work[i] = 0.0;
                        touched.push(i);
                    }
                    work[i] -= l * xr;
                }
            }

            let mut pivot_row = UNSET;
            let mut pivot_abs = -1.0;
            for &i in &touched {
                if pinv[i] == UNSET && work[i].abs() > pivot_abs {
                    pivot_abs = work[i].abs();
                    pivot_row = i;
                }
            }
            if pivot_row == UNSET || pivot_abs < PIVOT_TOLERANCE {
                return Err(SingularMatrix {
                    step: k,
                    pivot: pivot_abs.max(0.0),
                });
            }
            let pivot = work[pivot_row];
            pinv[pivot_row] = k;
            prow[k] = pivot_row;

            let lcol: Vec<(usize, f64)> = touched
                .iter()
                .filter(|&&i| pinv[i] == UNSET && work[i] != 0.0)
                .map(|&i| (i, work[i] / pivot))
                .collect();
            for &i in &touched {
                work[i] = 0.0;
            }

            lower_rows.push(lcol);
            upper.push(ucol);
            diag.push(pivot);
        }

        let lower = lower_rows
            .into_iter()
            .map(|col| col.into_iter().map(|(i, l)| (pinv[i], l)).collect())
            .collect();

        Ok(SparseLu {
            n,
            prow,
            qcol,
            lower,
            upper,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.prow.iter().map(|&r| b[r]).collect();
        for k in 0..self.n {
            let yk = y[k];
            if yk != 0.0 {
                for &(p, l) in &self.lower[k] {
                    y[p] -= l * yk;
                }
            }
        }
        for k in (0..self.n).rev() {
            y[k] /= self.diag[k];
            let wk = y[k];
            if wk != 0.0 {
                for &(p, u) in &self.upper[k] {
                    y[p] -= u * wk;
                }
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &c) in self.qcol.iter().enumerate() {
            x[c] = y[k];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut v: Vec<f64> = self.qcol.iter().map(|&c| b[c]).collect();
        for k in 0..self.n {
            let mut acc = v[k];
            for &(p, u) in &self.upper[k] {
                acc -= u * v[p];
            }
            v[k] = acc / self.diag[k];
        }
        for k in (0..self.n).rev() {
            let mut acc = v[k];
            for &(p, l) in &self.lower[k] {
                acc -= l * v[p];
            }
            v[k] = acc;
        }
        let mut x = vec![0.0; self.n];
        for (k, &r) in self.prow.iter().enumerate() {
            x[r] = v[k];
        }
        x
    }
}
