//! Compressed sparse matrices and a left-looking sparse LU with partial
//! pivoting, generic over real and complex scalars.
//!
//! The factorization follows the Gilbert-Peierls scheme: each column of
//! `L` and `U` is obtained from a sparse triangular solve whose nonzero
//! pattern is found by depth-first search. Columns are pre-ordered by a
//! greedy minimum-degree heuristic on the pattern of `A + Aᵀ`, and the
//! diagonal is preferred as pivot whenever it passes a threshold test.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;
use thiserror::Error;

/// Field operations needed by the factorization.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    /// Magnitude used for pivot selection.
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular (no acceptable pivot in column {column})")]
    Singular { column: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

/// Compressed sparse row matrix. Column indices within a row are sorted
/// and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    /// Explicit zeros that result from summation are kept so the pattern
    /// stays a function of the input structure.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &t in &order {
            let (r, c, v) = triplets[t];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *data.last_mut().expect("nonempty") += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_dense(rows: &[Vec<T>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut trip = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols, "ragged dense input");
            for (j, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Entries `(col, value)` of one row in increasing column order.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    /// All stored entries as `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(pos) => self.data[span.start + pos],
            Err(_) => T::zero(),
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols, "mul_vec dimension mismatch");
        (0..self.nrows)
            .map(|i| {
                let mut acc = T::zero();
                for (j, v) in self.row(i) {
                    acc += v * x[j];
                }
                acc
            })
            .collect()
    }

    /// Entry-wise map preserving the sparsity pattern.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> CsrMatrix<U> {
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = self.iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// Extracts the sub-matrix with the given rows and columns, in the order
    /// given.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_pos = vec![usize::MAX; self.ncols];
        for (p, &c) in cols.iter().enumerate() {
            col_pos[c] = p;
        }
        let mut trip = Vec::new();
        for (pi, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                if col_pos[c] != usize::MAX {
                    trip.push((pi, col_pos[c], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &trip)
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (i, j, v) in self.iter() {
            out[i][j] = v;
        }
        out
    }
}

/// Greedy minimum-degree ordering on the symmetric pattern of `A + Aᵀ`.
/// Ties break toward the smallest index so the ordering is deterministic.
fn minimum_degree_order<T: Scalar>(a: &CsrMatrix<T>) -> Vec<usize> {
    let n = a.nrows;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j, _) in a.iter() {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = (0..n)
            .filter(|&v| !eliminated[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("remaining node");
        eliminated[pick] = true;
        order.push(pick);
        let nbrs: Vec<usize> = adj[pick].iter().copied().collect();
        for &u in &nbrs {
            adj[u].remove(&pick);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        adj[pick].clear();
    }
    order
}

/// Sparse LU factors with `P·A·Q = L·U`.
#[derive(Debug, Clone)]
pub struct SparseLu<T> {
    n: usize,
    /// Column `k` of `L` as `(pivot-order row, value)`; unit diagonal first.
    l_cols: Vec<Vec<(usize, T)>>,
    /// Column `k` of `U` as `(pivot-order row, value)`; diagonal last.
    u_cols: Vec<Vec<(usize, T)>>,
    /// Original row -> pivot position.
    pinv: Vec<usize>,
    /// Pivot position -> original column.
    q: Vec<usize>,
}

/// Diagonal is kept as pivot while `|a_kk| >= PIVOT_THRESHOLD * max_i |a_ik|`.
const PIVOT_THRESHOLD: f64 = 0.1;

impl<T: Scalar> SparseLu<T> {
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self, LinalgError> {
        if a.nrows != a.ncols {
            return Err(LinalgError::NotSquare {
                rows: a.nrows,
                cols: a.ncols,
            });
        }
        let n = a.nrows;
        let q = minimum_degree_order(a);
        let csc = a.transpose(); // rows of the transpose are columns of `a`

        const UNSET: usize = usize::MAX;
        let mut pinv = vec![UNSET; n];
        let mut l_cols: Vec<Vec<(usize, T)>> = Vec::with_capacity(n);
        let mut u_cols: Vec<Vec<(usize, T)>> = Vec::with_capacity(n);
        let mut x = vec![T::zero(); n];
        let mut marked = vec![false; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::with_capacity(n);

        for (k, &col) in q.iter().enumerate() {
            // Reach of column `col` in the graph of L (topological order).
            pattern.clear();
            for (i, _) in csc.row(col) {
                if marked[i] {
                    continue;
                }
                stack.push((i, 0));
                marked[i] = true;
                while let Some(top) = stack.len().checked_sub(1) {
                    let (node, mut next) = stack[top];
                    let lcol = pinv[node];
                    let children: &[(usize, T)] = if lcol == UNSET {
                        &[]
                    } else {
                        &l_cols[lcol][1..]
                    };
                    let mut found = None;
                    while next < children.len() {
                        let child = children[next].0;
                        next += 1;
                        if !marked[child] {
                            found = Some(child);
                            break;
                        }
                    }
                    stack[top].1 = next;
                    match found {
                        Some(child) => {
                            marked[child] = true;
                            stack.push((child, 0));
                        }
                        None => {
                            stack.pop();
                            pattern.push(node);
                        }
                    }
                }
            }
            pattern.reverse();
            for &i in &pattern {
                marked[i] = false;
                x[i] = T::zero();
            }
            for (i, v) in csc.row(col) {
                x[i] = v;
            }
            // Sparse forward solve with the columns of L computed so far.
            for &j in &pattern {
                let lcol = pinv[j];
                if lcol == UNSET {
                    continue;
                }
                let xj = x[j];
                for &(i, lv) in &l_cols[lcol][1..] {
                    x[i] -= lv * xj;
                }
            }
            // Split into U entries and pivot candidates.
            let mut ucol = Vec::new();
            let mut best = -1.0f64;
            let mut ipiv = UNSET;
            for &i in &pattern {
                if pinv[i] == UNSET {
                    let t = x[i].modulus();
                    if t > best {
                        best = t;
                        ipiv = i;
                    }
                } else {
                    ucol.push((pinv[i], x[i]));
                }
            }
            if ipiv == UNSET || best <= 0.0 || !best.is_finite() {
                return Err(LinalgError::Singular { column: k });
            }
            if pinv[col] == UNSET && x[col].modulus() >= PIVOT_THRESHOLD * best {
                ipiv = col;
            }
            let pivot = x[ipiv];
            ucol.push((k, pivot));
            pinv[ipiv] = k;
            let mut lcol = vec![(ipiv, T::one())];
            for &i in &pattern {
                if pinv[i] == UNSET {
                    lcol.push((i, x[i] / pivot));
                }
                x[i] = T::zero();
            }
            l_cols.push(lcol);
            u_cols.push(ucol);
        }
        for col in &mut l_cols {
            for entry in col.iter_mut() {
                entry.0 = pinv[entry.0];
            }
        }
        Ok(Self {
            n,
            l_cols,
            u_cols,
            pinv,
            q,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries in `L` and `U` combined.
    pub fn factor_nnz(&self) -> usize {
        self.l_cols.iter().map(Vec::len).sum::<usize>()
            + self.u_cols.iter().map(Vec::len).sum::<usize>()
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>, LinalgError> {
        let mut work = vec![T::zero(); self.n];
        let mut out = vec![T::zero(); self.n];
        self.solve_into(b, &mut work, &mut out)?;
        Ok(out)
    }

    /// Allocation-free solve using caller-provided scratch space.
    pub fn solve_into(&self, b: &[T], work: &mut [T], out: &mut [T]) -> Result<(), LinalgError> {
        if b.len() != self.n || work.len() != self.n || out.len() != self.n {
            return Err(LinalgError::Dimension {
                expected: self.n,
                actual: b.len(),
            });
        }
        for (i, &v) in b.iter().enumerate() {
            work[self.pinv[i]] = v;
        }
        for k in 0..self.n {
            let zk = work[k];
            for &(i, lv) in &self.l_cols[k][1..] {
                work[i] -= lv * zk;
            }
        }
        for k in (0..self.n).rev() {
            let col = &self.u_cols[k];
            let (_, diag) = col[col.len() - 1];
            work[k] = work[k] / diag;
            let wk = work[k];
            for &(i, uv) in &col[..col.len() - 1] {
                work[i] -= uv * wk;
            }
        }
        for k in 0..self.n {
            out[self.q[k]] = work[k];
        }
        Ok(())
    }
}

/// Dense LU with partial pivoting; `O(n³)` factorization.
#[derive(Debug, Clone)]
pub struct DenseLu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> DenseLu<T> {
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self, LinalgError> {
        if a.nrows != a.ncols {
            return Err(LinalgError::NotSquare {
                rows: a.nrows,
                cols: a.ncols,
            });
        }
        let n = a.nrows;
        let mut lu = vec![T::zero(); n * n];
        for (i, j, v) in a.iter() {
            lu[i * n + j] = v;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|i| (i, lu[i * n + k].modulus()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best <= 0.0 || !best.is_finite() {
                return Err(LinalgError::Singular { column: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] -= f * u;
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>, LinalgError> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::Dimension {
                expected: n,
                actual: b.len(),
            });
        }
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        Ok(x)
    }
}
