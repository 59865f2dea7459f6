//! Sparse matrices and a direct LDLᵀ solver for symmetric quasi-definite
//! systems.
//!
//! Assembled bilinear forms are stored in compressed sparse row format with
//! full symmetric storage (both triangles kept). The factorization is the
//! up-looking sparse LDLᵀ with an elimination tree, applied after a reverse
//! Cuthill-McKee reordering. Symmetric quasi-definite matrices (positive
//! definite leading block, negative definite trailing block) admit this
//! factorization without pivoting under any symmetric permutation, so the
//! solver never pivots; a vanishing pivot is reported as breakdown instead.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Accumulates `(row, col, value)` triplets; duplicates are summed when the
/// matrix is compressed.
pub struct CooBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl CooBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        CooBuilder {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row as u32, col as u32, value));
        }
    }

    /// Adds the symmetric pair `(i, j)` and `(j, i)`; diagonal entries once.
    #[inline]
    pub fn add_sym(&mut self, i: usize, j: usize, value: f64) {
        self.add(i, j, value);
        if i != j {
            self.add(j, i, value);
        }
    }

    pub fn finish_rect(self) -> SparseRect {
        let (nrows, ncols, row_ptr, col_idx, values) = self.compress();
        SparseRect {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn finish_sym(self) -> SparseSymMatrix {
        assert_eq!(self.nrows, self.ncols, "symmetric matrix must be square");
        let (n, _, row_ptr, col_idx, values) = self.compress();
        SparseSymMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    // Single-pass compression: sort, then merge duplicates row by row.
    fn compress(mut self) -> (usize, usize, Vec<usize>, Vec<usize>, Vec<f64>) {
        self.entries
            .sort_unstable_by_key(|&(r, c, _)| ((r as u64) << 32) | c as u64);
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut current_row = 0usize;
        for &(r, c, v) in &self.entries {
            let r = r as usize;
            let c = c as usize;
            while current_row < r {
                current_row += 1;
                row_ptr[current_row] = col_idx.len();
            }
            if col_idx.len() > row_ptr[current_row] && *col_idx.last().unwrap() == c {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
            }
        }
        while current_row < self.nrows {
            current_row += 1;
            row_ptr[current_row] = col_idx.len();
        }
        (self.nrows, self.ncols, row_ptr, col_idx, values)
    }
}

/// General rectangular sparse matrix in CSR form.
#[derive(Clone, Debug)]
pub struct SparseRect {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRect {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for (c, v) in self.row(i) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                y[c] += v * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }
}

/// Square sparse matrix with a symmetric-storage contract: both triangles are
/// stored and assembled entries satisfy `|A - Aᵀ|_max <= 1e-12 |A|_max`.
#[derive(Clone, Debug)]
pub struct SparseSymMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymMatrix {
    pub fn zeros(n: usize) -> Self {
        CooBuilder::new(n, n).finish_sym()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(p) => self.values[lo + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for (c, v) in self.row(i) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
        y
    }

    /// Bilinear form `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        let mut acc = 0.0;
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                acc += x[i] * v * y[c];
            }
        }
        acc
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute asymmetry `max |A_ij - A_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut defect: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                defect = defect.max((v - self.get(j, i)).abs());
            }
        }
        defect
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    /// Forms `sum_k c_k M_k` over matrices of equal dimension.
    pub fn linear_combination(terms: &[(f64, &SparseSymMatrix)]) -> Self {
        assert!(!terms.is_empty());
        let n = terms[0].1.n;
        let mut b = CooBuilder::new(n, n);
        for &(c, m) in terms {
            assert_eq!(m.n, n);
            for i in 0..n {
                for (j, v) in m.row(i) {
                    b.add(i, j, c * v);
                }
            }
        }
        b.finish_sym()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// Dense submatrix over the given (sorted or unsorted) index set.
    pub fn dense_submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    m[(k, pos[j])] = v;
                }
            }
        }
        m
    }

    /// Writes the matrix in coordinate text format, one `row col value` per
    /// line, for offline inspection.
    pub fn write_coordinate(&self, w: &mut dyn std::io::Write) -> Result<()> {
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.17e}", i, j, v)?;
            }
        }
        Ok(())
    }
}

/// Assembles a symmetric 2x2 block saddle matrix
/// `[[A, B], [Bᵀ, -C]]` with `A` of dimension `na` and `C` of dimension `nc`.
pub fn block_saddle(a: &SparseSymMatrix, b: &SparseRect, c: &SparseSymMatrix) -> SparseSymMatrix {
    let na = a.dim();
    let nc = c.dim();
    assert_eq!(b.nrows(), na);
    assert_eq!(b.ncols(), nc);
    let n = na + nc;
    let mut out = CooBuilder::new(n, n);
    for i in 0..na {
        for (j, v) in a.row(i) {
            out.add(i, j, v);
        }
        for (j, v) in b.row(i) {
            out.add(i, na + j, v);
            out.add(na + j, i, v);
        }
    }
    for i in 0..nc {
        for (j, v) in c.row(i) {
            out.add(na + i, na + j, -v);
        }
    }
    out.finish_sym()
}

/// Reverse Cuthill-McKee ordering of the adjacency graph of `a`.
/// Returns `perm` with `perm[k]` = original index of the k-th node.
fn reverse_cuthill_mckee(a: &SparseSymMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut component = Vec::new();
    while order.len() < n {
        // pseudo-peripheral start: min-degree unvisited node, then two BFS hops
        let mut start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .unwrap();
        for _ in 0..2 {
            let far = bfs_farthest(a, start, &visited);
            if far == start {
                break;
            }
            start = far;
        }
        component.clear();
        component.push(start);
        visited[start] = true;
        let mut head = 0;
        while head < component.len() {
            let u = component[head];
            head += 1;
            let mut nbrs: Vec<usize> = a
                .row(u)
                .map(|(j, _)| j)
                .filter(|&j| j != u && !visited[j])
                .collect();
            nbrs.sort_unstable_by_key(|&j| (degree[j], j));
            for j in nbrs {
                if !visited[j] {
                    visited[j] = true;
                    component.push(j);
                }
            }
        }
        order.extend_from_slice(&component);
    }
    order.reverse();
    order
}

fn bfs_farthest(a: &SparseSymMatrix, start: usize, excluded: &[bool]) -> usize {
    let n = a.dim();
    let mut seen = vec![false; n];
    let mut queue = vec![start];
    seen[start] = true;
    let mut last = start;
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        last = u;
        for (j, _) in a.row(u) {
            if j != u && !seen[j] && !excluded[j] {
                seen[j] = true;
                queue.push(j);
            }
        }
    }
    last
}

/// Sparse LDLᵀ factorization of a symmetric (quasi-definite) matrix.
///
/// `L` is unit lower triangular, stored by columns; `d` is the diagonal of
/// `D`. The input is reordered by reverse Cuthill-McKee before factorization.
pub struct LdltFactor {
    n: usize,
    perm: Vec<usize>,
    /// column pointers of L (strictly lower part)
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdltFactor {
    pub fn factor(a: &SparseSymMatrix) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }

        // Upper triangle of the permuted matrix in column-compressed form.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i_orig in 0..n {
            let i = iperm[i_orig];
            for (j_orig, v) in a.row(i_orig) {
                let j = iperm[j_orig];
                if i <= j {
                    cols[j].push((i, v));
                }
            }
        }
        for col in &mut cols {
            col.sort_unstable_by_key(|&(i, _)| i);
        }

        // Symbolic pass: elimination tree and column counts of L.
        let mut parent = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for &(mut i, _) in &cols[k] {
                while i < k && flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz_l = lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0f64; nnz_l];
        let mut d = vec![0.0f64; n];

        // Numeric pass (up-looking).
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut fill = vec![0usize; n]; // entries currently in column i of L
        for f in flag.iter_mut() {
            *f = usize::MAX;
        }
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for &(i0, v) in &cols[k] {
                y[i0] += v;
                let mut len = 0;
                let mut i = i0;
                while i < k && flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for s in top..n {
                let i = pattern[s];
                let yi = y[i];
                y[i] = 0.0;
                let p2 = lp[i] + fill[i];
                for p in lp[i]..p2 {
                    y[li[p]] -= lx[p] * yi;
                }
                let lki = yi / d[i];
                d[k] -= lki * yi;
                li[p2] = k;
                lx[p2] = lki;
                fill[i] += 1;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(Error::Solver(format!(
                    "LDLT breakdown: zero or non-finite pivot at column {k}"
                )));
            }
        }

        Ok(LdltFactor {
            n,
            perm,
            lp,
            li,
            lx,
            d,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[k] = b[self.perm[k]];
        }
        for k in 0..n {
            let xk = x[k];
            for p in self.lp[k]..self.lp[k + 1] {
                x[self.li[p]] -= self.lx[p] * xk;
            }
        }
        for k in 0..n {
            x[k] /= self.d[k];
        }
        for k in (0..n).rev() {
            let mut acc = x[k];
            for p in self.lp[k]..self.lp[k + 1] {
                acc -= self.lx[p] * x[self.li[p]];
            }
            x[k] = acc;
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// Solves with iterative refinement until the relative residual drops
    /// below `tol`. Errors if the target is not met after `max_steps`.
    pub fn solve_refined(
        &self,
        a: &SparseSymMatrix,
        b: &[f64],
        tol: f64,
        max_steps: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let norm_b = norm2(b);
        if norm_b == 0.0 {
            return Ok((vec![0.0; b.len()], 0.0));
        }
        let mut x = self.solve(b);
        let mut rel = f64::INFINITY;
        for _ in 0..=max_steps {
            let ax = a.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rel = norm2(&r) / norm_b;
            if rel <= tol {
                return Ok((x, rel));
            }
            let dx = self.solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        Err(Error::Solver(format!(
            "iterative refinement stalled at relative residual {rel:.3e} (target {tol:.1e})"
        )))
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
