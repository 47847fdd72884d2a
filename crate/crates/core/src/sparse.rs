//! Compressed sparse row matrices and a banded direct solver.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Coordinate-format accumulator. Duplicates are summed in insertion order.
#[derive(Clone, Debug)]
pub struct Triplets {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Triplets { n_rows, n_cols, entries: Vec::new() }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, cap: usize) -> Self {
        Triplets { n_rows, n_cols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.n_rows && c < self.n_cols);
        self.entries.push((r, c, v));
    }

    pub fn extend_scaled(&mut self, m: &Csr, s: f64) {
        for r in 0..m.n_rows {
            for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                self.entries.push((r, m.col_idx[k], s * m.vals[k]));
            }
        }
    }

    pub fn to_csr(mut self) -> Csr {
        // stable sort keeps summation order fixed for equal (r, c)
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.n_rows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { n_rows: self.n_rows, n_cols: self.n_cols, row_ptr, col_idx, vals }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Csr {
        Triplets::new(n_rows, n_cols).to_csr()
    }

    pub fn identity(n: usize) -> Csr {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        t.to_csr()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.vals[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn scaled(&self, s: f64) -> Csr {
        let mut m = self.clone();
        m.vals.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Σ s_i A_i for matrices of equal shape.
    pub fn linear_combination(terms: &[(f64, &Csr)]) -> Csr {
        let (nr, nc) = (terms[0].1.n_rows, terms[0].1.n_cols);
        let cap = terms.iter().map(|(_, m)| m.nnz()).sum();
        let mut t = Triplets::with_capacity(nr, nc, cap);
        for (s, m) in terms {
            assert_eq!((m.n_rows, m.n_cols), (nr, nc));
            t.extend_scaled(m, *s);
        }
        t.to_csr()
    }

    pub fn transpose(&self) -> Csr {
        let mut t = Triplets::with_capacity(self.n_cols, self.n_rows, self.nnz());
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                t.push(self.col_idx[k], r, self.vals[k]);
            }
        }
        t.to_csr()
    }

    /// max |A - Aᵀ| / max |A|, zero for the zero matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut d: f64 = 0.0;
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                d = d.max((self.vals[k] - self.get(c, r)).abs());
            }
        }
        d / scale
    }

    /// Rows and columns listed in `keep` (ascending), renumbered consecutively.
    pub fn restrict(&self, keep: &[usize]) -> Csr {
        let mut map = vec![usize::MAX; self.n_cols.max(self.n_rows)];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut t = Triplets::with_capacity(keep.len(), keep.len(), self.nnz());
        for (new_r, &r) in keep.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = map[self.col_idx[k]];
                if c != usize::MAX {
                    t.push(new_r, c, self.vals[k]);
                }
            }
        }
        t.to_csr()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.col_idx[k])] += self.vals[k];
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Reverse Cuthill–McKee ordering of the symmetrized pattern. Returns perm[new] = old.
pub fn rcm_ordering(a: &Csr) -> Vec<usize> {
    let n = a.n_rows;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for k in a.row_ptr[r]..a.row_ptr[r + 1] {
            let c = a.col_idx[k];
            if c != r {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    let deg: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&i| (deg[i], i));
    for s in starts {
        if visited[s] {
            continue;
        }
        visited[s] = true;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (deg[w], w));
            for w in nb {
                visited[w] = true;
                q.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

enum Factor {
    Banded {
        perm: Vec<usize>,
        bw: usize,
        lu: Vec<f64>,
    },
    Dense(nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Direct solver: banded LU on the RCM-permuted matrix, dense partial-pivot LU as fallback.
pub struct LuSolver {
    n: usize,
    factor: Factor,
}

const PIVOT_RTOL: f64 = 1e-13;

impl LuSolver {
    pub fn new(a: &Csr) -> Result<LuSolver> {
        if a.n_rows != a.n_cols {
            return Err(Error::LinearSolve("matrix not square".into()));
        }
        let n = a.n_rows;
        if n == 0 {
            return Ok(LuSolver { n, factor: Factor::Banded { perm: vec![], bw: 0, lu: vec![] } });
        }
        let perm = rcm_ordering(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut bw = 0;
        for r in 0..n {
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                bw = bw.max(inv[r].abs_diff(inv[a.col_idx[k]]));
            }
        }
        // dense is cheaper once the band covers most of the matrix
        if 2 * bw + 1 >= n {
            return Self::dense(a);
        }
        let w = 2 * bw + 1;
        let mut lu = vec![0.0; n * w];
        for r in 0..n {
            let i = inv[r];
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                let j = inv[a.col_idx[k]];
                lu[i * w + j + bw - i] += a.vals[k];
            }
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let piv = lu[k * w + bw];
            if !(piv.abs() > PIVOT_RTOL * scale) {
                return Self::dense(a);
            }
            let hi = (k + bw + 1).min(n);
            for i in k + 1..hi {
                let l = lu[i * w + k + bw - i] / piv;
                if l == 0.0 {
                    continue;
                }
                lu[i * w + k + bw - i] = l;
                for j in k + 1..hi {
                    lu[i * w + j + bw - i] -= l * lu[k * w + j + bw - k];
                }
            }
        }
        Ok(LuSolver { n, factor: Factor::Banded { perm, bw, lu } })
    }

    fn dense(a: &Csr) -> Result<LuSolver> {
        Self::from_dense(a.to_dense())
    }

    pub fn from_dense(d: DMatrix<f64>) -> Result<LuSolver> {
        let n = d.nrows();
        let scale = d.amax().max(f64::MIN_POSITIVE);
        let lu = d.lu();
        let u = lu.u();
        let min_piv = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if n > 0 && !(min_piv > 1e-15 * scale) {
            return Err(Error::LinearSolve(format!("singular matrix (pivot {min_piv:.3e})")));
        }
        Ok(LuSolver { n, factor: Factor::Dense(lu) })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        match &self.factor {
            Factor::Dense(lu) => {
                let x = lu.solve(&DVector::from_column_slice(b)).expect("factor checked nonsingular");
                x.as_slice().to_vec()
            }
            Factor::Banded { perm, bw, lu } => {
                let (n, bw) = (self.n, *bw);
                let w = 2 * bw + 1;
                let mut y: Vec<f64> = perm.iter().map(|&o| b[o]).collect();
                for i in 0..n {
                    let lo = i.saturating_sub(bw);
                    let mut s = y[i];
                    for j in lo..i {
                        s -= lu[i * w + j + bw - i] * y[j];
                    }
                    y[i] = s;
                }
                for i in (0..n).rev() {
                    let hi = (i + bw + 1).min(n);
                    let mut s = y[i];
                    for j in i + 1..hi {
                        s -= lu[i * w + j + bw - i] * y[j];
                    }
                    y[i] = s / lu[i * w + bw];
                }
                let mut x = vec![0.0; n];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = y[new];
                }
                x
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
