//! Sparse and dense kernels: CSR storage, Jacobi-preconditioned CG, direct
//! factorizations and the symmetric-definite generalized eigensolver.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::cholesky::llt::{factor as llt_factor, solve as llt_solve};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Conj, Mat, MatMut, Par, Side};

use crate::error::{CemError, Result};

/// Compressed sparse row matrix with sorted, duplicate-free columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMat {
    /// Builds from (row, col, value) triplets, summing duplicates in input order.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = next[r];
            cols[k] = c;
            vals[k] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut perm: Vec<usize> = Vec::new();
        for r in 0..nrows {
            let (s, e) = (counts[r], counts[r + 1]);
            perm.clear();
            perm.extend(s..e);
            // Stable sort keeps the summation order of duplicates fixed.
            perm.sort_by_key(|&k| cols[k]);
            let mut last: Option<usize> = None;
            for &k in &perm {
                if last == Some(cols[k]) {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                    last = Some(cols[k]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMat { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        SparseMat {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let mut m = SparseMat::identity(d.len());
        m.values.copy_from_slice(d);
        m
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> SparseMat {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                trip.push((*c, i, *v));
            }
        }
        SparseMat::from_triplets(self.ncols, self.nrows, &trip)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(*c, i)).abs());
            }
        }
        worst / scale
    }

    /// Principal submatrix on `idx` (which need not be sorted).
    pub fn principal_submatrix(&self, idx: &[usize]) -> SparseMat {
        let mut local = vec![usize::MAX; self.ncols];
        for (k, &g) in idx.iter().enumerate() {
            local[g] = k;
        }
        let mut trip = Vec::new();
        for (k, &g) in idx.iter().enumerate() {
            let (cols, vals) = self.row(g);
            for (c, v) in cols.iter().zip(vals) {
                if local[*c] != usize::MAX {
                    trip.push((k, local[*c], *v));
                }
            }
        }
        SparseMat::from_triplets(idx.len(), idx.len(), &trip)
    }

    pub fn to_dense(&self) -> DenseMat {
        let mut d = DenseMat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                d[(i, *c)] += v;
            }
        }
        d
    }

    /// Same storage read as compressed columns, i.e. the transpose. For a
    /// symmetric matrix this is the matrix itself.
    fn to_faer_transposed(&self) -> SparseColMat<usize, f64> {
        let sym = SymbolicSparseColMat::new_checked(
            self.ncols,
            self.nrows,
            self.row_ptr.clone(),
            None,
            self.col_idx.clone(),
        );
        SparseColMat::new(sym, self.values.clone())
    }

    /// `self + c * other` for matrices of equal shape.
    pub fn add_scaled(&self, other: &SparseMat, c: f64) -> SparseMat {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trip = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            trip.extend(cols.iter().zip(vals).map(|(c, v)| (i, *c, *v)));
            let (cols, vals) = other.row(i);
            trip.extend(cols.iter().zip(vals).map(|(cc, v)| (i, *cc, c * v)));
        }
        SparseMat::from_triplets(self.nrows, self.ncols, &trip)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMat {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        DenseMat { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(nrows: usize, ncols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DenseMat::zeros(nrows, ncols);
        for i in 0..nrows {
            for j in 0..ncols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self[(i, j)]).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        self.data.chunks_exact(self.ncols.max(1)).take(self.nrows).map(|row| dot(row, x)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.nrows, self.ncols, |i, j| self[(i, j)])
    }

    pub fn from_faer(m: faer::MatRef<'_, f64>) -> Self {
        DenseMat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for DenseMat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.ncols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.ncols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients; `‖Ax - b‖₂ ≤ tol ‖b‖₂` on return.
pub fn solve_spd(a: &SparseMat, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.nrows;
    assert_eq!(b.len(), n);
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rnorm = bnorm;
    for _ in 0..max_iter {
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(CemError::Definiteness(format!("conjugate gradients met p^T A p = {pap:e}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = norm2(&r);
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Recompute the true residual before giving up.
    let ax = a.mul_vec(&x);
    let res = norm2(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>());
    if res <= tol * bnorm {
        return Ok(x);
    }
    Err(CemError::NoConvergence { iterations: max_iter, residual: res / bnorm })
}

fn residual(a: &SparseMat, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(&ax).map(|(b, a)| b - a).collect()
}

/// Sparse Cholesky factor of a symmetric positive definite matrix (AMD ordering).
pub struct SpdFactor {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl SpdFactor {
    pub fn new(a: &SparseMat) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(CemError::Definiteness(format!("matrix is {}x{}, not square", a.nrows, a.ncols)));
        }
        let m = a.to_faer_transposed();
        let llt = m
            .sp_cholesky(Side::Lower)
            .map_err(|e| CemError::Definiteness(format!("sparse Cholesky failed: {e:?}")))?;
        Ok(SpdFactor { n: a.nrows, llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let col = MatMut::from_column_major_slice_mut(x, self.n, 1);
        self.llt.solve_in_place(col);
    }

    /// Solves for several right-hand sides stored column-major in `x`.
    pub fn solve_many_in_place(&self, x: &mut [f64], ncols: usize) {
        assert_eq!(x.len(), self.n * ncols);
        let cols = MatMut::from_column_major_slice_mut(x, self.n, ncols);
        self.llt.solve_in_place(cols);
    }
}

/// Direct SPD solve: sparse Cholesky followed by residual-driven refinement.
pub fn solve_spd_direct(a: &SparseMat, b: &[f64]) -> Result<Vec<f64>> {
    let f = SpdFactor::new(a)?;
    let mut x = f.solve(b);
    refine(a, b, &mut x, |r| f.solve(r), 3);
    Ok(x)
}

fn refine(a: &SparseMat, b: &[f64], x: &mut [f64], solve: impl Fn(&[f64]) -> Vec<f64>, steps: usize) -> f64 {
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    let mut r = residual(a, x, b);
    let mut rel = norm2(&r) / bnorm;
    for _ in 0..steps {
        if rel <= 1e-15 || !rel.is_finite() {
            break;
        }
        let d = solve(&r);
        let trial: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + d).collect();
        let rt = residual(a, &trial, b);
        let rel_t = norm2(&rt) / bnorm;
        if !(rel_t < rel) {
            break;
        }
        x.copy_from_slice(&trial);
        r = rt;
        rel = rel_t;
    }
    rel
}

/// LDLᵀ factor of a symmetric quasi-definite saddle matrix
/// `[[A, B], [Bᵀ, -C]]` with `A` positive definite on the first `n_pos`
/// unknowns. A static shift `-delta` on the trailing block makes the matrix
/// quasi-definite even when `C = 0`; solves refine against the unshifted matrix.
pub struct SaddleFactor {
    n: usize,
    matrix: SparseMat,
    norm_inf: f64,
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
}

impl SaddleFactor {
    pub fn new(k: &SparseMat, n_pos: usize, delta: f64) -> Result<Self> {
        let n = k.nrows;
        assert!(n_pos <= n);
        let shifted = if delta > 0.0 {
            let d: Vec<f64> = (0..n).map(|i| if i >= n_pos { -delta } else { 0.0 }).collect();
            k.add_scaled(&SparseMat::from_diagonal(&d), 1.0)
        } else {
            k.clone()
        };
        let m = shifted.to_faer_transposed();
        let symbolic = factorize_symbolic_cholesky(
            m.symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams::default(),
        )
        .map_err(|e| CemError::Rank(format!("symbolic analysis failed: {e:?}")))?;
        let mut values = vec![0.0; symbolic.len_val()];
        let signs: Vec<i8> = (0..n).map(|i| if i < n_pos { 1 } else { -1 }).collect();
        let reg = LdltRegularization {
            dynamic_regularization_signs: Some(&signs),
            dynamic_regularization_delta: delta.max(f64::EPSILON),
            dynamic_regularization_epsilon: 0.0,
        };
        let par = Par::Seq;
        let mut mem = MemBuffer::new(symbolic.factorize_numeric_ldlt_scratch::<f64>(par, Default::default()));
        symbolic
            .factorize_numeric_ldlt(
                &mut values,
                m.as_ref(),
                Side::Lower,
                reg,
                par,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| CemError::Rank(format!("saddle factorization broke down: {e:?}")))?;
        let norm_inf = (0..n).map(|i| k.row(i).1.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        Ok(SaddleFactor { n, matrix: k.clone(), norm_inf, symbolic, values })
    }

    fn raw_solve(&self, b: &[f64], ncols: usize) -> Vec<f64> {
        let mut x = b.to_vec();
        let par = Par::Seq;
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(ncols, par));
        let ldlt = LdltRef::new(&self.symbolic, &self.values);
        ldlt.solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(&mut x, self.n, ncols),
            par,
            MemStack::new(&mut mem),
        );
        x
    }

    /// Solves `K x = b` to normwise backward error
    /// `‖r‖∞ / (‖K‖∞ ‖x‖∞ + ‖b‖∞) ≤ tol`, or reports a rank error.
    pub fn solve(&self, b: &[f64], tol: f64, max_refine: usize) -> Result<Vec<f64>> {
        let mut x = self.raw_solve(b, 1);
        refine(&self.matrix, b, &mut x, |r| self.raw_solve(r, 1), max_refine);
        let r = residual(&self.matrix, &x, b);
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let eta = inf(&r) / (self.norm_inf * inf(&x) + inf(b)).max(f64::MIN_POSITIVE);
        if eta <= tol && x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(CemError::Rank(format!(
                "saddle system backward error {eta:e} after refinement exceeds {tol:e}; constraints are (nearly) dependent"
            )))
        }
    }
}

/// Dimension below which indefinite systems are solved densely.
pub const DENSE_INDEFINITE_LIMIT: usize = 2000;

/// Solves a nonsingular symmetric (possibly indefinite) system with
/// `‖Kx - b‖₂ ≤ 1e-10 ‖b‖₂`. Small systems use dense Bunch–Kaufman, larger
/// ones sparse LU with partial pivoting; both are refined.
pub fn solve_symmetric_indefinite(k: &SparseMat, b: &[f64]) -> Result<Vec<f64>> {
    let n = k.nrows;
    assert_eq!(b.len(), n);
    if norm2(b) == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let (x, rel) = if n < DENSE_INDEFINITE_LIMIT {
        let dense = k.to_dense().to_faer();
        let f = dense.lblt(Side::Lower);
        let solve = |r: &[f64]| -> Vec<f64> {
            let mut y = r.to_vec();
            f.solve_in_place(MatMut::from_column_major_slice_mut(&mut y, n, 1));
            y
        };
        let mut x = solve(b);
        let rel = refine(k, b, &mut x, solve, 5);
        (x, rel)
    } else {
        let m = k.to_faer_transposed();
        let lu = m.sp_lu().map_err(|e| CemError::Rank(format!("sparse LU failed: {e:?}")))?;
        let solve = |r: &[f64]| -> Vec<f64> {
            let mut y = r.to_vec();
            lu.solve_in_place(MatMut::from_column_major_slice_mut(&mut y, n, 1));
            y
        };
        let mut x = solve(b);
        let rel = refine(k, b, &mut x, solve, 5);
        (x, rel)
    };
    if rel <= 1e-10 {
        Ok(x)
    } else {
        Err(CemError::Rank(format!("indefinite solve residual {rel:e}; matrix is singular or nearly so")))
    }
}

/// In-place dense Cholesky factor `G = L Lᵀ` of a symmetric positive
/// definite matrix, kept together with the relative pivots `L_pp² / G_pp`.
pub struct DenseCholesky {
    l: Mat<f64>,
    pivots: Vec<f64>,
}

impl DenseCholesky {
    /// Factors `g` (only its lower triangle is read). On a non-positive pivot
    /// returns the failing index.
    pub fn new(mut g: Mat<f64>) -> std::result::Result<Self, usize> {
        let n = g.nrows();
        assert_eq!(n, g.ncols());
        let diag: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
        let par = Par::Seq;
        let mut mem = MemBuffer::new(llt_factor::cholesky_in_place_scratch::<f64>(n, par, Default::default()));
        let reg = llt_factor::LltRegularization {
            dynamic_regularization_delta: 0.0,
            dynamic_regularization_epsilon: 0.0,
        };
        llt_factor::cholesky_in_place(g.as_mut(), reg, par, MemStack::new(&mut mem), Default::default())
            .map_err(|llt_factor::LltError::NonPositivePivot { index }| index)?;
        let pivots = (0..n).map(|i| g[(i, i)] * g[(i, i)] / diag[i]).collect();
        Ok(DenseCholesky { l: g, pivots })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L_pp² / G_pp`: squared sine of the angle between column `p` and the
    /// span of the preceding columns, in the Gram inner product.
    pub fn relative_pivots(&self) -> &[f64] {
        &self.pivots
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_many_in_place(&mut x, 1);
        x
    }

    /// Solves in place for `ncols` right-hand sides stored column-major.
    pub fn solve_many_in_place(&self, x: &mut [f64], ncols: usize) {
        let n = self.dim();
        let par = Par::Seq;
        let mut mem = MemBuffer::new(llt_solve::solve_in_place_scratch::<f64>(n, ncols, par));
        llt_solve::solve_in_place_with_conj(
            self.l.as_ref(),
            Conj::No,
            MatMut::from_column_major_slice_mut(x, n, ncols),
            par,
            MemStack::new(&mut mem),
        );
    }
}

/// Eigenpairs of `A v = λ S v`, ascending, with S-orthonormal vectors stored
/// as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct GeneralizedEig {
    pub values: Vec<f64>,
    pub vectors: DenseMat,
}

/// Reduces to a standard problem through the Cholesky factor of `S`.
pub fn dense_generalized_eig(a: &DenseMat, s: &DenseMat) -> Result<GeneralizedEig> {
    let n = a.nrows;
    if a.ncols != n || s.nrows != n || s.ncols != n {
        return Err(CemError::Config(format!(
            "eigenproblem shapes {}x{} and {}x{} differ",
            a.nrows, a.ncols, s.nrows, s.ncols
        )));
    }
    if n == 0 {
        return Ok(GeneralizedEig { values: vec![], vectors: DenseMat::zeros(0, 0) });
    }
    let sf = s.to_faer();
    let llt = sf
        .llt(Side::Lower)
        .map_err(|e| CemError::Definiteness(format!("mass matrix is not positive definite: {e:?}")))?;
    let l = llt.L();
    // C = L⁻¹ A L⁻ᵀ
    let mut c = a.to_faer();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, c.as_mut(), Par::Seq);
    let mut ct = c.transpose().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, ct.as_mut(), Par::Seq);
    let c = Mat::from_fn(n, n, |i, j| 0.5 * (ct[(i, j)] + ct[(j, i)]));
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| CemError::NoConvergence { iterations: 0, residual: f64::NAN })?;
    let values: Vec<f64> = (0..n).map(|i| evd.S()[i]).collect();
    let mut y = evd.U().to_owned();
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), y.as_mut(), Par::Seq);
    // Renormalize in S to remove the rounding left by the back-substitution.
    let sy = &sf * &y;
    for j in 0..n {
        let nrm = (0..n).map(|i| y[(i, j)] * sy[(i, j)]).sum::<f64>().sqrt();
        for i in 0..n {
            y[(i, j)] /= nrm;
        }
    }
    let vectors = DenseMat::from_faer(y.as_ref());
    Ok(GeneralizedEig { values, vectors })
}

/// Eigenpairs of `A v = λ S v` for positive semidefinite `A`, computed from
/// the inverted pencil `S v = ν (A + σ S) v` with `ν = 1 / (λ + σ)`, after a
/// diagonal scaling that makes `S` well conditioned. The small eigenvalues
/// keep absolute accuracy near machine precision whatever the spread of the
/// large ones, which is what high-contrast coefficients need.
pub fn dense_generalized_eig_shifted(a: &DenseMat, s: &DenseMat, sigma: f64) -> Result<GeneralizedEig> {
    let n = a.nrows;
    if a.ncols != n || s.nrows != n || s.ncols != n {
        return Err(CemError::Config(format!(
            "eigenproblem shapes {}x{} and {}x{} differ",
            a.nrows, a.ncols, s.nrows, s.ncols
        )));
    }
    if !(sigma > 0.0) {
        return Err(CemError::Config(format!("spectral shift must be positive, got {sigma}")));
    }
    if n == 0 {
        return Ok(GeneralizedEig { values: vec![], vectors: DenseMat::zeros(0, 0) });
    }
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let v = s[(i, i)];
        if !(v > 0.0) {
            return Err(CemError::Definiteness(format!("mass matrix has non-positive diagonal {v:e} at {i}")));
        }
        d.push(1.0 / v.sqrt());
    }
    let ss = Mat::from_fn(n, n, |i, j| d[i] * s[(i, j)] * d[j]);
    let shifted = Mat::from_fn(n, n, |i, j| d[i] * a[(i, j)] * d[j] + sigma * ss[(i, j)]);
    let llt = shifted
        .llt(Side::Lower)
        .map_err(|e| CemError::Definiteness(format!("shifted stiffness is not positive definite: {e:?}")))?;
    let l = llt.L();
    // B = L⁻¹ Ŝ L⁻ᵀ
    let mut b = ss.clone();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, b.as_mut(), Par::Seq);
    let mut bt = b.transpose().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, bt.as_mut(), Par::Seq);
    let b = Mat::from_fn(n, n, |i, j| 0.5 * (bt[(i, j)] + bt[(j, i)]));
    let evd = b
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| CemError::NoConvergence { iterations: 0, residual: f64::NAN })?;
    // Ascending λ is descending ν.
    let order: Vec<usize> = (0..n).rev().collect();
    let mut y = Mat::from_fn(n, n, |i, j| evd.U()[(i, order[j])]);
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), y.as_mut(), Par::Seq);
    for i in 0..n {
        for j in 0..n {
            y[(i, j)] *= d[i];
        }
    }
    let sf = s.to_faer();
    let af = a.to_faer();
    let sy = &sf * &y;
    let ay = &af * &y;
    let mut values = Vec::with_capacity(n);
    for j in 0..n {
        let sn: f64 = (0..n).map(|i| y[(i, j)] * sy[(i, j)]).sum();
        let an: f64 = (0..n).map(|i| y[(i, j)] * ay[(i, j)]).sum();
        let nu = evd.S()[order[j]];
        // The inverted value is accurate at the small end, where the Rayleigh
        // quotient suffers cancellation; the quotient is better at the large end.
        let lam = if nu * sigma > 1e-4 { 1.0 / nu - sigma } else { an / sn };
        values.push(lam);
        let nrm = sn.sqrt();
        for i in 0..n {
            y[(i, j)] /= nrm;
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&p, &q| values[p].total_cmp(&values[q]));
    let mut values: Vec<f64> = idx.iter().map(|&p| values[p]).collect();
    let mut y = Mat::from_fn(n, n, |i, j| y[(i, idx[j])]);
    // Large eigenvalues come out of the inverted pencil with only ε/ν relative
    // accuracy. One step of S⁻¹A damps the small-eigenvalue components left in
    // their vectors, and Rayleigh–Ritz on the refined span separates the rest.
    let start = values.partition_point(|&v| v < sigma * (1e4 - 1.0));
    let k = n - start;
    if k > 0 {
        let sllt = ss
            .llt(Side::Lower)
            .map_err(|e| CemError::Definiteness(format!("mass matrix is not positive definite: {e:?}")))?;
        let ay = &af * y.subcols(start, k);
        let rhs = Mat::from_fn(n, k, |i, j| d[i] * ay[(i, j)] / values[start + j]);
        let mut z = sllt.solve(&rhs);
        for j in 0..k {
            for i in 0..n {
                z[(i, j)] *= d[i];
            }
        }
        let ca = z.transpose() * (&af * &z);
        let cs = z.transpose() * (&sf * &z);
        let sym = |m: &Mat<f64>| DenseMat::from_fn(k, k, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        let ritz = dense_generalized_eig(&sym(&ca), &sym(&cs))?;
        let rotated = &z * ritz.vectors.to_faer();
        for j in 0..k {
            values[start + j] = ritz.values[j];
            for i in 0..n {
                y[(i, start + j)] = rotated[(i, j)];
            }
        }
    }
    Ok(GeneralizedEig { values, vectors: DenseMat::from_faer(y.as_ref()) })
}
