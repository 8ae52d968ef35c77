//! Dense linear-algebra helpers on top of nalgebra: truncated SVD,
//! hard thresholding, incoherence measurement and symmetric spectra.

use crate::scalar::Real;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd<T: Real> {
    pub u: DMatrix<T>,
    pub singular_values: Vec<T>,
    pub v: DMatrix<T>,
}

pub fn sorted_svd<T: Real>(m: &DMatrix<T>) -> SortedSvd<T> {
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return SortedSvd {
            u: DMatrix::zeros(rows, 0),
            singular_values: vec![],
            v: DMatrix::zeros(cols, 0),
        };
    }
    if rows < cols {
        let t = sorted_svd(&m.transpose());
        return SortedSvd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let (a, v) = jacobi_orthogonalize(m.clone());
    let sv: Vec<T> = (0..cols).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sv[y].partial_cmp(&sv[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y)));
    let top = sv[order[0]];
    let cut = T::tol(0.0) * top * T::from_usize(rows).unwrap();
    let mut u = DMatrix::zeros(rows, cols);
    let mut vs = DMatrix::zeros(cols, cols);
    let mut values = Vec::with_capacity(cols);
    for (dst, &src) in order.iter().enumerate() {
        let s = sv[src];
        vs.set_column(dst, &v.column(src));
        if s > cut {
            u.set_column(dst, &(a.column(src) / s));
            values.push(s);
        } else {
            values.push(T::zero());
        }
    }
    let nonzero = values.iter().filter(|s| **s > T::zero()).count();
    complete_orthonormal(&mut u, nonzero);
    SortedSvd {
        u,
        singular_values: values,
        v: vs,
    }
}

/// One-sided Jacobi: rotates column pairs of `a` until all are mutually
/// orthogonal. Returns the rotated matrix `A·V` and the accumulated `V`.
fn jacobi_orthogonalize<T: Real>(mut a: DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.ncols();
    let mut v = DMatrix::identity(n, n);
    let eps = T::default_epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == T::zero() || gamma.magnitude() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.magnitude() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (a, v)
}

fn rotate_columns<T: Real>(m: &mut DMatrix<T>, i: usize, j: usize, c: T, s: T) {
    for k in 0..m.nrows() {
        let x = m[(k, i)];
        let y = m[(k, j)];
        m[(k, i)] = c * x - s * y;
        m[(k, j)] = s * x + c * y;
    }
}

/// Fills columns `filled..` of `u` with unit vectors orthogonal to all
/// earlier columns (Gram–Schmidt against the standard basis).
fn complete_orthonormal<T: Real>(u: &mut DMatrix<T>, filled: usize) {
    let rows = u.nrows();
    let mut next = filled;
    for e in 0..rows {
        if next >= u.ncols() {
            break;
        }
        let mut cand = DVector::from_fn(rows, |k, _| if k == e { T::one() } else { T::zero() });
        for _ in 0..2 {
            for c in 0..next {
                let col = u.column(c).into_owned();
                let proj = col.dot(&cand);
                cand -= col * proj;
            }
        }
        let norm = cand.norm();
        if norm > T::lit(1e-6) {
            u.set_column(next, &(cand / norm));
            next += 1;
        }
    }
}

/// Numerical rank: singular values above `tol` times the largest one
/// (absolute `tol` when the largest is below one).
pub fn numerical_rank<T: Real>(m: &DMatrix<T>, tol: T) -> usize {
    let svd = sorted_svd(m);
    let top = svd.singular_values.first().copied().unwrap_or_else(T::zero);
    let cut = tol * top.max(T::one());
    svd.singular_values.iter().filter(|&&s| s > cut).count()
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncate_rank<T: Real>(m: &DMatrix<T>, r: usize) -> DMatrix<T> {
    let svd = sorted_svd(m);
    let k = r.min(svd.singular_values.len());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..k {
        let s = svd.singular_values[i];
        if s == T::zero() {
            break;
        }
        out += svd.u.column(i) * svd.v.column(i).transpose() * s;
    }
    out
}

/// Keeps the `k` largest-magnitude entries; ties are resolved in row-major
/// order. Exact zeros are never kept, so the result has at most `k` nonzeros.
pub fn hard_threshold<T: Real>(m: &DMatrix<T>, k: usize) -> DMatrix<T> {
    hard_threshold_weighted(m, k, None)
}

/// Hard thresholding by the score `w_i·m_ij²` (plain magnitude when no row
/// weights are given). Rows with zero weight are never selected.
pub fn hard_threshold_weighted<T: Real>(m: &DMatrix<T>, k: usize, row_weights: Option<&[T]>) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(rows, cols);
    if k == 0 {
        return out;
    }
    let mut entries: Vec<(usize, usize, T)> = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let w = row_weights.map_or(T::one(), |w| w[i]);
        if w <= T::zero() {
            continue;
        }
        for j in 0..cols {
            let v = m[(i, j)];
            if v != T::zero() {
                entries.push((i, j, w * v * v));
            }
        }
    }
    // stable sort preserves row-major order among equal scores
    entries.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    for &(i, j, _) in entries.iter().take(k) {
        out[(i, j)] = m[(i, j)];
    }
    out
}

pub fn count_nonzeros<T: Real>(m: &DMatrix<T>) -> usize {
    m.iter().filter(|v| **v != T::zero()).count()
}

pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.magnitude()))
}

pub fn frobenius_sq<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc + *v * *v)
}

pub fn row_norms<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    (0..m.nrows()).map(|i| m.row(i).norm()).collect()
}

/// Incoherence of a rank-`r` matrix measured from its top-`r` singular
/// vectors: `(p/r)·max‖U_i‖²` and `(q/r)·max‖V_j‖²`. Only singular
/// vectors with nonzero singular values enter, so a rank-deficient matrix
/// is measured on its actual rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incoherence<T> {
    pub left: T,
    pub right: T,
}

impl<T: Real> Incoherence<T> {
    pub fn mu(&self) -> T {
        self.left.max(self.right)
    }
}

pub fn measure_incoherence<T: Real>(m: &DMatrix<T>, r: usize) -> Incoherence<T> {
    let svd = sorted_svd(m);
    let top = svd.singular_values.first().copied().unwrap_or_else(T::zero);
    let cut = T::lit(1e-10) * top.max(T::one());
    let rank = svd.singular_values.iter().filter(|&&s| s > cut).count();
    let r = r.min(rank);
    if r == 0 {
        return Incoherence {
            left: T::zero(),
            right: T::zero(),
        };
    }
    let block_mu = |f: &DMatrix<T>| {
        let rows = f.nrows();
        let cols = f.columns(0, r);
        let max_sq = (0..rows).fold(T::zero(), |acc, i| acc.max(cols.row(i).norm_squared()));
        max_sq * T::from_usize(rows).unwrap() / T::from_usize(r).unwrap()
    };
    Incoherence {
        left: block_mu(&svd.u),
        right: block_mu(&svd.v),
    }
}

/// Eigenvalues of a symmetric matrix in increasing order.
pub fn symmetric_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return vec![];
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<T> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues
/// below `rel_tol·λ_max` are treated as zero.
pub fn psd_pseudo_inverse<T: Real>(m: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().fold(T::zero(), |a, v| a.max(*v));
    let cut = rel_tol * top;
    let mut out = DMatrix::zeros(n, n);
    if top <= T::zero() {
        return out;
    }
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > cut {
            let col = eig.eigenvectors.column(k);
            out += col * col.transpose() * (T::one() / lam);
        }
    }
    out
}

/// Orthonormal basis of the column span via Householder QR (same column count).
pub fn orthonormalize_columns<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    if m.ncols() == 0 {
        return m.clone();
    }
    m.clone().qr().q().columns(0, m.ncols()).into_owned()
}

pub fn outer<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DMatrix<T> {
    a * b.transpose()
}
