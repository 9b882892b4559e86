//! Dense symmetric and triangular kernels.
//!
//! Everything here is a plain deterministic function of its inputs: no
//! threading, no randomized pivoting. Eigenvectors follow one sign
//! convention (largest-magnitude entry positive) and eigenvalue ties are
//! ordered by the index at which the Jacobi sweep left them, so identical
//! inputs always produce bit-identical outputs.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{LodaError, Result};

/// Relative tolerance for the symmetry precondition.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues closer than this are treated as tied and keep index order.
pub const TIE_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 128;

/// Top eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigResult {
    /// D×r, orthonormal columns.
    pub vectors: Array2<f64>,
    /// Descending.
    pub values: Vec<f64>,
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn ensure_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LodaError::NonFinite(format!("{what} contains NaN or infinity")))
    }
}

fn ensure_square(m: ArrayView2<f64>, context: &'static str) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(LodaError::DimensionMismatch {
            context,
            expected: r,
            found: c,
        });
    }
    if r == 0 {
        return Err(LodaError::InvalidArgument(format!("{context}: empty matrix")));
    }
    Ok(r)
}

/// Checks symmetry to [`SYMMETRY_TOL`] (relative, Frobenius) and returns `(S + Sᵀ)/2`.
pub fn symmetrized(s: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_square(s, "symmetric matrix")?;
    ensure_finite(s, "symmetric matrix")?;
    let norm = frobenius(s);
    let asym = frobenius((&s - &s.t()).view());
    if norm > 0.0 && asym > SYMMETRY_TOL * norm {
        return Err(LodaError::NotSymmetric {
            asymmetry: asym / norm,
        });
    }
    Ok((&s + &s.t()) * 0.5)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns unsorted `(values, vectors)` where column `j` of `vectors` pairs
/// with `values[j]`.
fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius(a.view());
    if scale == 0.0 {
        return (vec![0.0; n], v);
    }
    let stop = (f64::EPSILON * scale).powi(2);
    let mut prev_off = f64::INFINITY;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        // stagnation means the round-off floor has been reached
        if off <= stop || off >= prev_off {
            break;
        }
        prev_off = off;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[[i, i]]).collect();
    (values, v)
}

/// Flips a vector so that its largest-magnitude entry is positive.
/// Among entries of equal magnitude the first one decides.
pub(crate) fn canonical_sign(mut col: ndarray::ArrayViewMut1<f64>) {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, v) in col.iter().enumerate() {
        // tiny slack so that round-off never reorders equal-magnitude entries
        if v.abs() > best_abs + 1e-14 {
            best = i;
            best_abs = v.abs();
        }
    }
    if col[best] < 0.0 {
        col.mapv_inplace(|x| -x);
    }
}

/// Order of eigen-indices: descending by value, ties kept in index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    // regroup near-ties by original index
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end - 1]] - values[order[end]] <= TIE_TOL {
            end += 1;
        }
        order[start..end].sort_unstable();
        start = end;
    }
    order
}

fn full_sorted_eigen(s: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let sym = symmetrized(s)?;
    let (values, vectors) = jacobi_eigen(sym);
    let order = descending_order(&values);
    let n = values.len();
    let mut sorted = Array2::<f64>::zeros((n, n));
    let mut sorted_values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        sorted.column_mut(dst).assign(&vectors.column(src));
        canonical_sign(sorted.column_mut(dst));
        sorted_values.push(values[src]);
    }
    Ok((sorted_values, sorted))
}

/// Full spectrum, descending, with vectors in matching columns.
pub fn sym_eig_full(s: ArrayView2<f64>) -> Result<SymEigResult> {
    let (values, vectors) = full_sorted_eigen(s)?;
    Ok(SymEigResult { vectors, values })
}

/// Top-`r` eigenpairs of a symmetric matrix.
pub fn sym_eig_topr(s: ArrayView2<f64>, r: usize) -> Result<SymEigResult> {
    let d = ensure_square(s, "sym_eig_topr")?;
    if r == 0 {
        return Err(LodaError::InvalidArgument("rank must be at least 1".into()));
    }
    if r > d {
        return Err(LodaError::RankTooLarge { rank: r, dim: d });
    }
    let (mut values, vectors) = full_sorted_eigen(s)?;
    values.truncate(r);
    Ok(SymEigResult {
        vectors: vectors.slice(ndarray::s![.., ..r]).to_owned(),
        values,
    })
}

/// Lower Cholesky factor `L` with `L·Lᵀ = S`.
pub fn cholesky_lower(s: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = ensure_square(s, "cholesky_lower")?;
    ensure_finite(s, "cholesky input")?;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = s[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(LodaError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut acc = s[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = acc / ljj;
        }
    }
    Ok(l)
}

fn check_triangular_diag(l: ArrayView2<f64>) -> Result<usize> {
    let n = ensure_square(l, "triangular solve")?;
    for i in 0..n {
        if l[[i, i]] == 0.0 || !l[[i, i]].is_finite() {
            return Err(LodaError::Singular { index: i });
        }
    }
    Ok(n)
}

/// Forward substitution: `L⁻¹·B` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_triangular_diag(l)?;
    if b.nrows() != n {
        return Err(LodaError::DimensionMismatch {
            context: "solve_lower right-hand side",
            expected: n,
            found: b.nrows(),
        });
    }
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut acc = x[[i, col]];
            for k in 0..i {
                acc -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = acc / l[[i, i]];
        }
    }
    Ok(x)
}

/// Back substitution against the transpose: `L⁻ᵀ·B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_triangular_diag(l)?;
    if b.nrows() != n {
        return Err(LodaError::DimensionMismatch {
            context: "solve_lower_transpose right-hand side",
            expected: n,
            found: b.nrows(),
        });
    }
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut acc = x[[i, col]];
            for k in (i + 1)..n {
                acc -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = acc / l[[i, i]];
        }
    }
    Ok(x)
}

/// Thin QR on the rows of `M`: returns `Q` (r×D) with orthonormal rows
/// spanning the row space of `M`, with a positive diagonal in the implied
/// triangular factor.
///
/// Modified Gram-Schmidt with one re-orthogonalization pass.
pub fn thin_qr_rows(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_finite(m, "thin_qr_rows input")?;
    let (r, d) = m.dim();
    if r == 0 || d == 0 {
        return Err(LodaError::InvalidArgument("thin_qr_rows: empty matrix".into()));
    }
    if r > d {
        return Err(LodaError::RankDeficient { row: d });
    }
    let mut q = Array2::<f64>::zeros((r, d));
    for i in 0..r {
        let original = m.row(i);
        let original_norm = original.dot(&original).sqrt();
        let mut v: Array1<f64> = original.to_owned();
        for _pass in 0..2 {
            for k in 0..i {
                let qk = q.row(k);
                let proj = qk.dot(&v);
                v.scaled_add(-proj, &qk);
            }
        }
        let norm = v.dot(&v).sqrt();
        if original_norm == 0.0 || norm <= 1e-10 * original_norm {
            return Err(LodaError::RankDeficient { row: i });
        }
        q.row_mut(i).assign(&(v / norm));
    }
    Ok(q)
}

/// `Uᵀ S U` trace without forming the r×r product.
pub fn quadratic_trace(s: ArrayView2<f64>, u: ArrayView2<f64>) -> f64 {
    let su = s.dot(&u);
    (&su * &u).sum()
}

/// Diagonal matrix from a slice.
pub fn diag(values: &[f64]) -> Array2<f64> {
    Array2::from_diag(&Array1::from(values.to_vec()))
}

/// Columns scaled individually: `M · diag(scale)`.
pub fn scale_columns(m: ArrayView2<f64>, scale: &[f64]) -> Array2<f64> {
    let mut out = m.to_owned();
    for (mut col, &s) in out.axis_iter_mut(Axis(1)).zip(scale) {
        col.mapv_inplace(|x| x * s);
    }
    out
}
