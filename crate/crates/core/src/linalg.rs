//! Small dense linear-algebra helpers shared by the fitting modules.

use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue threshold below which a Gram matrix is treated as singular.
pub(crate) const RANK_TOL: f64 = 1e-12;

/// Ratio of the smallest to the largest eigenvalue of a symmetric PSD matrix after
/// unit-diagonal scaling. Zero diagonals count as rank loss.
pub(crate) fn scaled_condition(gram: &DMatrix<f64>) -> f64 {
    let k = gram.nrows();
    if k == 0 {
        return 0.0;
    }
    let mut scale = DVector::zeros(k);
    for i in 0..k {
        let d = gram[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return 0.0;
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let mut scaled = gram.clone();
    for i in 0..k {
        for j in 0..k {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let eig = scaled.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if max <= 0.0 { 0.0 } else { min / max }
}

pub(crate) fn is_full_rank(gram: &DMatrix<f64>) -> bool {
    scaled_condition(gram) > RANK_TOL
}

pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    Some(chol.solve(b))
}

pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Weighted Gram matrix `X' diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let k = x.ncols();
    let mut g = DMatrix::zeros(k, k);
    for (i, row) in x.row_iter().enumerate() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..k {
            let ra = row[a] * wi;
            for b in a..k {
                g[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Weighted cross product `X' diag(w) y`.
pub(crate) fn weighted_xty(x: &DMatrix<f64>, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let k = x.ncols();
    let mut out = DVector::zeros(k);
    for (i, row) in x.row_iter().enumerate() {
        let s = w[i] * y[i];
        for a in 0..k {
            out[a] += row[a] * s;
        }
    }
    out
}
