//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Row-major `Vec<Vec<f64>>` view of a matrix, for serialization.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, p, |i, j| rows[i][j])
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix and its numerical rank.
/// Eigenvalues below `rel_tol * max|eigenvalue|` are treated as zero.
pub fn pinv_sym(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = rel_tol * top;
    let mut rank = 0;
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= cut || top == 0.0 {
            continue;
        }
        rank += 1;
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) / lambda;
    }
    symmetrize(&mut out);
    (out, rank)
}

/// Inverse of a symmetric matrix that should be positive definite. Falls back
/// to the pseudo-inverse restricted to positive eigenvalues; the flag reports
/// whether the matrix was positive definite.
pub fn inverse_spd_or_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut s = m.clone();
    symmetrize(&mut s);
    if let Some(ch) = s.clone().cholesky() {
        let mut inv = ch.inverse();
        symmetrize(&mut inv);
        return (inv, true);
    }
    let n = s.nrows();
    let eig = SymmetricEigen::new(s);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 1e-12 * top {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    symmetrize(&mut out);
    (out, false)
}

/// Least squares via the normal equations; `None` when `X'WX` is singular.
pub fn weighted_least_squares(
    x: &[f64],
    p: usize,
    y: &[f64],
    w: Option<&[f64]>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = y.len();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for i in 0..n {
        let r = &x[i * p..(i + 1) * p];
        let wi = w.map_or(1.0, |w| w[i]);
        for a in 0..p {
            let ra = r[a] * wi;
            if ra == 0.0 {
                continue;
            }
            xty[a] += ra * y[i];
            for b in a..p {
                xtx[(a, b)] += ra * r[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let ch = xtx.clone().cholesky()?;
    let beta = ch.solve(&xty);
    Some((beta, ch.inverse()))
}
