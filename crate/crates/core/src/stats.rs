//! Small shared numerical helpers (means, autocovariances, least squares,
//! sorted symmetric eigendecompositions).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Sample autocovariance at `lag` with the 1/T convention (demeaned).
pub fn autocovariance(xs: &[f64], lag: usize) -> f64 {
    let t = xs.len();
    if lag >= t {
        return 0.0;
    }
    let m = mean(xs);
    let mut acc = 0.0;
    for i in lag..t {
        acc += (xs[i] - m) * (xs[i - lag] - m);
    }
    acc / t as f64
}

pub fn diff(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let pt = p.transpose();
    *p += pt;
    *p *= 0.5;
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order
/// and eigenvectors reordered to match.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = m.clone().symmetric_eigen();
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let vals = DVector::from_fn(n, |i, _| se.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(n, n, |i, j| se.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Fix the sign of each column so its entry of largest magnitude is positive.
/// Makes eigenvector output reproducible across platforms.
pub fn sign_fix_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// Fix the sign of each column so its first row entry is positive; if the
/// first row entry is numerically zero, fall back to the largest-magnitude
/// entry.
pub fn sign_fix_by_first_row(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let head = m[(0, j)];
        if head.abs() > 1e-12 {
            if head < 0.0 {
                for i in 0..m.nrows() {
                    m[(i, j)] = -m[(i, j)];
                }
            }
        } else {
            let mut col = m.column(j).into_owned();
            let mut tmp = DMatrix::from_columns(&[col.clone()]);
            sign_fix_columns(&mut tmp);
            col.copy_from(&tmp.column(0));
            m.set_column(j, &col);
        }
    }
}

/// Least-squares solve of `X b = y` through the normal equations with a tiny
/// ridge fallback when `X'X` is singular. Returns (coefficients, residuals).
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let b = solve_spd_with_ridge(&xtx, &xty)?;
    let resid = y - x * &b;
    Ok((b, resid))
}

/// Solve `A x = b` for symmetric positive (semi)definite `A`, retrying with a
/// small ridge when the Cholesky factorization fails. Returns the solution
/// and leaves the ridge size to the caller's diagnostics via `ridge_used`.
pub fn solve_spd_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_columns(std::slice::from_ref(b));
    let (x, _) = solve_spd_matrix_with_ridge(a, &rhs)?;
    Ok(x.column(0).into_owned())
}

/// Matrix right-hand-side variant of [`solve_spd_with_ridge`]. Returns the
/// solution together with the ridge that had to be added (0.0 if none).
pub fn solve_spd_matrix_with_ridge(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok((chol.solve(b), 0.0));
    }
    let scale = a.trace().abs().max(1.0) / a.nrows() as f64;
    let mut ridge = 1e-10 * scale;
    for _ in 0..8 {
        let mut aa = a.clone();
        for i in 0..aa.nrows() {
            aa[(i, i)] += ridge;
        }
        if let Some(chol) = aa.cholesky() {
            return Ok((chol.solve(b), ridge));
        }
        ridge *= 100.0;
    }
    Err(Error::numeric(
        "solve_spd",
        "matrix not positive definite even after ridge",
    ))
}

/// Least-squares VAR(2) fit of an `k x T` multivariate series.
/// Returns (A1, A2, residual covariance, companion spectral radius).
pub fn fit_var2(series: &DMatrix<f64>) -> Result<Var2Fit> {
    let k = series.nrows();
    let t = series.ncols();
    if t < 2 * k + 3 {
        return Err(Error::Invalid(format!(
            "VAR(2) fit needs more than {} observations, got {}",
            2 * k + 2,
            t
        )));
    }
    let rows = t - 2;
    let mut design = DMatrix::zeros(rows, 2 * k);
    let mut target = DMatrix::zeros(rows, k);
    for s in 2..t {
        for j in 0..k {
            design[(s - 2, j)] = series[(j, s - 1)];
            design[(s - 2, k + j)] = series[(j, s - 2)];
            target[(s - 2, j)] = series[(j, s)];
        }
    }
    let gtg = design.transpose() * &design;
    let gty = design.transpose() * &target;
    let (coef, _) = solve_spd_matrix_with_ridge(&gtg, &gty)?; // 2k x k
    let resid = &target - &design * &coef;
    let mut sigma = resid.transpose() * &resid / rows as f64;
    symmetrize(&mut sigma);
    let a1 = coef.rows(0, k).transpose();
    let a2 = coef.rows(k, k).transpose();
    let radius = companion_spectral_radius(&a1, &a2);
    Ok(Var2Fit {
        a1,
        a2,
        sigma,
        spectral_radius: radius,
    })
}

pub struct Var2Fit {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub spectral_radius: f64,
}

/// Spectral radius of the VAR(2) companion matrix [[A1, A2], [I, 0]].
pub fn companion_spectral_radius(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> f64 {
    let k = a1.nrows();
    let mut comp = DMatrix::zeros(2 * k, 2 * k);
    comp.view_mut((0, 0), (k, k)).copy_from(a1);
    comp.view_mut((0, k), (k, k)).copy_from(a2);
    for i in 0..k {
        comp[(k + i, i)] = 1.0;
    }
    spectral_radius(&comp)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Moore-Penrose pseudo-inverse via SVD. Returns the inverse together with
/// the condition number of the retained part.
pub fn pseudo_inverse(m: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, f64) {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rcond * max_sv.max(f64::MIN_POSITIVE);
    let mut min_kept = f64::INFINITY;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let k = svd.singular_values.len();
    let mut sinv = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cut {
            sinv[(i, i)] = 1.0 / s;
            min_kept = min_kept.min(s);
        }
    }
    let cond = if min_kept.is_finite() && min_kept > 0.0 {
        max_sv / min_kept
    } else {
        f64::INFINITY
    };
    (vt.transpose() * sinv * u.transpose(), cond)
}

/// Solve the discrete Lyapunov equation `P = T P T' + Q` by vectorization.
/// Only valid when the spectral radius of `T` is below one.
pub fn solve_discrete_lyapunov(t: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = t.nrows();
    let kk = k * k;
    // (I - T (x) T) vec(P) = vec(Q)
    let mut a = DMatrix::zeros(kk, kk);
    for i in 0..k {
        for j in 0..k {
            for p in 0..k {
                for s in 0..k {
                    // vec index (col-major): row i + k*j for entry (i, j)
                    a[(i + k * j, p + k * s)] = -t[(i, p)] * t[(j, s)];
                }
            }
        }
    }
    for idx in 0..kk {
        a[(idx, idx)] += 1.0;
    }
    let vec_q = DVector::from_fn(kk, |idx, _| q[(idx % k, idx / k)]);
    let lu = a.lu();
    let sol = lu
        .solve(&vec_q)
        .ok_or_else(|| Error::numeric("lyapunov", "singular (I - T kron T)"))?;
    let mut p = DMatrix::from_fn(k, k, |i, j| sol[i + k * j]);
    symmetrize(&mut p);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autocovariance_of_constant_is_zero() {
        let xs = vec![5.0; 40];
        assert_eq!(autocovariance(&xs, 1), 0.0);
        assert_eq!(variance(&xs), 0.0);
    }

    #[test]
    fn sorted_eigen_is_descending_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((&m - rec).norm() < 1e-12);
    }

    #[test]
    fn lyapunov_fixed_point() {
        let t = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]);
        let p = solve_discrete_lyapunov(&t, &q).unwrap();
        let rhs = &t * &p * t.transpose() + &q;
        assert!((&p - rhs).norm() < 1e-10);
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(10, |i, _| 2.0 + 3.0 * i as f64);
        let (b, resid) = ols(&x, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-10);
        assert!((b[1] - 3.0).abs() < 1e-10);
        assert!(resid.norm() < 1e-10);
    }

    #[test]
    fn pseudo_inverse_of_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (pinv, _) = pseudo_inverse(&m, 1e-13);
        assert!((pinv[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(pinv[(1, 1)], 0.0);
    }
}
