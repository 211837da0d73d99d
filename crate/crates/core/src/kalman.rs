//! Kalman filtering and smoothing on the augmented state space.
//!
//! The filter exploits the diagonal observation-noise covariance through the
//! Woodbury identity, so every update costs `O(n m^2 + m^3)` and no `n x n`
//! matrix is ever factorized. Writing `W = Z' R^{-1} Z` (time-invariant) and
//! `M_t = I + P_{t|t-1} W`, the per-period products
//!
//! ```text
//! zsv_t = Z' S_t^{-1} v_t = b_t - W M_t^{-1} P_{t|t-1} b_t,   b_t = Z' R^{-1} v_t
//! zsz_t = Z' S_t^{-1} Z   = W   - W M_t^{-1} P_{t|t-1} W
//! ```
//!
//! drive the update, the log-likelihood, and both smoother variants, where
//! `S_t = Z P_{t|t-1} Z' + R` is the innovation covariance. This form never
//! inverts `P_{t|t-1}`, which is typically singular here because the state
//! innovation has rank `q + n1 < m`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::StateSpace;
use crate::stats;

/// Initial state distribution for the forward pass.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// Large-kappa diffuse approximation: `kappa * I` on nonstationary
    /// blocks, the discrete Lyapunov solution on stationary ones.
    Diffuse { kappa: f64 },
    /// Explicit prior mean and covariance of the first in-sample state.
    Explicit {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
}

/// Which backward recursion to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmootherVariant {
    /// Classic fixed-interval smoother with a generalized inverse of the
    /// one-step-ahead covariance. Kept as a cross-check.
    ClassicPinv,
    /// Inversion-free backward recursion. The default.
    #[default]
    DkNoInverse,
}

/// Output of the forward pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// One-step-ahead state means, `T x m`.
    pub f_pred: DMatrix<f64>,
    /// One-step-ahead state covariances.
    pub p_pred: Vec<DMatrix<f64>>,
    /// Filtered state means, `T x m`.
    pub f_filt: DMatrix<f64>,
    /// Filtered state covariances.
    pub p_filt: Vec<DMatrix<f64>>,
    /// Prediction errors, `T x n`.
    pub innovations: DMatrix<f64>,
    /// `Z' S_t^{-1} v_t` per period (innovation-covariance products reused
    /// by the smoother).
    pub zsv: Vec<DVector<f64>>,
    /// `Z' S_t^{-1} Z` per period.
    pub zsz: Vec<DMatrix<f64>>,
    /// Gaussian prediction-error log-likelihood.
    pub loglik: f64,
    /// Per-period contributions to `loglik`.
    pub loglik_terms: Vec<f64>,
    /// Resolved initial mean.
    pub init_mean: DVector<f64>,
    /// Resolved initial covariance.
    pub init_cov: DMatrix<f64>,
}

/// Output of the backward pass.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed state means, `T x m`.
    pub f_smoothed: DMatrix<f64>,
    /// Smoothed state covariances.
    pub p_smoothed: Vec<DMatrix<f64>>,
    /// Smoothed lag-one cross-covariances `Cov(state_t, state_{t-1} | data)`;
    /// entry 0 is zero.
    pub p_lag1: Vec<DMatrix<f64>>,
    pub variant: SmootherVariant,
    /// Conditioning warnings raised during the pass.
    pub warnings: Vec<String>,
}

/// One Newton-Schulz step `X <- X (2I - M X)`: squares the residual of an
/// approximate inverse, which matters when `I + WP` is ill-conditioned
/// under a large diffuse scale (errors here leak into the smoothed moments
/// multiplied by the squared prior variance).
fn newton_refine_inverse(mmat: &DMatrix<f64>, minv: DMatrix<f64>) -> DMatrix<f64> {
    let m = mmat.nrows();
    let mut corr = -(mmat * &minv);
    for i in 0..m {
        corr[(i, i)] += 2.0;
    }
    &minv * corr
}

/// Resolves the prior moments of the first in-sample state. The factor
/// companion block gets the Lyapunov solution when stable, otherwise
/// `kappa * I`;
/// random-walk idiosyncratic states always get `kappa`.
pub fn initial_covariance(ss: &StateSpace, init: &InitialState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    match init {
        InitialState::Explicit { mean, cov } => {
            let m = ss.state_dim();
            if mean.len() != m || cov.nrows() != m || cov.ncols() != m {
                return Err(Error::dim("init", format!("expected state dimension {m}")));
            }
            Ok((mean.clone(), cov.clone()))
        }
        InitialState::Diffuse { kappa } => {
            if !(*kappa > 0.0) {
                return Err(Error::Invalid("diffuse kappa must be positive".into()));
            }
            let m = ss.state_dim();
            let fdim = 2 * ss.r;
            let mut p0 = DMatrix::zeros(m, m);
            if fdim > 0 {
                let tf = ss.tmat.view((0, 0), (fdim, fdim)).into_owned();
                let qf = ss.qmat.view((0, 0), (fdim, fdim)).into_owned();
                let radius = stats::spectral_radius(&tf);
                if radius < 0.999 {
                    let pf = stats::solve_discrete_lyapunov(&tf, &qf)?;
                    p0.view_mut((0, 0), (fdim, fdim)).copy_from(&pf);
                } else {
                    for i in 0..fdim {
                        p0[(i, i)] = *kappa;
                    }
                }
            }
            for k in 0..ss.n1 {
                p0[(fdim + k, fdim + k)] = *kappa;
            }
            Ok((DVector::zeros(m), p0))
        }
    }
}

/// Forward Kalman filter over an `n x T` data matrix (series in rows).
pub fn kf_forward(ss: &StateSpace, x: &DMatrix<f64>, init: &InitialState) -> Result<FilterOutput> {
    let n = ss.n_obs();
    let m = ss.state_dim();
    let t_len = x.ncols();
    if x.nrows() != n {
        return Err(Error::dim(
            "data",
            format!("expected {} rows, got {}", n, x.nrows()),
        ));
    }
    if t_len == 0 {
        return Err(Error::Invalid("data must have at least one period".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("data contains non-finite values".into()));
    }
    for i in 0..n {
        if !(ss.hobs[i] > 0.0) {
            return Err(Error::Invalid(format!(
                "observation variance must be strictly positive (series {i})"
            )));
        }
    }

    let (init_mean, init_cov) = initial_covariance(ss, init)?;

    // Z' R^{-1} and W = Z' R^{-1} Z are time-invariant.
    let rinv = DVector::from_fn(n, |i, _| 1.0 / ss.hobs[i]);
    let mut zr = ss.zmat.transpose(); // m x n
    for j in 0..n {
        let mut col = zr.column_mut(j);
        col *= rinv[j];
    }
    let w = &zr * &ss.zmat; // m x m
    let log_r_det: f64 = ss.hobs.iter().map(|v| v.ln()).sum();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut f_pred = DMatrix::zeros(t_len, m);
    let mut f_filt = DMatrix::zeros(t_len, m);
    let mut innovations = DMatrix::zeros(t_len, n);
    let mut p_pred = Vec::with_capacity(t_len);
    let mut p_filt = Vec::with_capacity(t_len);
    let mut zsv_all = Vec::with_capacity(t_len);
    let mut zsz_all = Vec::with_capacity(t_len);

    let mut mean = init_mean.clone();
    let mut cov = init_cov.clone();
    let mut loglik = 0.0;
    let mut loglik_terms = Vec::with_capacity(t_len);

    for t in 0..t_len {
        // Prediction. The initial moments are already the prior of the
        // first state, so the transition applies from the second period on.
        let (fp, pp) = if t == 0 {
            (mean.clone(), cov.clone())
        } else {
            let fp = &ss.tmat * &mean;
            let mut pp = &ss.tmat * &cov * ss.tmat.transpose() + &ss.qmat;
            stats::symmetrize(&mut pp);
            (fp, pp)
        };

        let xt = x.column(t).into_owned();
        let v = &xt - &ss.zmat * &fp;
        let b = &zr * &v; // Z' R^{-1} v
        let mut mmat = &w * &pp; // I + W P
        for i in 0..m {
            mmat[(i, i)] += 1.0;
        }
        if mmat.iter().any(|u| !u.is_finite()) {
            return Err(Error::numeric(
                format!("kf_forward t = {t}"),
                "innovation covariance is not finite",
            ));
        }
        let lu = mmat.clone().lu();

        // Log-likelihood: log det S = sum log R_ii + log det(I + WP).
        let mut log_det_m = 0.0;
        let u = lu.u();
        for i in 0..m {
            let diag = u[(i, i)].abs();
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::numeric(
                    format!("kf_forward t = {t}"),
                    "innovation covariance is singular",
                ));
            }
            log_det_m += diag.ln();
        }
        let minv = lu
            .try_inverse()
            .ok_or_else(|| Error::numeric(format!("kf_forward t = {t}"), "singular I + WP"))?;
        let minv = newton_refine_inverse(&mmat, minv);

        let zsv = &minv * &b; // Z' S^{-1} v
        let mut zsz = &minv * &w; // Z' S^{-1} Z
        stats::symmetrize(&mut zsz);

        // v' S^{-1} v = v' R^{-1} (v - Z P zsv).
        let fitted = &ss.zmat * (&pp * &zsv);
        let mut quad = 0.0;
        for i in 0..n {
            quad += v[i] * (v[i] - fitted[i]) * rinv[i];
        }
        let term = -0.5 * (n as f64 * ln_2pi + log_r_det + log_det_m + quad);
        loglik += term;
        loglik_terms.push(term);
        if !loglik.is_finite() {
            return Err(Error::numeric(
                format!("kf_forward t = {t}"),
                "log-likelihood became non-finite",
            ));
        }

        // Update: P_filt = P (I + WP)^{-1} stays PSD without subtraction.
        let fu = &fp + &pp * &zsv;
        let mut pu = &pp * &minv;
        stats::symmetrize(&mut pu);

        f_pred.row_mut(t).copy_from(&fp.transpose());
        f_filt.row_mut(t).copy_from(&fu.transpose());
        innovations.row_mut(t).copy_from(&v.transpose());
        p_pred.push(pp);
        p_filt.push(pu.clone());
        zsv_all.push(zsv);
        zsz_all.push(zsz);

        mean = fu;
        cov = pu;
    }

    Ok(FilterOutput {
        f_pred,
        p_pred,
        f_filt,
        p_filt,
        innovations,
        zsv: zsv_all,
        zsz: zsz_all,
        loglik,
        loglik_terms,
        init_mean,
        init_cov,
    })
}

/// Backward smoothing pass over a completed filter run.
pub fn ks_backward(
    filter: &FilterOutput,
    ss: &StateSpace,
    variant: SmootherVariant,
) -> Result<SmootherOutput> {
    match variant {
        SmootherVariant::DkNoInverse => ks_backward_dk(filter, ss),
        SmootherVariant::ClassicPinv => ks_backward_classic(filter, ss),
    }
}

fn ks_backward_dk(filter: &FilterOutput, ss: &StateSpace) -> Result<SmootherOutput> {
    let t_len = filter.p_pred.len();
    let m = ss.state_dim();
    let a = &ss.tmat;

    // L_t = A (I - P_{t|t-1} zsz_t), needed both at t and t-1.
    let mut lmats = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut ipz = -(&filter.p_pred[t] * &filter.zsz[t]);
        for i in 0..m {
            ipz[(i, i)] += 1.0;
        }
        lmats.push(a * ipz);
    }

    let mut f_sm = DMatrix::zeros(t_len, m);
    let mut p_sm = vec![DMatrix::zeros(m, m); t_len];
    let mut p_lag1 = vec![DMatrix::zeros(m, m); t_len];

    let mut r_vec = DVector::zeros(m);
    let mut n_mat = DMatrix::zeros(m, m);
    for t in (0..t_len).rev() {
        let r_new = &filter.zsv[t] + lmats[t].transpose() * &r_vec;
        let mut n_new = &filter.zsz[t] + lmats[t].transpose() * &n_mat * &lmats[t];
        stats::symmetrize(&mut n_new);

        let fp = filter.f_pred.row(t).transpose();
        let sm = &fp + &filter.p_pred[t] * &r_new;
        f_sm.row_mut(t).copy_from(&sm.transpose());
        let mut psm = &filter.p_pred[t] - &filter.p_pred[t] * &n_new * &filter.p_pred[t];
        stats::symmetrize(&mut psm);
        p_sm[t] = psm;

        if t > 0 {
            // Cov(state_t, state_{t-1} | data) = (I - P_t N_{t-1}) L_{t-1} P_{t-1}
            let mut ipn = -(&filter.p_pred[t] * &n_new);
            for i in 0..m {
                ipn[(i, i)] += 1.0;
            }
            p_lag1[t] = ipn * &lmats[t - 1] * &filter.p_pred[t - 1];
        }

        r_vec = r_new;
        n_mat = n_new;
    }

    Ok(SmootherOutput {
        f_smoothed: f_sm,
        p_smoothed: p_sm,
        p_lag1,
        variant: SmootherVariant::DkNoInverse,
        warnings: Vec::new(),
    })
}

fn ks_backward_classic(filter: &FilterOutput, ss: &StateSpace) -> Result<SmootherOutput> {
    let t_len = filter.p_pred.len();
    let m = ss.state_dim();
    let a = &ss.tmat;
    let mut warnings = Vec::new();

    let mut f_sm = DMatrix::zeros(t_len, m);
    let mut p_sm = vec![DMatrix::zeros(m, m); t_len];
    let mut p_lag1 = vec![DMatrix::zeros(m, m); t_len];

    f_sm.row_mut(t_len - 1)
        .copy_from(&filter.f_filt.row(t_len - 1));
    p_sm[t_len - 1] = filter.p_filt[t_len - 1].clone();

    // Smoother gains J_t = P_{t|t} A' pinv(P_{t+1|t}).
    let mut gains: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, m); t_len];
    for t in (0..t_len - 1).rev() {
        let (pinv, cond) = stats::pseudo_inverse(&filter.p_pred[t + 1], 1e-13);
        if cond > 1e12 {
            warnings.push(format!(
                "near-singular one-step-ahead covariance at t = {} (condition number {:.3e})",
                t + 1,
                cond
            ));
        }
        let j = &filter.p_filt[t] * a.transpose() * &pinv;
        let fp_next = filter.f_pred.row(t + 1).transpose();
        let f_next_sm = f_sm.row(t + 1).transpose();
        let sm = filter.f_filt.row(t).transpose() + &j * (f_next_sm - fp_next);
        f_sm.row_mut(t).copy_from(&sm.transpose());
        let dp = &p_sm[t + 1] - &filter.p_pred[t + 1];
        let mut psm = &filter.p_filt[t] + &j * dp * j.transpose();
        stats::symmetrize(&mut psm);
        p_sm[t] = psm;
        gains[t] = j;
    }

    // Lag-one covariances, backward recursion seeded at the final period:
    // Cov(state_T, state_{T-1} | data) = (I - K_T Z) A P_{T-1|T-1}
    // with K_T Z = P_{T|T-1} zsz_T.
    if t_len > 1 {
        let t = t_len - 1;
        let mut ikz = -(&filter.p_pred[t] * &filter.zsz[t]);
        for i in 0..m {
            ikz[(i, i)] += 1.0;
        }
        p_lag1[t] = ikz * a * &filter.p_filt[t - 1];
        for t in (1..t_len - 1).rev() {
            let term = &p_lag1[t + 1] - a * &filter.p_filt[t];
            p_lag1[t] = &filter.p_filt[t] * gains[t - 1].transpose()
                + &gains[t] * term * gains[t - 1].transpose();
        }
    }

    Ok(SmootherOutput {
        f_smoothed: f_sm,
        p_smoothed: p_sm,
        p_lag1,
        variant: SmootherVariant::ClassicPinv,
        warnings,
    })
}

/// Result of the Riccati fixed-point iteration.
#[derive(Debug, Clone)]
pub struct RiccatiResult {
    /// Steady-state one-step-ahead covariance.
    pub p_star: DMatrix<f64>,
    pub iterations: usize,
    /// Trace of the iterate at every step, for convergence reporting.
    pub trace_path: Vec<f64>,
}

/// Iterates the one-step-ahead covariance map
/// `P <- A (P - P Z' S^{-1} Z P) A' + Q` to its fixed point.
pub fn riccati_steady_state(ss: &StateSpace, tol: f64, max_iter: usize) -> Result<RiccatiResult> {
    let m = ss.state_dim();
    let n = ss.n_obs();
    let rinv = DVector::from_fn(n, |i, _| 1.0 / ss.hobs[i]);
    let mut zr = ss.zmat.transpose();
    for j in 0..n {
        let mut col = zr.column_mut(j);
        col *= rinv[j];
    }
    let w = &zr * &ss.zmat;

    let mut p = ss.qmat.clone();
    let mut trace_path = vec![p.trace()];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let mut mmat = &w * &p;
        for i in 0..m {
            mmat[(i, i)] += 1.0;
        }
        let minv = mmat
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::numeric("riccati", "singular I + WP"))?;
        let minv = newton_refine_inverse(&mmat, minv);
        let mut pf = &p * &minv;
        stats::symmetrize(&mut pf);
        let mut p_next = &ss.tmat * pf * ss.tmat.transpose() + &ss.qmat;
        stats::symmetrize(&mut p_next);
        residual = (&p_next - &p).norm();
        p = p_next;
        trace_path.push(p.trace());
        if residual < tol {
            return Ok(RiccatiResult {
                p_star: p,
                iterations: it,
                trace_path,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "Riccati iteration".into(),
        iterations: max_iter,
        residual,
    })
}

/// Filtered covariance implied by a one-step-ahead covariance:
/// `P_filt = P - P Z' S^{-1} Z P`.
pub fn filtered_from_predicted(ss: &StateSpace, p_pred: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = ss.state_dim();
    let n = ss.n_obs();
    let rinv = DVector::from_fn(n, |i, _| 1.0 / ss.hobs[i]);
    let mut zr = ss.zmat.transpose();
    for j in 0..n {
        let mut col = zr.column_mut(j);
        col *= rinv[j];
    }
    let w = &zr * &ss.zmat;
    let mut mmat = &w * p_pred;
    for i in 0..m {
        mmat[(i, i)] += 1.0;
    }
    let minv = mmat
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::numeric("filtered_from_predicted", "singular I + WP"))?;
    let minv = newton_refine_inverse(&mmat, minv);
    let mut pf = p_pred * &minv;
    stats::symmetrize(&mut pf);
    Ok(pf)
}

/// First period from which the one-step-ahead covariance stays within
/// `rel_tol` (relative Frobenius) of the steady state. Returns `T` when the
/// steady state is never reached.
pub fn burn_in_index(p_pred: &[DMatrix<f64>], p_star: &DMatrix<f64>, rel_tol: f64) -> usize {
    let scale = p_star.norm().max(f64::MIN_POSITIVE);
    let mut idx = p_pred.len();
    for t in (0..p_pred.len()).rev() {
        if (&p_pred[t] - p_star).norm() / scale < rel_tol {
            idx = t;
        } else {
            break;
        }
    }
    idx
}

/// Per-period traces of the one-step-ahead, filtered, and smoothed state
/// covariances (predictor / filter / smoother MSE paths).
pub fn mse_traces(filter: &FilterOutput, smoother: &SmootherOutput) -> Vec<(f64, f64, f64)> {
    filter
        .p_pred
        .iter()
        .zip(filter.p_filt.iter())
        .zip(smoother.p_smoothed.iter())
        .map(|((pp, pf), ps)| (pp.trace(), pf.trace(), ps.trace()))
        .collect()
}
