//! Quasi maximum likelihood estimation via the EM algorithm.
//!
//! The E-step runs the Kalman filter and the inversion-free smoother on the
//! augmented state space and aggregates the conditional moments the closed
//! form M-step needs. Loadings and measurement variances are updated
//! equation by equation (the observation noise is diagonal); the factor VAR
//! is updated from stacked-lag normal equations; the shock loading `H` is
//! rebuilt from the leading eigenvectors of the implied VAR residual
//! covariance, so `H H'` rather than `H` itself is the identified object.
//! An optional tie constraint forces groups of series to share one loading
//! row, hence one common component.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{
    initial_covariance, kf_forward, ks_backward, FilterOutput, InitialState, SmootherOutput,
    SmootherVariant,
};
use crate::model::{build_state_space, FactorEstimates, ModelSpec, Params};
use crate::stats;

/// Relative slack absorbing floating-point wobble in the monotonicity check.
const LOGLIK_SLACK: f64 = 1e-8;

/// Periods whose smoothed moments still involve the diffuse prior: the
/// state stacks two factor lags, so the pre-sample lag block reaches the
/// predictions of the first two periods. Their moments carry the prior's
/// squared scale in their roundoff and their likelihood terms are governed
/// by the prior, so the EM objective conditions on them and the moment
/// sums skip them.
const EM_BURN: usize = 2;

/// Groups of series constrained to share a loading row.
#[derive(Debug, Clone, Default)]
pub struct TieGroups {
    pub groups: Vec<Vec<usize>>,
}

impl TieGroups {
    pub fn none() -> Self {
        TieGroups { groups: Vec::new() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for group in &self.groups {
            if group.len() < 2 {
                return Err(Error::Invalid("tie groups need at least two members".into()));
            }
            for &i in group {
                if i >= n {
                    return Err(Error::Invalid(format!("tie group member {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Invalid(format!("series {i} appears in two tie groups")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Conditional-moment aggregates produced by one E-step.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `sum_t E[F_t F_t']` over all periods, `r x r`.
    pub sff: DMatrix<f64>,
    /// Per-series `sum_t x~_it E[F_t']` (with the smoothed random-walk state
    /// and its covariance with the factors netted out for rho = 1 series),
    /// `n x r`.
    pub sxf: DMatrix<f64>,
    /// `sum_t x_it^2` per series.
    pub sxx: DVector<f64>,
    /// VAR target second moment `sum_t E[F_t F_t']`, `t >= 1`.
    pub sff_var: DMatrix<f64>,
    /// VAR cross moment `sum_t E[F_t G_t']` with `G_t = (F_{t-1}', F_{t-2}')'`,
    /// `r x 2r`.
    pub sfg: DMatrix<f64>,
    /// VAR regressor second moment `sum_t E[G_t G_t']`, `2r x 2r`.
    pub sgg: DMatrix<f64>,
    /// Expected squared increments of each random-walk idiosyncratic state.
    pub sdxi: DVector<f64>,
    /// Number of periods in the observation sums.
    pub t_obs: usize,
    /// Number of transitions in the VAR sums.
    pub t_var: usize,
}

/// EM progress record.
#[derive(Debug, Clone)]
pub struct EmState {
    pub params: Params,
    /// Log-likelihood at each evaluated iterate, conditional on the first
    /// observation (whose prediction-error term is governed by the diffuse
    /// prior rather than by the parameters). Non-decreasing up to numerical
    /// slack.
    pub loglik_path: Vec<f64>,
    /// Number of parameter updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// Last symmetric relative likelihood change.
    pub delta_l: f64,
    /// Ridge fallbacks and other non-fatal notes from the M-steps.
    pub notes: Vec<String>,
}

/// PCA-on-differences initialization.
///
/// Loadings are `sqrt(n)` times the leading eigenvectors of the covariance
/// of the differenced panel (signs fixed so the first loading row is
/// positive), factors are integrated principal-component scores started at
/// zero, the VAR comes from least squares on those factors, `H` from the
/// leading eigenvectors of the VAR residual covariance, and the
/// idiosyncratic variances from the implied residuals.
pub fn init_pca(x: &DMatrix<f64>, spec: &ModelSpec, rho: &[bool]) -> Result<Params> {
    let n = spec.n;
    let t_len = spec.t_len;
    if x.nrows() != n || x.ncols() != t_len {
        return Err(Error::dim(
            "data",
            format!("expected {} x {}, got {} x {}", n, t_len, x.nrows(), x.ncols()),
        ));
    }
    if rho.len() != n {
        return Err(Error::dim("rho", format!("expected length {n}")));
    }
    if t_len <= spec.r + spec.var_order + 2 {
        return Err(Error::Invalid("sample too short for initialization".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("data contains non-finite values".into()));
    }

    let (lambda0, factors) = pca_factors(x, spec.r)?;
    let dx = {
        let lead = x.columns(1, t_len - 1);
        let lag = x.columns(0, t_len - 1);
        lead - lag
    };

    let var_fit = stats::fit_var2(&factors)?;
    let (h0, _) = h_from_sigma(&var_fit.sigma, spec.q);

    let resid = x - &lambda0 * &factors;
    let mut r_diag = DVector::zeros(n);
    let mut obs_floor = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = (0..t_len).map(|t| resid[(i, t)]).collect();
        let dx_row: Vec<f64> = (0..dx.ncols()).map(|t| dx[(i, t)]).collect();
        let var_dx = stats::variance(&dx_row);
        obs_floor[i] = spec.i1_floor_frac * var_dx.max(1e-8);
        let var_raw = if rho[i] {
            stats::variance(&stats::diff(&row))
        } else {
            stats::variance(&row)
        };
        let xrow: Vec<f64> = (0..t_len).map(|t| x[(i, t)]).collect();
        r_diag[i] = var_raw.max(1e-10 * stats::variance(&xrow).max(1e-8));
    }

    Ok(Params {
        lambda: lambda0,
        a1: var_fit.a1,
        a2: var_fit.a2,
        h: h0,
        r_diag,
        rho: rho.to_vec(),
        obs_floor,
    })
}

/// Integrated principal components: loadings as `sqrt(n)` times the leading
/// `r` eigenvectors of the covariance of the differenced panel (first
/// loading row pinned positive) and factors as cumulated PC scores started
/// at zero. Also the source of the pre-estimation common components used by
/// the unit-root classification.
pub fn pca_factors(x: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let t_len = x.ncols();
    if r == 0 || r > n || t_len < 3 {
        return Err(Error::Invalid(format!(
            "principal components need 1 <= r <= n and T >= 3, got r = {r}, n = {n}, T = {t_len}"
        )));
    }
    let dx = {
        let lead = x.columns(1, t_len - 1);
        let lag = x.columns(0, t_len - 1);
        lead - lag
    };
    // Covariance of the differenced panel (demeaned).
    let mut dxc = dx.clone();
    for i in 0..n {
        let mean = dx.row(i).sum() / dx.ncols() as f64;
        for s in 0..dx.ncols() {
            dxc[(i, s)] -= mean;
        }
    }
    let cov = &dxc * dxc.transpose() / (dx.ncols() as f64 - 1.0);
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pca_factors", "covariance of differences is not finite"));
    }
    let (_, vecs) = stats::sorted_symmetric_eigen(&cov);
    let mut v = vecs.columns(0, r).into_owned();
    stats::sign_fix_by_first_row(&mut v);
    let lambda0 = &v * (n as f64).sqrt();

    let sqrt_n_inv = 1.0 / (n as f64).sqrt();
    let mut factors = DMatrix::zeros(r, t_len);
    for t in 1..t_len {
        let score = v.transpose() * dx.column(t - 1) * sqrt_n_inv;
        let prev = factors.column(t - 1).into_owned();
        factors.set_column(t, &(prev + score));
    }
    Ok((lambda0, factors))
}

/// Leading-eigenvector square root: `H` has the `q` leading eigenvectors of
/// `sigma` as columns, each scaled by the square root of its eigenvalue, so
/// `H H'` is the best rank-`q` approximation of `sigma`.
fn h_from_sigma(sigma: &DMatrix<f64>, q: usize) -> (DMatrix<f64>, f64) {
    let (vals, vecs) = stats::sorted_symmetric_eigen(sigma);
    let r = sigma.nrows();
    let mut h = DMatrix::zeros(r, q);
    for j in 0..q {
        let scale = vals[j].max(0.0).sqrt();
        for i in 0..r {
            h[(i, j)] = vecs[(i, j)] * scale;
        }
    }
    stats::sign_fix_columns(&mut h);
    let discarded: f64 = (q..r).map(|j| vals[j].max(0.0)).sum();
    (h, discarded)
}

/// One E-step: filter + smooth at the given parameters, then aggregate the
/// sufficient statistics. Returns the statistics and the observed-data
/// log-likelihood at these parameters.
pub fn e_step(params: &Params, spec: &ModelSpec, x: &DMatrix<f64>) -> Result<(SufficientStats, f64)> {
    let init = InitialState::Diffuse { kappa: spec.diffuse_scale };
    let (stats, loglik, _, _) = e_step_full(params, spec, x, &init)?;
    Ok((stats, loglik))
}

fn e_step_full(
    params: &Params,
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    init: &InitialState,
) -> Result<(SufficientStats, f64, FilterOutput, SmootherOutput)> {
    let ss = build_state_space(params, spec)?;
    let filter = kf_forward(&ss, x, init)?;
    let smoother = ks_backward(&filter, &ss, SmootherVariant::DkNoInverse)?;
    let loglik_cond: f64 = filter.loglik_terms.iter().skip(EM_BURN).sum();

    let n = spec.n;
    let r = spec.r;
    let t_len = x.ncols();
    let sm = &smoother.f_smoothed;

    let mut sff = DMatrix::zeros(r, r);
    let mut sxf = DMatrix::zeros(n, r);
    let mut sxx = DVector::zeros(n);
    let mut sff_var = DMatrix::zeros(r, r);
    let mut sfg = DMatrix::zeros(r, 2 * r);
    let mut sgg = DMatrix::zeros(2 * r, 2 * r);
    let mut sdxi = DVector::zeros(n);

    for t in EM_BURN..t_len {
        let p_t = &smoother.p_smoothed[t];
        let f_t = sm.row(t).columns(0, r).transpose();

        sff += &f_t * f_t.transpose() + p_t.view((0, 0), (r, r));

        for i in 0..n {
            sxx[i] += x[(i, t)] * x[(i, t)];
            match ss.i1_state[i] {
                None => {
                    for j in 0..r {
                        sxf[(i, j)] += x[(i, t)] * f_t[j];
                    }
                }
                Some(k) => {
                    let xi_t = sm[(t, k)];
                    for j in 0..r {
                        sxf[(i, j)] += (x[(i, t)] - xi_t) * f_t[j] - p_t[(k, j)];
                    }
                }
            }
        }

        if t > EM_BURN {
            let p_prev = &smoother.p_smoothed[t - 1];
            let p_lag = &smoother.p_lag1[t];
            let g_prev = sm.row(t - 1).columns(0, 2 * r).transpose();

            sff_var += &f_t * f_t.transpose() + p_t.view((0, 0), (r, r));
            sfg += &f_t * g_prev.transpose() + p_lag.view((0, 0), (r, 2 * r));
            sgg += &g_prev * g_prev.transpose() + p_prev.view((0, 0), (2 * r, 2 * r));

            for i in 0..n {
                if let Some(k) = ss.i1_state[i] {
                    let d = sm[(t, k)] - sm[(t - 1, k)];
                    sdxi[i] += d * d + p_t[(k, k)] + p_prev[(k, k)] - 2.0 * p_lag[(k, k)];
                }
            }
        }
    }
    stats::symmetrize(&mut sff);
    stats::symmetrize(&mut sff_var);
    stats::symmetrize(&mut sgg);

    Ok((
        SufficientStats {
            sff,
            sxf,
            sxx,
            sff_var,
            sfg,
            sgg,
            sdxi,
            t_obs: t_len - EM_BURN,
            t_var: t_len - EM_BURN - 1,
        },
        loglik_cond,
        filter,
        smoother,
    ))
}

/// Observed-data log-likelihood at the given parameters (forward pass only).
fn loglik_at(params: &Params, spec: &ModelSpec, x: &DMatrix<f64>, init: &InitialState) -> Result<f64> {
    let ss = build_state_space(params, spec)?;
    let filter = kf_forward(&ss, x, init)?;
    Ok(filter.loglik_terms.iter().skip(EM_BURN).sum())
}

/// Closed-form M-step. `prev` supplies the unit-root flags, the observation
/// floors, and the previous measurement variances used as pooling weights
/// for tied loading rows. Returns the updated parameters plus any ridge
/// notes.
pub fn m_step(
    stats_in: &SufficientStats,
    spec: &ModelSpec,
    prev: &Params,
    ties: &TieGroups,
) -> Result<(Params, Vec<String>)> {
    m_step_impl(stats_in, spec, prev, ties, true)
}

/// `update_var = false` refreshes only the observation-equation parameters
/// (loadings and measurement variances), which is an exact conditional
/// maximization and therefore can never decrease the likelihood. Used as a
/// fallback when the heuristic rank-q VAR/H update would.
fn m_step_impl(
    stats_in: &SufficientStats,
    spec: &ModelSpec,
    prev: &Params,
    ties: &TieGroups,
    update_var: bool,
) -> Result<(Params, Vec<String>)> {
    let n = spec.n;
    let r = spec.r;
    let mut notes = Vec::new();

    // Loadings: lambda_i' = sxf_i' sff^{-1}, pooled within tie groups with
    // inverse measurement-variance weights.
    let (sff_inv_sxf, ridge) =
        stats::solve_spd_matrix_with_ridge(&stats_in.sff, &stats_in.sxf.transpose())?;
    if ridge > 0.0 {
        notes.push(format!("loadings normal equations needed ridge {ridge:.3e}"));
    }
    let mut lambda = sff_inv_sxf.transpose(); // n x r

    for group in &ties.groups {
        let mut pooled_rhs = DVector::zeros(r);
        let mut total_w = 0.0;
        for &i in group {
            let obs_var = if prev.rho[i] { prev.obs_floor[i] } else { prev.r_diag[i] };
            let w = 1.0 / obs_var.max(1e-300);
            for j in 0..r {
                pooled_rhs[j] += w * stats_in.sxf[(i, j)];
            }
            total_w += w;
        }
        pooled_rhs /= total_w;
        let shared = stats::solve_spd_with_ridge(&stats_in.sff, &pooled_rhs)?;
        for &i in group {
            for j in 0..r {
                lambda[(i, j)] = shared[j];
            }
        }
    }

    // Factor VAR from the stacked-lag normal equations, with the shock
    // loading rebuilt from the leading eigenvectors of the implied residual
    // covariance.
    let (a1, a2, h) = if update_var {
        let (coef_t, ridge_var) =
            stats::solve_spd_matrix_with_ridge(&stats_in.sgg, &stats_in.sfg.transpose())?;
        if ridge_var > 0.0 {
            notes.push(format!("VAR normal equations needed ridge {ridge_var:.3e}"));
        }
        let coef = coef_t.transpose(); // r x 2r
        let a1 = coef.columns(0, r).into_owned();
        let a2 = coef.columns(r, r).into_owned();
        let mut sigma =
            (&stats_in.sff_var - &coef * stats_in.sfg.transpose()) / stats_in.t_var as f64;
        stats::symmetrize(&mut sigma);
        let (h, _) = h_from_sigma(&sigma, spec.q);
        (a1, a2, h)
    } else {
        (prev.a1.clone(), prev.a2.clone(), prev.h.clone())
    };

    // Measurement variances: expected residual second moments for white
    // noise series, expected squared state increments for random walks.
    let mut r_diag = DVector::zeros(n);
    for i in 0..n {
        if prev.rho[i] {
            r_diag[i] = (stats_in.sdxi[i] / stats_in.t_var as f64).max(prev.obs_floor[i]);
        } else {
            let li = lambda.row(i).transpose();
            let quad = (li.transpose() * &stats_in.sff * &li)[(0, 0)];
            let cross = lambda.row(i).dot(&stats_in.sxf.row(i));
            let val = (stats_in.sxx[i] - 2.0 * cross + quad) / stats_in.t_obs as f64;
            r_diag[i] = val.max(1e-12 * (stats_in.sxx[i] / stats_in.t_obs as f64).max(1e-12));
        }
    }

    Ok((
        Params {
            lambda,
            a1,
            a2,
            h,
            r_diag,
            rho: prev.rho.clone(),
            obs_floor: prev.obs_floor.clone(),
        },
        notes,
    ))
}

/// Full EM run: initialization, alternating E/M steps with the symmetric
/// relative stopping rule, and a final smoother pass at the accepted
/// parameters.
pub fn run_em(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    rho: &[bool],
    ties: &TieGroups,
) -> Result<(EmState, FactorEstimates)> {
    spec.validate()?;
    ties.validate(spec.n)?;
    let mut params = init_pca(x, spec, rho)?;

    // The initial state prior is part of the likelihood; resolving it once
    // (at the initialization parameters) keeps the objective fixed across
    // iterations. Re-deciding the stationary-solve branch per iterate makes
    // the likelihood jump when the fitted VAR crosses the stability
    // threshold.
    let init = {
        let ss0 = build_state_space(&params, spec)?;
        let (mean, cov) =
            initial_covariance(&ss0, &InitialState::Diffuse { kappa: spec.diffuse_scale })?;
        InitialState::Explicit { mean, cov }
    };

    let mut loglik_path: Vec<f64> = Vec::new();
    let mut notes = Vec::new();
    let mut delta = f64::NAN;
    let mut converged = false;
    let mut iterations = 0usize;

    let (filter, smoother) = loop {
        let (stats_out, loglik, filter, smoother) = e_step_full(&params, spec, x, &init)?;
        if let Some(&prev_ll) = loglik_path.last() {
            if loglik < prev_ll - LOGLIK_SLACK * prev_ll.abs().max(1.0) {
                return Err(Error::LikelihoodDecrease {
                    iteration: loglik_path.len(),
                    previous: prev_ll,
                    current: loglik,
                });
            }
            delta = (loglik - prev_ll).abs() / (loglik.abs() + prev_ll.abs()).max(f64::MIN_POSITIVE);
        }
        loglik_path.push(loglik);

        if loglik_path.len() >= spec.em_min_iter && delta < spec.em_tol {
            converged = true;
            break (filter, smoother);
        }
        if iterations >= spec.em_max_iter {
            break (filter, smoother);
        }

        // The loadings/variance update is an exact conditional-maximization
        // step; the VAR/H update projects the residual covariance to rank q
        // and is only a heuristic. Accept the full update when it does not
        // lower the likelihood, otherwise keep the previous VAR block for
        // this iteration.
        let (candidate, step_notes) = m_step_impl(&stats_out, spec, &params, ties, true)?;
        notes.extend(step_notes);
        let ll_candidate = loglik_at(&candidate, spec, x, &init)?;
        if ll_candidate >= loglik - LOGLIK_SLACK * loglik.abs().max(1.0) {
            params = candidate;
        } else {
            let (fallback, _) = m_step_impl(&stats_out, spec, &params, ties, false)?;
            let ll_fallback = loglik_at(&fallback, spec, x, &init)?;
            if ll_fallback < loglik - LOGLIK_SLACK * loglik.abs().max(1.0) {
                return Err(Error::LikelihoodDecrease {
                    iteration: loglik_path.len(),
                    previous: loglik,
                    current: ll_fallback,
                });
            }
            notes.push(format!(
                "iteration {}: rank-q VAR update rejected (would lower the likelihood); kept previous factor dynamics",
                iterations + 1
            ));
            params = fallback;
        }
        iterations += 1;
    };

    let estimates = factor_estimates(&params, spec, x, &filter, &smoother);

    Ok((
        EmState {
            params,
            loglik_path,
            iterations,
            converged,
            delta_l: delta,
            notes,
        },
        estimates,
    ))
}

fn factor_estimates(
    params: &Params,
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    filter: &FilterOutput,
    smoother: &SmootherOutput,
) -> FactorEstimates {
    let t_len = x.ncols();
    let r = spec.r;
    let factors = DMatrix::from_fn(r, t_len, |j, t| smoother.f_smoothed[(t, j)]);
    let chi = &params.lambda * factors;
    let xi = x - &chi;
    FactorEstimates {
        f_smoothed: smoother.f_smoothed.clone(),
        p_smoothed: smoother.p_smoothed.clone(),
        p_lag1: smoother.p_lag1.clone(),
        chi,
        xi,
        loglik: filter.loglik,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::simulate::{gen_dfm, DgpConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn small_spec(n: usize, t_len: usize, r: usize, q: usize, d: usize) -> ModelSpec {
        ModelSpec::new(n, t_len, r, q, d).unwrap()
    }

    #[test]
    fn init_recovers_loading_space_with_strong_factors() {
        let mut cfg = DgpConfig::new(100, 200, 4, 2, 1, 17);
        cfg.orthonormal_loadings = true;
        cfg.snr = 25.0;
        cfg.idio_ar = 0.2;
        let (x, truth) = gen_dfm(&cfg).unwrap();
        let spec = small_spec(100, 200, 4, 2, 1);
        let params = init_pca(&x, &spec, &vec![false; 100]).unwrap();
        let angle = metrics::principal_angle(&params.lambda, &truth.lambda);
        assert!(
            angle < 5.0_f64.to_radians(),
            "principal angle {:.2} degrees",
            angle.to_degrees()
        );
    }

    #[test]
    fn init_on_exact_rank_one_panel() {
        // x = lambda f' with no noise: the first PC direction is lambda and
        // the implied residual variance is numerically zero.
        let n = 20;
        let t_len = 120;
        let mut rng = StdRng::seed_from_u64(3);
        let lam = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut f = vec![0.0f64; t_len];
        for t in 1..t_len {
            f[t] = f[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let x = DMatrix::from_fn(n, t_len, |i, t| lam[i] * f[t]);
        let spec = ModelSpec {
            n,
            t_len,
            r: 1,
            q: 1,
            d: 0,
            ..small_spec(n, t_len, 2, 2, 1)
        };
        let params = init_pca(&x, &spec, &vec![false; n]).unwrap();
        let lam_mat = DMatrix::from_column_slice(n, 1, lam.as_slice());
        let angle = metrics::principal_angle(&params.lambda, &lam_mat);
        assert!(angle < 1e-8, "angle {angle}");
        assert!(params.r_diag.max() < 1e-6, "residual variance {:?}", params.r_diag.max());
    }

    #[test]
    fn init_sign_rule_pins_first_loading_row_positive() {
        let cfg = DgpConfig::new(30, 150, 2, 2, 1, 9);
        let (x, _) = gen_dfm(&cfg).unwrap();
        let spec = small_spec(30, 150, 2, 2, 1);
        let params = init_pca(&x, &spec, &vec![false; 30]).unwrap();
        for j in 0..2 {
            assert!(params.lambda[(0, j)] > 0.0);
        }
        // Negating the panel flips the data sign but the rule still pins
        // the first row positive.
        let neg = -x.clone();
        let params_neg = init_pca(&neg, &spec, &vec![false; 30]).unwrap();
        for j in 0..2 {
            assert!(params_neg.lambda[(0, j)] > 0.0);
        }
    }

    #[test]
    fn e_step_moments_match_truth_when_noise_free() {
        // Noise-free identity-loading system: the smoother pins the factors
        // to the data and sum_t x F' matches the true cross moment.
        let n = 4;
        let t_len = 30;
        let mut rng = StdRng::seed_from_u64(5);
        let mut f = DMatrix::zeros(2, t_len);
        for t in 1..t_len {
            for j in 0..2 {
                f[(j, t)] = f[(j, t - 1)] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        let lam = DMatrix::from_fn(n, 2, |i, j| if i % 2 == j { 1.2 } else { 0.4 });
        let x = &lam * &f;
        let spec = small_spec(n, t_len, 2, 2, 1);
        let mut params = init_pca(&x, &spec, &vec![false; n]).unwrap();
        // Force near-noiseless measurement so the smoother is exact.
        params.lambda = lam.clone();
        params.r_diag = DVector::from_element(n, 1e-10);
        let (stats_out, _) = e_step(&params, &spec, &x).unwrap();
        let mut expected = DMatrix::zeros(n, 2);
        for t in 2..t_len {
            for i in 0..n {
                for j in 0..2 {
                    expected[(i, j)] += x[(i, t)] * f[(j, t)];
                }
            }
        }
        let rel = (&stats_out.sxf - &expected).abs().max() / expected.abs().max();
        assert!(rel < 1e-6, "relative deviation {rel}");
    }

    #[test]
    fn m_step_reduces_to_ols_with_known_factors() {
        // Hand-built statistics with zero state covariances: the loading
        // update must equal per-equation least squares.
        let n = 3;
        let r = 2;
        let t_len = 60;
        let mut rng = StdRng::seed_from_u64(6);
        let f = DMatrix::from_fn(r, t_len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lam_true = DMatrix::from_row_slice(n, r, &[1.0, 0.5, -0.3, 0.8, 0.2, -1.1]);
        let x = &lam_true * &f;

        let spec = small_spec(n, t_len, r, 2, 1);
        let mut sff = DMatrix::zeros(r, r);
        let mut sxf = DMatrix::zeros(n, r);
        let mut sxx = DVector::zeros(n);
        for t in 0..t_len {
            let ft = f.column(t);
            sff += ft * ft.transpose();
            for i in 0..n {
                sxx[i] += x[(i, t)] * x[(i, t)];
                for j in 0..r {
                    sxf[(i, j)] += x[(i, t)] * f[(j, t)];
                }
            }
        }
        let mut sfg = DMatrix::zeros(r, 2 * r);
        let mut sgg = DMatrix::zeros(2 * r, 2 * r);
        let mut sff_var = DMatrix::zeros(r, r);
        for t in 1..t_len {
            let ft = f.column(t).into_owned();
            let mut g = DVector::zeros(2 * r);
            for j in 0..r {
                g[j] = f[(j, t - 1)];
                g[r + j] = if t >= 2 { f[(j, t - 2)] } else { 0.0 };
            }
            sff_var += &ft * ft.transpose();
            sfg += &ft * g.transpose();
            sgg += &g * g.transpose();
        }
        let stats_in = SufficientStats {
            sff,
            sxf,
            sxx,
            sff_var,
            sfg,
            sgg,
            sdxi: DVector::zeros(n),
            t_obs: t_len,
            t_var: t_len - 1,
        };
        let prev = Params {
            lambda: DMatrix::zeros(n, r),
            a1: DMatrix::zeros(r, r),
            a2: DMatrix::zeros(r, r),
            h: DMatrix::identity(r, 2),
            r_diag: DVector::from_element(n, 1.0),
            rho: vec![false; n],
            obs_floor: DVector::from_element(n, 1e-4),
        };
        let (updated, _) = m_step(&stats_in, &spec, &prev, &TieGroups::none()).unwrap();
        // Exact data: OLS recovers the true loadings.
        assert!((&updated.lambda - &lam_true).abs().max() < 1e-8);
        // Residual variance collapses to (numerical) zero.
        assert!(updated.r_diag.max() < 1e-8);
    }

    #[test]
    fn tie_group_with_equal_weights_averages_the_rows() {
        let n = 2;
        let r = 1;
        // sff = 2, sxf rows 3 and 5: unconstrained rows are 1.5 and 2.5,
        // the pooled solution with equal weights is their average 2.0.
        let stats_in = SufficientStats {
            sff: DMatrix::from_element(1, 1, 2.0),
            sxf: DMatrix::from_row_slice(2, 1, &[3.0, 5.0]),
            sxx: DVector::from_element(2, 10.0),
            sff_var: DMatrix::from_element(1, 1, 2.0),
            sfg: DMatrix::from_row_slice(1, 2, &[0.5, 0.2]),
            sgg: DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 2.0]),
            sdxi: DVector::zeros(2),
            t_obs: 50,
            t_var: 49,
        };
        let prev = Params {
            lambda: DMatrix::zeros(n, r),
            a1: DMatrix::zeros(r, r),
            a2: DMatrix::zeros(r, r),
            h: DMatrix::from_element(1, 1, 1.0),
            r_diag: DVector::from_element(n, 0.7),
            rho: vec![false; n],
            obs_floor: DVector::from_element(n, 1e-4),
        };
        let ties = TieGroups { groups: vec![vec![0, 1]] };
        let spec = ModelSpec {
            n,
            t_len: 50,
            r: 1,
            q: 1,
            d: 0,
            ..small_spec(4, 50, 2, 2, 1)
        };
        let (updated, _) = m_step(&stats_in, &spec, &prev, &ties).unwrap();
        assert!((updated.lambda[(0, 0)] - 2.0).abs() < 1e-12);
        // Rows are bitwise identical.
        assert_eq!(updated.lambda[(0, 0)].to_bits(), updated.lambda[(1, 0)].to_bits());
    }

    #[test]
    fn var_residual_covariance_matches_direct_computation() {
        // Known factors, zero covariances: H H' from the M-step equals the
        // sample residual covariance of the least-squares VAR fit.
        let r = 2;
        let t_len = 200;
        let mut rng = StdRng::seed_from_u64(8);
        let a_true = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let mut f = DMatrix::zeros(r, t_len);
        for t in 1..t_len {
            let prev = f.column(t - 1).into_owned();
            let innov = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
            f.set_column(t, &(&a_true * prev + innov));
        }
        let mut sfg = DMatrix::zeros(r, 2 * r);
        let mut sgg = DMatrix::zeros(2 * r, 2 * r);
        let mut sff_var = DMatrix::zeros(r, r);
        for t in 1..t_len {
            let ft = f.column(t).into_owned();
            let mut g = DVector::zeros(2 * r);
            for j in 0..r {
                g[j] = f[(j, t - 1)];
                g[r + j] = if t >= 2 { f[(j, t - 2)] } else { 0.0 };
            }
            sff_var += &ft * ft.transpose();
            sfg += &ft * g.transpose();
            sgg += &g * g.transpose();
        }
        let spec = small_spec(4, t_len, r, 2, 1);
        let prev = Params {
            lambda: DMatrix::zeros(4, r),
            a1: DMatrix::zeros(r, r),
            a2: DMatrix::zeros(r, r),
            h: DMatrix::identity(r, 2),
            r_diag: DVector::from_element(4, 1.0),
            rho: vec![false; 4],
            obs_floor: DVector::from_element(4, 1e-4),
        };
        let stats_in = SufficientStats {
            sff: sff_var.clone(),
            sxf: DMatrix::zeros(4, r),
            sxx: DVector::from_element(4, 1.0),
            sff_var: sff_var.clone(),
            sfg: sfg.clone(),
            sgg: sgg.clone(),
            sdxi: DVector::zeros(4),
            t_obs: t_len,
            t_var: t_len - 1,
        };
        let (updated, _) = m_step(&stats_in, &spec, &prev, &TieGroups::none()).unwrap();

        // Direct residual covariance with the same normal equations.
        let coef = &sfg * sgg.clone().try_inverse().unwrap();
        let mut resid_cov = DMatrix::zeros(r, r);
        for t in 1..t_len {
            let ft = f.column(t).into_owned();
            let mut g = DVector::zeros(2 * r);
            for j in 0..r {
                g[j] = f[(j, t - 1)];
                g[r + j] = if t >= 2 { f[(j, t - 2)] } else { 0.0 };
            }
            let resid = &ft - &coef * &g;
            resid_cov += &resid * resid.transpose();
        }
        resid_cov /= (t_len - 1) as f64;
        let hh = &updated.h * updated.h.transpose();
        // A rank-2 square root of a 2 x 2 covariance reproduces it exactly.
        assert!((hh - resid_cov).abs().max() < 1e-8);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_update() {
        let cfg = DgpConfig::new(12, 60, 2, 2, 1, 21);
        let (x, _) = gen_dfm(&cfg).unwrap();
        let spec = ModelSpec {
            em_tol: f64::INFINITY,
            ..small_spec(12, 60, 2, 2, 1)
        };
        let rho = vec![false; 12];
        let (state, _) = run_em(&x, &spec, &rho, &TieGroups::none()).unwrap();
        assert!(state.converged);
        assert_eq!(state.iterations, 1);
        assert_eq!(state.loglik_path.len(), 2);

        // The accepted parameters equal exactly one EM update of the
        // initialization.
        let init = init_pca(&x, &spec, &rho).unwrap();
        let (stats_out, _) = e_step(&init, &spec, &x).unwrap();
        let (one_update, _) = m_step(&stats_out, &spec, &init, &TieGroups::none()).unwrap();
        assert!((&state.params.lambda - &one_update.lambda).abs().max() < 1e-12);
        assert!((&state.params.a1 - &one_update.a1).abs().max() < 1e-12);
    }

    #[test]
    fn likelihood_is_monotone_and_fit_recovers_factor_space() {
        let cfg = DgpConfig::new(40, 120, 4, 2, 1, 33);
        let (x, truth) = gen_dfm(&cfg).unwrap();
        let spec = ModelSpec {
            em_max_iter: 150,
            ..small_spec(40, 120, 4, 2, 1)
        };
        let (state, est) = run_em(&x, &spec, &vec![false; 40], &TieGroups::none()).unwrap();
        for w in state.loglik_path.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "decrease: {} -> {}", w[0], w[1]);
        }
        let f_est = DMatrix::from_fn(120, 4, |t, j| est.f_smoothed[(t, j)]);
        let f_true = truth.f_static.transpose();
        let r2 = metrics::trace_r2(&f_true, &f_est);
        assert!(r2 > 0.9, "trace R^2 = {r2}");
        // chi + xi = x exactly.
        assert!((&est.chi + &est.xi - &x).abs().max() < 1e-12);
    }

    #[test]
    fn i1_idiosyncratics_are_tracked_by_state() {
        let mut cfg = DgpConfig::new(30, 150, 2, 2, 1, 44);
        cfg.i1_share = 0.3;
        let (x, truth) = gen_dfm(&cfg).unwrap();
        let spec = ModelSpec {
            em_max_iter: 80,
            ..small_spec(30, 150, 2, 2, 1)
        };
        let (state, est) = run_em(&x, &spec, &truth.rho, &TieGroups::none()).unwrap();
        assert!(state.loglik_path.len() >= 2);
        // Idiosyncratic estimates of I(1) series correlate with the truth.
        let i1 = truth.rho.iter().position(|&b| b).unwrap();
        let est_xi: Vec<f64> = (0..150).map(|t| est.xi[(i1, t)]).collect();
        let true_xi: Vec<f64> = (0..150).map(|t| truth.xi[(i1, t)]).collect();
        let corr = metrics::correlation(&est_xi, &true_xi);
        assert!(corr > 0.7, "correlation {corr}");
    }
}
