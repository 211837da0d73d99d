//! Synthetic panels with known ground truth, and a brute-force
//! joint-Gaussian oracle for verifying the filtering recursions.
//!
//! The generator builds the dynamic factors as `f_t = Psi tau_t + gamma_t`
//! with `q - d` independent random-walk trends `tau_t` and a stationary
//! VAR(1) `gamma_t`, stacks them into static factors, applies random
//! loadings, and adds AR(1) or random-walk idiosyncratic noise.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kalman::{initial_covariance, InitialState};
use crate::model::{Params, StateSpace};
use crate::stats;

/// Configuration of the synthetic data-generating process.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub n: usize,
    pub t_len: usize,
    /// Static factor count; must be `q` (no loading lag) or `2q` (one lag).
    pub r: usize,
    pub q: usize,
    pub d: usize,
    /// Standard deviation of the loading entries.
    pub loading_scale: f64,
    /// AR coefficient of the stationary idiosyncratic components.
    pub idio_ar: f64,
    /// Fraction of series with a random-walk idiosyncratic component.
    pub i1_share: f64,
    /// Per-series Var(d chi) / Var(d xi).
    pub snr: f64,
    /// Spectral radius of the stationary VAR(1) part of the factors.
    pub gamma_ar: f64,
    /// Scale of the stationary-part innovations relative to the trend
    /// innovations.
    pub gamma_scale: f64,
    /// Apply a random invertible rotation to the static factors.
    pub random_k: bool,
    /// Draw loadings as sqrt(n) times orthonormal columns instead of iid
    /// Gaussians.
    pub orthonormal_loadings: bool,
    /// Use a diagonal stationary VAR so every dynamic shock carries
    /// comparable spectral mass.
    pub balanced_shocks: bool,
    /// Lagged loadings transmit only the trend part: the static factors
    /// become `(f_t, tau_{t-1})` of dimension `q + (q - d)`.
    pub lag_trend_only: bool,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(n: usize, t_len: usize, r: usize, q: usize, d: usize, seed: u64) -> Self {
        DgpConfig {
            n,
            t_len,
            r,
            q,
            d,
            loading_scale: 1.0,
            idio_ar: 0.5,
            i1_share: 0.0,
            snr: 2.0,
            gamma_ar: 0.7,
            gamma_scale: 1.0,
            random_k: false,
            orthonormal_loadings: false,
            balanced_shocks: false,
            lag_trend_only: false,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lag_trend_only {
            if self.r != self.q + (self.q - self.d) {
                return Err(Error::Invalid(format!(
                    "with lag_trend_only, r must be q + (q - d), got r = {}, q = {}, d = {}",
                    self.r, self.q, self.d
                )));
            }
        } else if self.r != self.q && self.r != 2 * self.q {
            return Err(Error::Invalid(format!(
                "r must be q or 2q for the generator, got r = {}, q = {}",
                self.r, self.q
            )));
        }
        if self.d == 0 || self.d >= self.q {
            return Err(Error::Invalid("0 < d < q required".into()));
        }
        if self.r > self.n || self.t_len < 4 {
            return Err(Error::Invalid("need r <= n and T >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.i1_share) || !(self.snr > 0.0) {
            return Err(Error::Invalid("i1_share in [0,1] and snr > 0 required".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows about the panel it produced.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Static factors, `r x T`.
    pub f_static: DMatrix<f64>,
    /// Loadings, `n x r`.
    pub lambda: DMatrix<f64>,
    /// Common trends, `(q - d) x T`.
    pub tau: DMatrix<f64>,
    /// Stationary factor part, `q x T`.
    pub gamma: DMatrix<f64>,
    /// Common cycles `psi_perp' gamma`, `d x T`.
    pub cycles: DMatrix<f64>,
    /// Trend directions, `q x (q - d)`, orthonormal.
    pub psi: DMatrix<f64>,
    /// Cycle directions, `q x d`, orthonormal, orthogonal to `psi`.
    pub psi_perp: DMatrix<f64>,
    /// Common components, `n x T`.
    pub chi: DMatrix<f64>,
    /// Idiosyncratic components, `n x T`.
    pub xi: DMatrix<f64>,
    /// Unit-root flags of the idiosyncratic components.
    pub rho: Vec<bool>,
    /// Rotation applied to the stacked dynamic factors (identity unless
    /// `random_k`).
    pub kmat: DMatrix<f64>,
}

fn stream(seed: u64, id: u64) -> StdRng {
    StdRng::seed_from_u64(seed ^ 0x9E3779B97F4A7C15u64.wrapping_mul(id.wrapping_add(1)))
}

fn gaussian_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal `k x k` matrix from the QR of a Gaussian draw.
fn random_orthogonal(rng: &mut StdRng, k: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, k, k);
    let qr = g.qr();
    qr.q()
}

/// Generates a synthetic panel. Returns the `n x T` data matrix and the
/// ground truth behind it.
pub fn gen_dfm(cfg: &DgpConfig) -> Result<(DMatrix<f64>, GroundTruth)> {
    cfg.validate()?;
    let (n, t_len, r, q, d) = (cfg.n, cfg.t_len, cfg.r, cfg.q, cfg.d);
    let n_trends = q - d;

    let orth = random_orthogonal(&mut stream(cfg.seed, 1), q);
    let psi = orth.columns(0, n_trends).into_owned();
    let psi_perp = orth.columns(n_trends, d).into_owned();

    // Trends: independent random walks with unit-variance innovations,
    // started at zero. We keep one pre-sample value for the loading lag.
    let mut rng_tau = stream(cfg.seed, 2);
    let mut tau_full = DMatrix::zeros(n_trends, t_len + 1);
    for t in 1..=t_len {
        for j in 0..n_trends {
            tau_full[(j, t)] = tau_full[(j, t - 1)] + rng_tau.sample::<f64, _>(StandardNormal);
        }
    }

    // Stationary part: VAR(1) with controlled spectral radius.
    let mut rng_gamma = stream(cfg.seed, 3);
    let bmat = if cfg.balanced_shocks {
        DMatrix::from_diagonal(&DVector::from_element(q, cfg.gamma_ar))
    } else {
        let bmat_raw = gaussian_matrix(&mut rng_gamma, q, q);
        let radius = stats::spectral_radius(&bmat_raw).max(1e-12);
        &bmat_raw * (cfg.gamma_ar / radius)
    };
    let burn = 100;
    let mut gamma_full = DMatrix::zeros(q, t_len + 1);
    let mut state = DVector::zeros(q);
    for t in 0..burn + t_len + 1 {
        let innov =
            DVector::from_fn(q, |_, _| cfg.gamma_scale * rng_gamma.sample::<f64, _>(StandardNormal));
        state = &bmat * &state + innov;
        if t >= burn {
            gamma_full.set_column(t - burn, &state);
        }
    }

    // f over t = 0..T (column 0 is the pre-sample value).
    let f_full = &psi * &tau_full + &gamma_full;

    let kmat = if cfg.random_k {
        // Invertible with probability one; reject near-singular draws.
        let mut rng_k = stream(cfg.seed, 4);
        loop {
            let k = gaussian_matrix(&mut rng_k, r, r);
            if k.determinant().abs() > 1e-3 {
                break k;
            }
        }
    } else {
        DMatrix::identity(r, r)
    };

    let mut f_static = DMatrix::zeros(r, t_len);
    for t in 0..t_len {
        let mut stacked = DVector::zeros(r);
        for j in 0..q {
            stacked[j] = f_full[(j, t + 1)];
        }
        if cfg.lag_trend_only {
            for j in 0..n_trends {
                stacked[q + j] = tau_full[(j, t)];
            }
        } else if r == 2 * q {
            for j in 0..q {
                stacked[q + j] = f_full[(j, t)];
            }
        }
        f_static.set_column(t, &(&kmat * stacked));
    }

    let lambda = if cfg.orthonormal_loadings {
        let g = gaussian_matrix(&mut stream(cfg.seed, 5), n, r);
        let q_full = g.qr().q();
        q_full.columns(0, r).into_owned() * (n as f64).sqrt() * cfg.loading_scale
    } else {
        gaussian_matrix(&mut stream(cfg.seed, 5), n, r) * cfg.loading_scale
    };
    let chi = &lambda * &f_static;

    // Idiosyncratic components: which series are I(1), then raw draws,
    // then per-series scaling to the target signal-to-noise ratio.
    let mut rng_assign = stream(cfg.seed, 6);
    let n1_target = (cfg.i1_share * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng_assign.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut rho = vec![false; n];
    for &i in idx.iter().take(n1_target) {
        rho[i] = true;
    }

    let mut rng_idio = stream(cfg.seed, 7);
    let mut xi = DMatrix::zeros(n, t_len);
    let dchi_vars: Vec<f64> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..t_len).map(|t| chi[(i, t)]).collect();
            stats::variance(&stats::diff(&row))
        })
        .collect();
    let mean_dchi = stats::mean(&dchi_vars).max(1e-12);
    for i in 0..n {
        let mut raw = vec![0.0f64; t_len];
        if rho[i] {
            let mut acc = 0.0;
            for t in 0..t_len {
                acc += rng_idio.sample::<f64, _>(StandardNormal);
                raw[t] = acc;
            }
        } else {
            let mut prev = 0.0;
            for _ in 0..50 {
                prev = cfg.idio_ar * prev + rng_idio.sample::<f64, _>(StandardNormal);
            }
            for t in 0..t_len {
                prev = cfg.idio_ar * prev + rng_idio.sample::<f64, _>(StandardNormal);
                raw[t] = prev;
            }
        }
        let target = dchi_vars[i].max(0.05 * mean_dchi) / cfg.snr;
        let actual = stats::variance(&stats::diff(&raw)).max(1e-12);
        let scale = (target / actual).sqrt();
        for t in 0..t_len {
            xi[(i, t)] = scale * raw[t];
        }
    }

    let x = &chi + &xi;
    let tau = tau_full.columns(1, t_len).into_owned();
    let gamma = gamma_full.columns(1, t_len).into_owned();
    let cycles = psi_perp.transpose() * &gamma;

    Ok((
        x,
        GroundTruth {
            f_static,
            lambda,
            tau,
            gamma,
            cycles,
            psi,
            psi_perp,
            chi,
            xi,
            rho,
            kmat,
        },
    ))
}

/// Parameters whose factor VAR is a cointegrated VAR(1) in levels with
/// exactly `q - d` unit roots, mapped into the stacked representation
/// (`r = 2q`, identity rotation). Useful for exercising the unit-root
/// structure of the assembled transition matrix.
pub fn gen_cointegrated_params(n: usize, q: usize, d: usize, rho: Vec<bool>, seed: u64) -> Params {
    let r = 2 * q;
    let mut rng = stream(seed, 11);
    // Pi = I - b diag(kappa) b' has q - d unit eigenvalues and d eigenvalues
    // 1 - kappa_j strictly inside the unit circle.
    let orth = random_orthogonal(&mut rng, q);
    let b = orth.columns(0, d).into_owned();
    let kappas = DVector::from_fn(d, |_, _| 0.3 + 0.5 * rng.gen::<f64>());
    let pi = DMatrix::identity(q, q) - &b * DMatrix::from_diagonal(&kappas) * b.transpose();

    let mut a1 = DMatrix::zeros(r, r);
    a1.view_mut((0, 0), (q, q)).copy_from(&pi);
    for j in 0..q {
        a1[(q + j, j)] = 1.0;
    }
    let a2 = DMatrix::zeros(r, r);
    let mut h = DMatrix::zeros(r, q);
    for j in 0..q {
        h[(j, j)] = 1.0;
    }
    let lambda = gaussian_matrix(&mut rng, n, r);
    Params {
        lambda,
        a1,
        a2,
        h,
        r_diag: DVector::from_element(n, 0.5),
        rho,
        obs_floor: DVector::from_element(n, 1e-4),
    }
}

/// Exact conditional moments of the states given all observations, computed
/// by assembling the joint Gaussian of states and data and conditioning by
/// block factorization. Dense: requires `T * m <= 2000`.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    /// Smoothed means, `T x m`.
    pub means: DMatrix<f64>,
    /// Smoothed covariances per period.
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(state_t, state_{t-1} | data)`; entry 0 is zero.
    pub lag1: Vec<DMatrix<f64>>,
    /// Joint Gaussian log-density of the observations.
    pub loglik: f64,
}

pub fn oracle_conditional_moments(
    ss: &StateSpace,
    x: &DMatrix<f64>,
    init: &InitialState,
) -> Result<OracleMoments> {
    let m = ss.state_dim();
    let n = ss.n_obs();
    let t_len = x.ncols();
    if t_len * m > 2000 {
        return Err(Error::Invalid(format!(
            "oracle limited to T * m <= 2000, got {}",
            t_len * m
        )));
    }
    if x.nrows() != n {
        return Err(Error::dim("data", format!("expected {} rows", n)));
    }
    let (m0, p0) = initial_covariance(ss, init)?;

    // Marginal state covariances V_t and means mu_t, t = 1..T. The init
    // moments are the prior of the first state, matching the filter.
    let a = &ss.tmat;
    let mut v = Vec::with_capacity(t_len);
    let mut mu = Vec::with_capacity(t_len);
    v.push(p0.clone());
    mu.push(m0.clone());
    for _ in 1..t_len {
        let mut vt = a * v.last().unwrap() * a.transpose() + &ss.qmat;
        stats::symmetrize(&mut vt);
        let mut_t = a * mu.last().unwrap();
        v.push(vt);
        mu.push(mut_t);
    }

    // Cross-covariances C(t, s) = A^{t-s} V_s for t >= s.
    let dim_s = t_len * m;
    let mut sig_ss = DMatrix::zeros(dim_s, dim_s);
    for s in 0..t_len {
        let mut block = v[s].clone();
        sig_ss.view_mut((s * m, s * m), (m, m)).copy_from(&block);
        for t in s + 1..t_len {
            block = a * block;
            sig_ss.view_mut((t * m, s * m), (m, m)).copy_from(&block);
            sig_ss
                .view_mut((s * m, t * m), (m, m))
                .copy_from(&block.transpose());
        }
    }

    // Observation covariance and state-observation cross-covariance.
    let dim_y = t_len * n;
    let mut sig_yy = DMatrix::zeros(dim_y, dim_y);
    let mut sig_sy = DMatrix::zeros(dim_s, dim_y);
    for t in 0..t_len {
        for s in 0..t_len {
            let c_ts = sig_ss.view((t * m, s * m), (m, m));
            let mut block = &ss.zmat * c_ts * ss.zmat.transpose();
            if t == s {
                for i in 0..n {
                    block[(i, i)] += ss.hobs[i];
                }
            }
            sig_yy.view_mut((t * n, s * n), (n, n)).copy_from(&block);
            let cross = c_ts * ss.zmat.transpose();
            sig_sy.view_mut((t * m, s * n), (m, n)).copy_from(&cross);
        }
    }

    let mut y_centered = DVector::zeros(dim_y);
    for t in 0..t_len {
        let ey = &ss.zmat * &mu[t];
        for i in 0..n {
            y_centered[t * n + i] = x[(i, t)] - ey[i];
        }
    }

    let chol = sig_yy
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("oracle", "joint observation covariance not PSD"))?;
    let alpha = chol.solve(&y_centered);
    let quad = y_centered.dot(&alpha);
    let mut logdet = 0.0;
    for i in 0..dim_y {
        logdet += 2.0 * chol.l_dirty()[(i, i)].ln();
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5 * (dim_y as f64 * ln_2pi + logdet + quad);

    // Posterior moments of the stacked states.
    let mean_vec = {
        let mut base = DVector::zeros(dim_s);
        for t in 0..t_len {
            base.rows_mut(t * m, m).copy_from(&mu[t]);
        }
        base + &sig_sy * &alpha
    };
    let solved = chol.solve(&sig_sy.transpose()); // dim_y x dim_s
    let post_cov = &sig_ss - &sig_sy * solved;

    let mut means = DMatrix::zeros(t_len, m);
    let mut covs = Vec::with_capacity(t_len);
    let mut lag1 = vec![DMatrix::zeros(m, m); t_len];
    for t in 0..t_len {
        for j in 0..m {
            means[(t, j)] = mean_vec[t * m + j];
        }
        let mut block = post_cov.view((t * m, t * m), (m, m)).into_owned();
        stats::symmetrize(&mut block);
        covs.push(block);
        if t > 0 {
            lag1[t] = post_cov.view((t * m, (t - 1) * m), (m, m)).into_owned();
        }
    }

    Ok(OracleMoments {
        means,
        covs,
        lag1,
        loglik,
    })
}

/// Random small state-space system for oracle comparisons: stable factor
/// block plus optional random-walk states, diagonal observation noise.
pub fn random_system(seed: u64, n: usize, r: usize, n1: usize) -> StateSpace {
    let mut rng = stream(seed, 21);
    let m = 2 * r + n1;
    let a1 = gaussian_matrix(&mut rng, r, r) * 0.35;
    let a2 = gaussian_matrix(&mut rng, r, r) * 0.15;
    let mut tmat = DMatrix::zeros(m, m);
    tmat.view_mut((0, 0), (r, r)).copy_from(&a1);
    tmat.view_mut((0, r), (r, r)).copy_from(&a2);
    for i in 0..r {
        tmat[(r + i, i)] = 1.0;
    }
    for k in 0..n1 {
        tmat[(2 * r + k, 2 * r + k)] = 1.0;
    }
    let q_shocks = r.max(1);
    let h = gaussian_matrix(&mut rng, r, q_shocks);
    let mut qmat = DMatrix::zeros(m, m);
    let hh = &h * h.transpose();
    qmat.view_mut((0, 0), (r, r)).copy_from(&hh);
    for k in 0..n1 {
        qmat[(2 * r + k, 2 * r + k)] = 0.2 + rng.gen::<f64>();
    }
    let mut zmat = gaussian_matrix(&mut rng, n, m);
    for i in 0..n {
        for k in 0..n1 {
            zmat[(i, 2 * r + k)] = if i == k { 1.0 } else { 0.0 };
        }
    }
    let hobs = DVector::from_fn(n, |_, _| 0.3 + rng.gen::<f64>());
    let i1_state = (0..n)
        .map(|i| if i < n1 { Some(2 * r + i) } else { None })
        .collect();
    StateSpace {
        tmat,
        zmat,
        qmat,
        hobs,
        r,
        n1,
        i1_state,
    }
}

/// Simulates observations from a state space with seeded Gaussian shocks,
/// starting from the given initial state draw.
pub fn simulate_from_state_space(
    ss: &StateSpace,
    t_len: usize,
    init_state: &DVector<f64>,
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = stream(seed, 31);
    let m = ss.state_dim();
    let n = ss.n_obs();
    // Draw state innovations through a factor of Q (eigen square root).
    let (vals, vecs) = stats::sorted_symmetric_eigen(&ss.qmat);
    let sqrt_q = &vecs * DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    let mut x = DMatrix::zeros(n, t_len);
    let mut state = init_state.clone();
    for t in 0..t_len {
        let eta = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        state = &ss.tmat * &state + &sqrt_q * eta;
        for i in 0..n {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            x[(i, t)] = ss.zmat.row(i).transpose().dot(&state) + ss.hobs[i].sqrt() * noise;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{kf_forward, InitialState};
    use crate::model::{build_state_space, unit_root_count, ModelSpec};

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = DgpConfig::new(8, 40, 4, 2, 1, 7);
        let (x1, _) = gen_dfm(&cfg).unwrap();
        let (x2, _) = gen_dfm(&cfg).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn zero_idiosyncratic_variance_gives_reduced_rank() {
        let mut cfg = DgpConfig::new(10, 60, 4, 2, 1, 3);
        cfg.snr = 1e12; // effectively no idiosyncratic noise
        let (x, _) = gen_dfm(&cfg).unwrap();
        // Covariance across time slices has numerical rank <= r.
        let xc = &x * x.transpose() / 60.0;
        let (vals, _) = crate::stats::sorted_symmetric_eigen(&xc);
        assert!(vals[4] / vals[0] < 1e-8, "rank leak: {:?}", &vals.as_slice()[..6]);
    }

    #[test]
    fn single_trend_long_run_eigenvalue_diverges_with_t() {
        // d = q - 1 leaves one trend; T^{-2} sum f f' should have one
        // eigenvalue growing with T while the others shrink.
        let ratio = |t_len: usize| {
            let cfg = DgpConfig::new(6, t_len, 2, 2, 1, 11);
            let (_, truth) = gen_dfm(&cfg).unwrap();
            let f = &truth.f_static;
            let s = f * f.transpose() / (t_len as f64 * t_len as f64);
            let (vals, _) = crate::stats::sorted_symmetric_eigen(&s);
            vals[0] / vals[1].max(1e-300)
        };
        assert!(ratio(800) > ratio(200), "trend eigenvalue does not separate");
    }

    #[test]
    fn cointegrated_params_have_expected_unit_roots() {
        let q = 3;
        let d = 2;
        let rho = vec![true, false, true, false, false, false];
        let params = gen_cointegrated_params(6, q, d, rho.clone(), 5);
        let spec = ModelSpec::new(6, 50, 2 * q, q, d).unwrap();
        let ss = build_state_space(&params, &spec).unwrap();
        let n1 = rho.iter().filter(|&&b| b).count();
        assert_eq!(unit_root_count(&ss, 1e-8), (q - d) + n1);
    }

    #[test]
    fn oracle_matches_closed_form_scalar_filter() {
        // Scalar steady-state model: the oracle's implied filtered marginal
        // at the last period must match the Kalman filter.
        let ss = StateSpace {
            tmat: DMatrix::from_element(1, 1, 1.0),
            zmat: DMatrix::from_element(1, 1, 1.0),
            qmat: DMatrix::from_element(1, 1, 1.0),
            hobs: DVector::from_element(1, 1.0),
            r: 0,
            n1: 1,
            i1_state: vec![Some(0)],
        };
        let x = DMatrix::from_row_slice(1, 8, &[0.3, -0.1, 0.5, 1.0, 0.2, -0.4, 0.8, 0.1]);
        let init = InitialState::Explicit {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 4.0),
        };
        let filter = kf_forward(&ss, &x, &init).unwrap();
        let oracle = oracle_conditional_moments(&ss, &x, &init).unwrap();
        // Oracle conditions on all data; at t = T smoothing equals filtering.
        assert!((oracle.means[(7, 0)] - filter.f_filt[(7, 0)]).abs() < 1e-10);
        assert!((oracle.covs[7][(0, 0)] - filter.p_filt[7][(0, 0)]).abs() < 1e-10);
        assert!((oracle.loglik - filter.loglik).abs() < 1e-10);
    }

    #[test]
    fn oracle_posterior_covariances_are_symmetric_psd() {
        for seed in 0..5 {
            let ss = random_system(seed, 3, 1, 1);
            let x = simulate_from_state_space(&ss, 10, &DVector::zeros(ss.state_dim()), seed);
            let init = InitialState::Explicit {
                mean: DVector::zeros(ss.state_dim()),
                cov: DMatrix::identity(ss.state_dim(), ss.state_dim()) * 3.0,
            };
            let oracle = oracle_conditional_moments(&ss, &x, &init).unwrap();
            for cov in &oracle.covs {
                assert!((cov - cov.transpose()).norm() < 1e-10);
                let (vals, _) = crate::stats::sorted_symmetric_eigen(cov);
                assert!(vals[vals.len() - 1] > -1e-9, "negative eigenvalue {vals:?}");
            }
        }
    }

    #[test]
    fn noise_free_identity_observation_recovers_states() {
        let m = 2;
        let ss = StateSpace {
            tmat: DMatrix::from_diagonal(&DVector::from_element(m, 0.5)),
            zmat: DMatrix::identity(m, m),
            qmat: DMatrix::identity(m, m),
            hobs: DVector::from_element(m, 1e-10),
            r: 1,
            n1: 0,
            i1_state: vec![None; m],
        };
        let x = DMatrix::from_fn(m, 6, |i, t| (t as f64 + 1.0) * 0.1 + i as f64);
        let init = InitialState::Explicit {
            mean: DVector::zeros(m),
            cov: DMatrix::identity(m, m),
        };
        let oracle = oracle_conditional_moments(&ss, &x, &init).unwrap();
        for t in 0..6 {
            for i in 0..m {
                assert!((oracle.means[(t, i)] - x[(i, t)]).abs() < 1e-6);
            }
        }
    }
}
