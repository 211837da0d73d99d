//! Model dimensions, parameter containers, and the augmented state-space
//! matrices consumed by the filtering module.
//!
//! The state vector stacks the static factors, their first lag, and one
//! random-walk state per series whose idiosyncratic component is I(1):
//! `[F_t; F_{t-1}; xi(1)_t]`, of dimension `m = 2r + n1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dimensions and algorithm settings of a model fit.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Number of observed series.
    pub n: usize,
    /// Number of time periods.
    pub t_len: usize,
    /// Number of static factors.
    pub r: usize,
    /// Number of dynamic shocks, `q <= r`.
    pub q: usize,
    /// Cointegration deficit among the dynamic factors; `q - d` is the
    /// number of common trends. Must satisfy `0 < d < q`.
    pub d: usize,
    /// Order of the factor VAR. Fixed at 2.
    pub var_order: usize,
    /// Diffuse initialization scale for nonstationary states.
    pub diffuse_scale: f64,
    /// EM stopping threshold on the symmetric relative likelihood change.
    pub em_tol: f64,
    /// Maximum number of EM iterations.
    pub em_max_iter: usize,
    /// Minimum number of likelihood evaluations before the stopping rule
    /// may fire.
    pub em_min_iter: usize,
    /// Measurement-variance floor for I(1)-idiosyncratic series, as a
    /// fraction of the sample variance of the differenced series.
    pub i1_floor_frac: f64,
}

impl ModelSpec {
    /// Spec with default algorithm settings. Dimension invariants are
    /// checked immediately.
    pub fn new(n: usize, t_len: usize, r: usize, q: usize, d: usize) -> Result<Self> {
        let spec = ModelSpec {
            n,
            t_len,
            r,
            q,
            d,
            var_order: 2,
            diffuse_scale: 1e7,
            em_tol: 1e-6,
            em_max_iter: 500,
            em_min_iter: 2,
            i1_floor_frac: 1e-4,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_len == 0 {
            return Err(Error::Invalid("n and T must be positive".into()));
        }
        if self.r == 0 || self.q == 0 {
            return Err(Error::Invalid("r and q must be positive".into()));
        }
        if self.q > self.r {
            return Err(Error::Invalid(format!("q = {} exceeds r = {}", self.q, self.r)));
        }
        if self.r > self.n {
            return Err(Error::Invalid(format!("r = {} exceeds n = {}", self.r, self.n)));
        }
        if self.d == 0 || self.d >= self.q {
            return Err(Error::Invalid(format!(
                "d = {} must satisfy 0 < d < q = {}",
                self.d, self.q
            )));
        }
        if self.var_order != 2 {
            return Err(Error::Invalid("the factor VAR order is fixed at 2".into()));
        }
        if !(self.diffuse_scale > 0.0 && self.em_tol > 0.0 && self.i1_floor_frac > 0.0) {
            return Err(Error::Invalid(
                "diffuse_scale, em_tol and i1_floor_frac must be positive".into(),
            ));
        }
        if self.em_max_iter == 0 {
            return Err(Error::Invalid("em_max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Non-fatal consistency flags, e.g. `r != 2q` which is inconsistent
    /// with one lag of dynamic loadings.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.r != 2 * self.q {
            w.push(format!(
                "r = {} differs from q * (s + 1) = {} implied by one loading lag",
                self.r,
                2 * self.q
            ));
        }
        w
    }
}

/// Model parameters.
///
/// `r_diag` holds the idiosyncratic innovation variances: for `rho_i = 0`
/// the innovation is the idiosyncratic component itself (white noise), for
/// `rho_i = 1` it drives the random-walk state. The observation equation of
/// an I(1)-idiosyncratic series instead carries the fixed measurement-noise
/// floor `obs_floor`, which keeps the innovation covariance invertible and
/// is not an estimated parameter.
#[derive(Debug, Clone)]
pub struct Params {
    /// Loadings, `n x r`.
    pub lambda: DMatrix<f64>,
    /// First VAR coefficient matrix, `r x r`.
    pub a1: DMatrix<f64>,
    /// Second VAR coefficient matrix, `r x r`.
    pub a2: DMatrix<f64>,
    /// Shock loading, `r x q`.
    pub h: DMatrix<f64>,
    /// Idiosyncratic innovation variances, length `n`.
    pub r_diag: DVector<f64>,
    /// Unit-root flag per series.
    pub rho: Vec<bool>,
    /// Measurement-variance floor per series (used when `rho_i = 1`).
    pub obs_floor: DVector<f64>,
}

impl Params {
    pub fn n_i1(&self) -> usize {
        self.rho.iter().filter(|&&b| b).count()
    }
}

/// Outcome of [`validate_params`]: every violated invariant, plus non-fatal
/// warnings. Empty `violations` means the parameters are valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every parameter invariant and reports all violations instead of
/// failing on the first one.
pub fn validate_params(params: &Params, spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let v = &mut report.violations;

    if params.lambda.nrows() != spec.n || params.lambda.ncols() != spec.r {
        v.push(format!(
            "Lambda must be {} x {}, got {} x {}",
            spec.n,
            spec.r,
            params.lambda.nrows(),
            params.lambda.ncols()
        ));
    }
    for (name, m) in [("A1", &params.a1), ("A2", &params.a2)] {
        if m.nrows() != spec.r || m.ncols() != spec.r {
            v.push(format!("{} must be {} x {}", name, spec.r, spec.r));
        }
    }
    if params.h.nrows() != spec.r || params.h.ncols() != spec.q {
        v.push(format!(
            "H must be {} x {}, got {} x {}",
            spec.r,
            spec.q,
            params.h.nrows(),
            params.h.ncols()
        ));
    }
    if params.r_diag.len() != spec.n {
        v.push(format!("R must have length {}", spec.n));
    }
    if params.rho.len() != spec.n {
        v.push(format!("rho must have length {}", spec.n));
    }
    if params.obs_floor.len() != spec.n {
        v.push(format!("obs_floor must have length {}", spec.n));
    }

    let n_common = params.r_diag.len().min(params.rho.len()).min(spec.n);
    for i in 0..n_common {
        let ri = params.r_diag[i];
        if !params.rho[i] && ri <= 0.0 {
            v.push(format!("[R]_{{{i},{i}}} > 0 violated for rho = 0 series {i}"));
        }
        if params.rho[i] {
            if ri < 0.0 {
                v.push(format!("[R]_{{{i},{i}}} >= 0 violated for rho = 1 series {i}"));
            }
            if i < params.obs_floor.len() && params.obs_floor[i] <= 0.0 {
                v.push(format!("observation floor must be positive for rho = 1 series {i}"));
            }
        }
    }

    let finite = params.lambda.iter().all(|x| x.is_finite())
        && params.a1.iter().all(|x| x.is_finite())
        && params.a2.iter().all(|x| x.is_finite())
        && params.h.iter().all(|x| x.is_finite())
        && params.r_diag.iter().all(|x| x.is_finite());
    if !finite {
        v.push("parameters contain non-finite entries".into());
    }

    if params.h.nrows() == spec.r && params.h.ncols() == spec.q && finite {
        let svd = params.h.clone().svd(false, false);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax.max(f64::MIN_POSITIVE))
            .count();
        if rank < spec.q {
            v.push(format!("H must have full column rank {}, got rank {}", spec.q, rank));
        }
    }

    report.warnings.extend(spec.warnings());
    report
}

/// State-space matrices of the augmented model.
#[derive(Debug, Clone)]
pub struct StateSpace {
    /// Transition matrix, `m x m`.
    pub tmat: DMatrix<f64>,
    /// Observation matrix, `n x m`.
    pub zmat: DMatrix<f64>,
    /// State-innovation covariance, `m x m` (rank `q + n1`).
    pub qmat: DMatrix<f64>,
    /// Observation-noise variances (diagonal), length `n`.
    pub hobs: DVector<f64>,
    /// Number of static factors.
    pub r: usize,
    /// Number of I(1) idiosyncratic states.
    pub n1: usize,
    /// For each series, the state index of its random-walk component.
    pub i1_state: Vec<Option<usize>>,
}

impl StateSpace {
    pub fn state_dim(&self) -> usize {
        2 * self.r + self.n1
    }

    pub fn n_obs(&self) -> usize {
        self.zmat.nrows()
    }

    /// Indices of states that are nonstationary by construction (the
    /// random-walk idiosyncratic block).
    pub fn i1_block_start(&self) -> usize {
        2 * self.r
    }
}

/// Assembles the augmented state-space form from validated parameters.
///
/// Layout: the top-left `2r x 2r` block of the transition matrix is the
/// VAR(2) companion `[[A1, A2], [I, 0]]`; the bottom-right `n1 x n1` block
/// is the identity (random walks). Observation rows carry `lambda_i'` on the
/// `F_t` block plus a unit entry selecting the series' random-walk state
/// when `rho_i = 1`.
pub fn build_state_space(params: &Params, spec: &ModelSpec) -> Result<StateSpace> {
    if params.lambda.nrows() != spec.n || params.lambda.ncols() != spec.r {
        return Err(Error::dim(
            "Lambda",
            format!(
                "expected {} x {}, got {} x {}",
                spec.n,
                spec.r,
                params.lambda.nrows(),
                params.lambda.ncols()
            ),
        ));
    }
    if params.a1.nrows() != spec.r || params.a1.ncols() != spec.r {
        return Err(Error::dim("A1", format!("expected {0} x {0}", spec.r)));
    }
    if params.a2.nrows() != spec.r || params.a2.ncols() != spec.r {
        return Err(Error::dim("A2", format!("expected {0} x {0}", spec.r)));
    }
    if params.h.nrows() != spec.r || params.h.ncols() != spec.q {
        return Err(Error::dim(
            "H",
            format!("expected {} x {}, got {} x {}", spec.r, spec.q, params.h.nrows(), params.h.ncols()),
        ));
    }
    if params.r_diag.len() != spec.n || params.rho.len() != spec.n || params.obs_floor.len() != spec.n
    {
        return Err(Error::dim("R/rho/obs_floor", format!("expected length {}", spec.n)));
    }

    let r = spec.r;
    let n = spec.n;
    let n1 = params.n_i1();
    let m = 2 * r + n1;

    let mut tmat = DMatrix::zeros(m, m);
    tmat.view_mut((0, 0), (r, r)).copy_from(&params.a1);
    tmat.view_mut((0, r), (r, r)).copy_from(&params.a2);
    for i in 0..r {
        tmat[(r + i, i)] = 1.0;
    }
    for k in 0..n1 {
        tmat[(2 * r + k, 2 * r + k)] = 1.0;
    }

    let mut qmat = DMatrix::zeros(m, m);
    let hh = &params.h * params.h.transpose();
    qmat.view_mut((0, 0), (r, r)).copy_from(&hh);

    let mut zmat = DMatrix::zeros(n, m);
    let mut hobs = DVector::zeros(n);
    let mut i1_state = vec![None; n];
    let mut next_state = 2 * r;
    for i in 0..n {
        for j in 0..r {
            zmat[(i, j)] = params.lambda[(i, j)];
        }
        if params.rho[i] {
            zmat[(i, next_state)] = 1.0;
            qmat[(next_state, next_state)] = params.r_diag[i];
            hobs[i] = params.obs_floor[i];
            i1_state[i] = Some(next_state);
            next_state += 1;
        } else {
            hobs[i] = params.r_diag[i];
        }
    }

    Ok(StateSpace {
        tmat,
        zmat,
        qmat,
        hobs,
        r,
        n1,
        i1_state,
    })
}

/// Final estimation output: smoothed states and the implied common and
/// idiosyncratic split of the panel. `chi + xi = x` holds exactly.
#[derive(Debug, Clone)]
pub struct FactorEstimates {
    /// Smoothed state means, `T x m`.
    pub f_smoothed: DMatrix<f64>,
    /// Smoothed state covariances per period.
    pub p_smoothed: Vec<DMatrix<f64>>,
    /// Smoothed lag-one cross-covariances `Cov(state_t, state_{t-1} | data)`.
    /// Entry 0 is a zero matrix.
    pub p_lag1: Vec<DMatrix<f64>>,
    /// Common components `lambda_i' F_t`, `n x T`.
    pub chi: DMatrix<f64>,
    /// Idiosyncratic components `x - chi`, `n x T`.
    pub xi: DMatrix<f64>,
    pub loglik: f64,
}

impl FactorEstimates {
    /// The static-factor block of the smoothed states as an `r x T` matrix.
    pub fn factor_block(&self, r: usize) -> DMatrix<f64> {
        let t = self.f_smoothed.nrows();
        DMatrix::from_fn(r, t, |j, s| self.f_smoothed[(s, j)])
    }
}

/// Number of eigenvalues of `tmat` within `tol` of one.
pub fn unit_root_count(ss: &StateSpace, tol: f64) -> usize {
    ss.tmat
        .complex_eigenvalues()
        .iter()
        .filter(|c| (*c - nalgebra::Complex::new(1.0, 0.0)).norm() < tol)
        .count()
}
