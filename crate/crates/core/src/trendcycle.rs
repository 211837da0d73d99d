//! Non-parametric trend-cycle decomposition of the estimated factors.
//!
//! The common trends are the projections of the factors on the leading
//! eigenvectors of their long-run covariance `S = T^{-2} sum_t F_t F_t'`;
//! the orthogonal complement spans the cointegration space. Within that
//! complement, the common cycles are the projections with maximum innovation
//! variance: a VAR(2) is fitted to the complement process and the cycle
//! directions are the leading eigenvectors of its residual covariance. What
//! remains is a low-variance residual-cycle term caused by the static
//! representation carrying more dimensions than the dynamic shocks.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::preprocess::DetrendResult;
use crate::spectral;
use crate::stats;

/// Trend-cycle split of an `r`-dimensional factor process.
#[derive(Debug, Clone)]
pub struct TcDecomposition {
    /// Trend directions, `r x (q - d)`, orthonormal.
    pub phi1: DMatrix<f64>,
    /// Complement directions, `r x (r - q + d)`, orthonormal, orthogonal
    /// to `phi1`.
    pub phi0: DMatrix<f64>,
    /// Common trends `phi1' F`, `(q - d) x T`.
    pub trends: DMatrix<f64>,
    /// Complement process `phi0' F`, `(r - q + d) x T`.
    pub g: DMatrix<f64>,
    /// Cycle directions within the complement, `(r - q + d) x d`,
    /// orthonormal columns.
    pub hmat: DMatrix<f64>,
    /// Common cycles `hmat' g`, `d x T`.
    pub cycles: DMatrix<f64>,
    /// Residual cycles `g - hmat cycles`, `(r - q + d) x T`.
    pub residual_cycles: DMatrix<f64>,
    /// Long-run covariance eigenvalues (descending).
    pub longrun_eigs: DVector<f64>,
    /// Spectral radius of the fitted VAR(2) companion for `g`.
    pub var_spectral_radius: f64,
    /// Non-fatal diagnostics (eigengap, VAR stability).
    pub warnings: Vec<String>,
}

/// Rotates fitted loadings and factors into the identified coordinates:
/// the loadings become `sqrt(n)` times the leading eigenvectors of the
/// covariance of the differenced common components (first row positive),
/// and the factors become the matching projections of the common
/// components. `Lambda F` is invariant, the estimation's arbitrary
/// invertible factor transformation drops out, and the eigen-identification
/// of trends and cycles operates in a basis that is pinned by the data
/// rather than by the optimizer's path.
pub fn normalize_loadings(
    lambda: &DMatrix<f64>,
    f_block: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = lambda.nrows();
    let r = lambda.ncols();
    let t_len = f_block.ncols();
    if f_block.nrows() != r {
        return Err(Error::dim(
            "factors",
            format!("expected {} rows to match the loadings, got {}", r, f_block.nrows()),
        ));
    }
    if t_len < r + 2 {
        return Err(Error::Invalid("normalization needs T > r + 1".into()));
    }
    let chi = lambda * f_block; // n x T
    let dchi = chi.columns(1, t_len - 1) - chi.columns(0, t_len - 1);
    let mut centered = dchi.clone();
    for i in 0..n {
        let mean = dchi.row(i).sum() / dchi.ncols() as f64;
        for s in 0..dchi.ncols() {
            centered[(i, s)] -= mean;
        }
    }
    let cov = &centered * centered.transpose() / (dchi.ncols() as f64 - 1.0);
    let (vals, vecs) = {
        let mut m = cov;
        stats::symmetrize(&mut m);
        stats::sorted_symmetric_eigen(&m)
    };
    if !(vals[r - 1] > 1e-12 * vals[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::numeric(
            "normalize_loadings",
            "common components are rank deficient; coordinates cannot be normalized",
        ));
    }
    let mut v = vecs.columns(0, r).into_owned();
    stats::sign_fix_by_first_row(&mut v);
    let sqrt_n = (n as f64).sqrt();
    let lambda_star = &v * sqrt_n;
    let f_star = v.transpose() * chi / sqrt_n;
    Ok((lambda_star, f_star))
}

/// `S = T^{-2} sum_t F_t F_t'` over an `r x T` factor matrix.
pub fn longrun_cov(f_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = f_hat.nrows();
    let t_len = f_hat.ncols();
    if t_len < r {
        return Err(Error::Invalid(format!(
            "long-run covariance needs T >= r, got T = {t_len}, r = {r}"
        )));
    }
    let mut s = f_hat * f_hat.transpose() / (t_len as f64 * t_len as f64);
    stats::symmetrize(&mut s);
    Ok(s)
}

/// Leading principal components of the long-run covariance: trend
/// directions and the implied trend series.
pub fn extract_trends(
    f_hat: &DMatrix<f64>,
    q_minus_d: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>)> {
    let r = f_hat.nrows();
    if q_minus_d == 0 || q_minus_d >= r {
        return Err(Error::Invalid(format!(
            "trend count must satisfy 1 <= q - d < r, got {q_minus_d} with r = {r}"
        )));
    }
    let s = longrun_cov(f_hat)?;
    let (vals, mut vecs) = stats::sorted_symmetric_eigen(&s);
    stats::sign_fix_columns(&mut vecs);
    let mut warnings = Vec::new();
    let gap = vals[q_minus_d - 1] - vals[q_minus_d];
    if gap.abs() < 1e-12 {
        warnings.push(format!(
            "eigengap between long-run components {} and {} is below 1e-12; trend rotation is weakly identified",
            q_minus_d,
            q_minus_d + 1
        ));
    }
    let phi1 = vecs.columns(0, q_minus_d).into_owned();
    let trends = phi1.transpose() * f_hat;
    Ok((phi1, trends, warnings))
}

/// Cycle extraction within the complement space: VAR(2) fit of `g`, cycle
/// directions from the leading eigenvectors of the residual covariance.
pub struct CycleExtraction {
    pub g: DMatrix<f64>,
    pub hmat: DMatrix<f64>,
    pub cycles: DMatrix<f64>,
    pub residual_cycles: DMatrix<f64>,
    pub var_fit: stats::Var2Fit,
    pub warnings: Vec<String>,
}

pub fn extract_cycles(
    f_hat: &DMatrix<f64>,
    phi0: &DMatrix<f64>,
    d: usize,
) -> Result<CycleExtraction> {
    let comp_dim = phi0.ncols();
    if d == 0 || d > comp_dim {
        return Err(Error::Invalid(format!(
            "cycle count must satisfy 1 <= d <= {comp_dim}, got {d}"
        )));
    }
    let g = phi0.transpose() * f_hat;
    let var_fit = stats::fit_var2(&g)?;
    let mut warnings = Vec::new();
    if var_fit.spectral_radius >= 1.0 {
        warnings.push(format!(
            "VAR(2) fit of the complement process is unstable (spectral radius {:.4}); proceeding",
            var_fit.spectral_radius
        ));
    }
    let (_, mut vecs) = stats::sorted_symmetric_eigen(&var_fit.sigma);
    stats::sign_fix_columns(&mut vecs);
    let hmat = vecs.columns(0, d).into_owned();
    let cycles = hmat.transpose() * &g;
    let residual_cycles = &g - &hmat * &cycles;
    Ok(CycleExtraction {
        g,
        hmat,
        cycles,
        residual_cycles,
        var_fit,
        warnings,
    })
}

/// Full decomposition of an `r x T` factor matrix given `q` and `d`.
pub fn decompose_factors(f_hat: &DMatrix<f64>, q: usize, d: usize) -> Result<TcDecomposition> {
    let r = f_hat.nrows();
    if !(0 < d && d < q && q <= r) {
        return Err(Error::Invalid(format!(
            "need 0 < d < q <= r, got q = {q}, d = {d}, r = {r}"
        )));
    }
    let n_trends = q - d;
    let s = longrun_cov(f_hat)?;
    let (vals, mut vecs) = stats::sorted_symmetric_eigen(&s);
    stats::sign_fix_columns(&mut vecs);
    let mut warnings = Vec::new();
    if n_trends < r {
        let gap = vals[n_trends - 1] - vals[n_trends];
        if gap.abs() < 1e-12 {
            warnings.push(format!(
                "eigengap between long-run components {} and {} is below 1e-12",
                n_trends,
                n_trends + 1
            ));
        }
    }
    let phi1 = vecs.columns(0, n_trends).into_owned();
    let phi0 = vecs.columns(n_trends, r - n_trends).into_owned();
    let trends = phi1.transpose() * f_hat;
    let cyc = extract_cycles(f_hat, &phi0, d)?;
    warnings.extend(cyc.warnings);

    Ok(TcDecomposition {
        phi1,
        phi0,
        trends,
        g: cyc.g,
        hmat: cyc.hmat,
        cycles: cyc.cycles,
        residual_cycles: cyc.residual_cycles,
        longrun_eigs: vals,
        var_spectral_radius: cyc.var_fit.spectral_radius,
        warnings,
    })
}

impl TcDecomposition {
    /// Rebuilds the factors from the three projection terms. Exact up to
    /// floating-point roundoff.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.phi1 * &self.trends
            + &self.phi0 * &self.hmat * &self.cycles
            + &self.phi0 * &self.residual_cycles
    }
}

/// Per-series decomposition implied by a loading row.
#[derive(Debug, Clone)]
pub struct SeriesComponents {
    pub deterministic: Vec<f64>,
    pub trend: Vec<f64>,
    pub cycle: Vec<f64>,
    pub residual_cycle: Vec<f64>,
    pub idiosyncratic: Vec<f64>,
}

impl SeriesComponents {
    /// Sum of all components: the series on the scale the model saw, plus
    /// the deterministic path when one was removed.
    pub fn total(&self) -> Vec<f64> {
        (0..self.trend.len())
            .map(|t| {
                self.deterministic[t]
                    + self.trend[t]
                    + self.cycle[t]
                    + self.residual_cycle[t]
                    + self.idiosyncratic[t]
            })
            .collect()
    }
}

/// Splits one observed series into deterministic, trend, cycle,
/// residual-cycle, and idiosyncratic parts. `xi_row` is the series'
/// idiosyncratic component from the fit; `detrend` restores the removed
/// deterministic path when provided.
pub fn decompose_variable(
    lambda_row: &RowDVector<f64>,
    tc: &TcDecomposition,
    xi_row: &[f64],
    detrend: Option<&DetrendResult>,
) -> Result<SeriesComponents> {
    let t_len = tc.trends.ncols();
    if xi_row.len() != t_len {
        return Err(Error::dim(
            "xi_row",
            format!("expected length {t_len}, got {}", xi_row.len()),
        ));
    }
    if lambda_row.ncols() != tc.phi1.nrows() {
        return Err(Error::dim(
            "lambda_row",
            format!("expected length {}", tc.phi1.nrows()),
        ));
    }
    let trend_load = lambda_row * &tc.phi1; // 1 x (q-d)
    let cycle_load = lambda_row * &tc.phi0 * &tc.hmat; // 1 x d
    let resid_load = lambda_row * &tc.phi0; // 1 x (r-q+d)

    let mut trend = vec![0.0; t_len];
    let mut cycle = vec![0.0; t_len];
    let mut residual_cycle = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..tc.trends.nrows() {
            trend[t] += trend_load[j] * tc.trends[(j, t)];
        }
        for j in 0..tc.cycles.nrows() {
            cycle[t] += cycle_load[j] * tc.cycles[(j, t)];
        }
        for j in 0..tc.residual_cycles.nrows() {
            residual_cycle[t] += resid_load[j] * tc.residual_cycles[(j, t)];
        }
    }
    let deterministic = match detrend {
        Some(res) => res.path(t_len),
        None => vec![0.0; t_len],
    };
    Ok(SeriesComponents {
        deterministic,
        trend,
        cycle,
        residual_cycle,
        idiosyncratic: xi_row.to_vec(),
    })
}

/// Smoothed spectral densities of the differenced trends, cycles, and
/// residual cycles on a common frequency grid (the diagnostic used to judge
/// whether trends dominate the low frequencies).
#[derive(Debug, Clone)]
pub struct ComponentSpectra {
    pub freqs: Vec<f64>,
    /// One row per trend.
    pub trend: Vec<Vec<f64>>,
    /// One row per cycle.
    pub cycle: Vec<Vec<f64>>,
    /// One row per residual cycle.
    pub residual: Vec<Vec<f64>>,
}

pub fn component_spectra(tc: &TcDecomposition, bandwidth: usize) -> Result<ComponentSpectra> {
    let freqs: Vec<f64> = {
        // A denser display grid than the Fourier grid of the window.
        let k = 64;
        (0..=k).map(|h| std::f64::consts::PI * h as f64 / k as f64).collect()
    };
    let spectra_of = |mat: &DMatrix<f64>| -> Result<Vec<Vec<f64>>> {
        (0..mat.nrows())
            .map(|i| {
                let row: Vec<f64> = (0..mat.ncols()).map(|t| mat[(i, t)]).collect();
                let d = stats::diff(&row);
                spectral::bartlett_spectrum(&d, bandwidth, &freqs)
            })
            .collect()
    };
    let trend = spectra_of(&tc.trends)?;
    let cycle = spectra_of(&tc.cycles)?;
    let residual = spectra_of(&tc.residual_cycles)?;
    Ok(ComponentSpectra {
        freqs,
        trend,
        cycle,
        residual,
    })
}
