//! Data-driven choice of the number of dynamic shocks `q`, common trends
//! `q - d`, static factors `r`, and the I(0)/I(1) classification of each
//! idiosyncratic component.
//!
//! `q` comes from an information criterion on the eigenvalues of the
//! smoothed-periodogram spectral density of the differenced panel, scanned
//! over penalty multipliers and read off the second stability plateau.
//! The trend count uses the eigenvalue-ratio rule on the normalized
//! second-moment matrix of the levels. `r` is matched so the variance share
//! of the static factors lines up with the share of the `q` dynamic ones.
//! Idiosyncratic components are classified by a unit-root test on the
//! residuals from the principal-component fit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::preprocess::RhoMode;
use crate::spectral;
use crate::stats;

/// Eigenvalues of the smoothed-periodogram spectral density per frequency.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    /// Frequencies in `[0, pi]`.
    pub freqs: Vec<f64>,
    /// Circle weights (frequency 0 once, the rest twice).
    pub weights: Vec<f64>,
    /// Top eigenvalues per frequency, descending.
    pub eigs: Vec<Vec<f64>>,
    /// Trace of the density per frequency (total eigenvalue mass).
    pub traces: Vec<f64>,
    pub bandwidth: usize,
}

/// Default lag-window half-width for a sample of length `t_len`.
pub fn default_bandwidth(t_len: usize) -> usize {
    ((0.75 * (t_len as f64).sqrt()).floor() as usize).max(2)
}

/// Penalty for the shock-count criterion.
pub fn hl_penalty(n: usize, t_len: usize, bandwidth: usize) -> f64 {
    let z = (n as f64)
        .min((bandwidth * bandwidth) as f64)
        .min((t_len as f64 / bandwidth as f64).sqrt());
    let z = z.max(2.0);
    z.powf(-0.5) * z.ln()
}

/// Bartlett lag-window spectral density eigenvalues of a differenced panel
/// (series in rows, standardized to unit variance internally).
pub fn spectral_density_eigs(
    dx: &DMatrix<f64>,
    bandwidth: usize,
    top_k: usize,
) -> Result<SpectralEstimate> {
    let t_len = dx.ncols();
    if bandwidth >= t_len {
        return Err(Error::Invalid(format!(
            "bandwidth {bandwidth} must be below the sample length {t_len}"
        )));
    }
    let z = spectral::standardize_rows(dx);
    let freqs = spectral::fourier_grid(bandwidth);
    let weights = spectral::frequency_weights(bandwidth);
    let mut eigs = Vec::with_capacity(freqs.len());
    let mut traces = Vec::with_capacity(freqs.len());
    for &w in &freqs {
        let dens = spectral::spectral_density_matrix(&z, bandwidth, w)?;
        let (vals, trace) = spectral::hermitian_eigs_desc(&dens, top_k.min(dx.nrows()));
        eigs.push(vals);
        traces.push(trace);
    }
    Ok(SpectralEstimate {
        freqs,
        weights,
        eigs,
        traces,
        bandwidth,
    })
}

impl SpectralEstimate {
    /// Weighted average over frequencies of the eigenvalue mass beyond the
    /// leading `k`, divided by `n`.
    fn mean_discarded_mass(&self, k: usize, n: usize) -> f64 {
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (h, vals) in self.eigs.iter().enumerate() {
            let lead: f64 = vals.iter().take(k).sum();
            let tail = (self.traces[h] - lead).max(0.0);
            acc += self.weights[h] * tail;
            wsum += self.weights[h];
        }
        acc / (wsum * n as f64)
    }

    /// Weighted cumulative variance share (percent) of the leading `k`
    /// eigenvalues.
    pub fn cumulative_share(&self, k: usize) -> f64 {
        let mut lead = 0.0;
        let mut total = 0.0;
        for (h, vals) in self.eigs.iter().enumerate() {
            lead += self.weights[h] * vals.iter().take(k).sum::<f64>();
            total += self.weights[h] * self.traces[h];
        }
        100.0 * lead / total.max(f64::MIN_POSITIVE)
    }
}

/// Outcome of the shock-count criterion.
#[derive(Debug, Clone)]
pub struct QSelection {
    pub q_hat: usize,
    /// `(c, q_hat(c))` along the penalty-multiplier grid.
    pub criterion_path: Vec<(f64, usize)>,
    pub warnings: Vec<String>,
}

/// Information criterion over the penalty-multiplier grid, selecting the
/// second stability plateau of `q_hat(c)` (the first is the unpenalized
/// `q_max` regime).
pub fn select_q(est: &SpectralEstimate, n: usize, t_len: usize, q_max: usize) -> Result<QSelection> {
    if q_max >= n {
        return Err(Error::Invalid(format!("q_max = {q_max} must be below n = {n}")));
    }
    let kcap = q_max.min(est.eigs.first().map(|v| v.len()).unwrap_or(0));
    let penalty = hl_penalty(n, t_len, est.bandwidth);
    let mut warnings = Vec::new();

    let grid: Vec<f64> = (1..=300).map(|i| i as f64 * 0.01).collect();
    let mut path = Vec::with_capacity(grid.len());
    for &c in &grid {
        let mut best_k = 0usize;
        let mut best_ic = f64::INFINITY;
        for k in 0..=kcap {
            let mass = est.mean_discarded_mass(k, n).max(1e-300);
            let ic = mass.ln() + k as f64 * c * penalty;
            if ic < best_ic - 1e-12 {
                best_ic = ic;
                best_k = k;
            }
        }
        path.push((c, best_k));
    }

    // Run-length encoding of q_hat(c).
    let mut runs: Vec<(usize, usize)> = Vec::new(); // (value, length)
    for &(_, k) in &path {
        match runs.last_mut() {
            Some((v, len)) if *v == k => *len += 1,
            _ => runs.push((k, 1)),
        }
    }

    // The run at c -> 0 is the unpenalized regime and equals q_max by
    // construction; it only counts as a real plateau when it is wide on its
    // own (the criterion keeps choosing the bound, i.e. the bound binds).
    let min_run = 15usize;
    let q_hat = if runs.len() == 1 || runs[0].1 >= min_run {
        runs[0].0
    } else {
        match runs.iter().skip(1).find(|(_, len)| *len >= min_run) {
            Some((v, _)) => *v,
            None => {
                warnings.push("no stable penalty plateau; using the longest run".into());
                runs.iter()
                    .skip(1)
                    .max_by_key(|(_, len)| *len)
                    .map(|(v, _)| *v)
                    .unwrap_or(runs[0].0)
            }
        }
    };
    if q_hat == q_max {
        warnings.push(format!("selected q equals the search bound q_max = {q_max}"));
    }
    Ok(QSelection {
        q_hat,
        criterion_path: path,
        warnings,
    })
}

/// Outcome of the trend-count rule.
#[derive(Debug, Clone)]
pub struct TrendCountSelection {
    pub trend_count: usize,
    /// Zero-frequency spectral eigenvalues of the differenced panel.
    pub zero_freq_eigs: Vec<f64>,
    /// Eigenvalues of the normalized levels second-moment matrix
    /// (diagnostic path).
    pub eig_path: Vec<f64>,
    /// Consecutive level-eigenvalue ratios (diagnostic).
    pub ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Threshold scale for the zero-frequency rule: component `j` counts as a
/// common trend when its eigenvalue reaches `scale * sqrt(n)`, the
/// geometric midpoint between the O(n) rate of trend eigenvalues and the
/// O(1) rate of everything else surviving at frequency zero.
pub const TREND_THRESHOLD_SCALE: f64 = 0.075;

/// Bandwidth used for the zero-frequency density (wider than the default
/// to keep stationary leakage down).
pub fn trend_bandwidth(t_len: usize) -> usize {
    ((2.0 * (t_len as f64).sqrt()).floor() as usize).min(t_len.saturating_sub(1) / 2)
}

/// Eigenvalues of `(n T^2)^{-1} sum_t x_t x_t'` with rows scaled by the
/// standard deviation of their differences (diagnostic path).
fn levels_eigs(x: &DMatrix<f64>, top_k: usize) -> Vec<f64> {
    let n = x.nrows();
    let t_len = x.ncols();
    let mut z = x.clone();
    for i in 0..n {
        let row: Vec<f64> = (0..t_len).map(|s| x[(i, s)]).collect();
        let sd = stats::variance(&stats::diff(&row)).sqrt();
        if sd > 0.0 {
            for s in 0..t_len {
                z[(i, s)] /= sd;
            }
        }
    }
    let scale = 1.0 / (n as f64 * t_len as f64 * t_len as f64);
    let mut m = &z * z.transpose() * scale;
    stats::symmetrize(&mut m);
    let (vals, _) = stats::sorted_symmetric_eigen(&m);
    vals.iter().take(top_k).cloned().collect()
}

/// Number of common trends.
///
/// Differencing the panel removes all stationary content at frequency zero,
/// so the smoothed-periodogram density there retains only the common-trend
/// directions (eigenvalues growing like `n`) and idiosyncratic random walks
/// (bounded eigenvalues). The count is the number of leading eigenvalues
/// clearing `threshold_scale * sqrt(n)`. The levels-eigenvalue path and its
/// consecutive ratios are reported alongside as diagnostics.
pub fn select_trend_count(
    x: &DMatrix<f64>,
    kmax: usize,
    threshold_scale: f64,
) -> Result<TrendCountSelection> {
    let n = x.nrows();
    let t_len = x.ncols();
    if kmax == 0 || kmax >= n.min(t_len) {
        return Err(Error::Invalid(format!(
            "kmax must be in [1, min(n, T)), got {kmax}"
        )));
    }
    if t_len < 32 {
        return Err(Error::Invalid("trend-count rule needs T >= 32".into()));
    }
    let dx = x.columns(1, t_len - 1) - x.columns(0, t_len - 1);
    let z = spectral::standardize_rows(&dx);
    let bw = trend_bandwidth(t_len);
    let dens = spectral::spectral_density_matrix(&z, bw, 0.0)?;
    let (zero_freq_eigs, _) = spectral::hermitian_eigs_desc(&dens, kmax + 1);

    let threshold = threshold_scale * (n as f64).sqrt();
    let trend_count = zero_freq_eigs
        .iter()
        .take(kmax)
        .take_while(|&&v| v >= threshold)
        .count();

    let eig_path = levels_eigs(x, kmax + 1);
    let mut ratios = Vec::with_capacity(kmax);
    for j in 0..kmax {
        ratios.push(eig_path[j] / eig_path[j + 1].max(1e-300));
    }
    let mut warnings = Vec::new();
    if trend_count > 0 {
        let (best_j, _) = ratios
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if best_j + 1 != trend_count {
            warnings.push(format!(
                "levels eigenvalue-ratio rule points at {} trends, zero-frequency rule at {}",
                best_j + 1,
                trend_count
            ));
        }
    }
    Ok(TrendCountSelection {
        trend_count,
        zero_freq_eigs,
        eig_path,
        ratios,
        warnings,
    })
}

/// Explained-variance table: cumulative percentage shares of the leading
/// spectral eigenvalues of the differenced panel (`q` row) and of the
/// leading covariance eigenvalues (`r` row).
#[derive(Debug, Clone)]
pub struct ShareTable {
    pub q_row: Vec<f64>,
    pub r_row: Vec<f64>,
}

/// Outcome of the static-factor-count match.
#[derive(Debug, Clone)]
pub struct RSelection {
    pub r_hat: usize,
    pub table: ShareTable,
    pub warnings: Vec<String>,
}

/// Matching rule on precomputed share rows: the smallest `r` whose
/// covariance share reaches the spectral share of `q_hat` minus the
/// tolerance (percentage points); ties resolve upward automatically.
pub fn match_r_from_shares(
    q_row: &[f64],
    r_row: &[f64],
    q_hat: usize,
    tol_share: f64,
) -> Option<usize> {
    if q_hat == 0 || q_hat > q_row.len() {
        return None;
    }
    let target = q_row[q_hat - 1] - tol_share;
    r_row.iter().position(|&s| s >= target).map(|idx| idx + 1)
}

/// Selects the number of static factors by matching explained-variance
/// shares between the spectral eigenvalues (dynamic side) and the
/// covariance eigenvalues (static side) of the differenced panel.
pub fn select_r(
    dx: &DMatrix<f64>,
    q_hat: usize,
    r_max: usize,
    bandwidth: usize,
    tol_share: f64,
) -> Result<RSelection> {
    let n = dx.nrows();
    if q_hat == 0 {
        return Err(Error::Invalid("select_r needs q_hat >= 1".into()));
    }
    if r_max >= n {
        return Err(Error::Invalid(format!("r_max = {r_max} must be below n = {n}")));
    }
    let est = spectral_density_eigs(dx, bandwidth, r_max.max(q_hat))?;
    let q_row: Vec<f64> = (1..=r_max).map(|k| est.cumulative_share(k)).collect();

    let z = spectral::standardize_rows(dx);
    let mut cov = &z * z.transpose() / dx.ncols() as f64;
    stats::symmetrize(&mut cov);
    let (vals, _) = stats::sorted_symmetric_eigen(&cov);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let mut r_row = Vec::with_capacity(r_max);
    let mut acc = 0.0;
    for j in 0..r_max {
        acc += vals[j].max(0.0);
        r_row.push(100.0 * acc / total.max(f64::MIN_POSITIVE));
    }

    let mut warnings = Vec::new();
    let r_hat = match match_r_from_shares(&q_row, &r_row, q_hat, tol_share) {
        Some(r) => r,
        None => {
            warnings.push(format!(
                "no r <= {r_max} reaches the dynamic share; returning r_max"
            ));
            r_max
        }
    };
    Ok(RSelection {
        r_hat,
        table: ShareTable { q_row, r_row },
        warnings,
    })
}

/// Augmented unit-root regression result.
#[derive(Debug, Clone)]
pub struct AdfResult {
    /// t-statistic on the lagged level.
    pub statistic: f64,
    /// Selected augmentation lag order.
    pub lags: usize,
    /// Critical values at 1, 5, and 10 percent (constant case).
    pub critical_values: (f64, f64, f64),
    /// Null (unit root) rejected at 5 percent.
    pub reject_5pct: bool,
}

/// Finite-sample response-surface critical values, constant case:
/// `cv = b0 + b1 / T + b2 / T^2 + b3 / T^3`.
fn adf_critical_values(nobs: usize) -> (f64, f64, f64) {
    let t = nobs as f64;
    let cv = |b: [f64; 4]| b[0] + b[1] / t + b[2] / (t * t) + b[3] / (t * t * t);
    (
        cv([-3.43035, -6.5393, -16.786, -79.433]),
        cv([-2.86154, -2.8903, -4.234, -40.040]),
        cv([-2.56677, -1.5384, -2.809, 0.0]),
    )
}

/// Augmented Dickey-Fuller test with a constant, lag order chosen by BIC up
/// to `max_lag` (default `floor(12 (T/100)^{1/4})`).
pub fn adf_test(y: &[f64], max_lag: Option<usize>) -> Result<AdfResult> {
    let t_len = y.len();
    let pmax = max_lag.unwrap_or_else(|| (12.0 * (t_len as f64 / 100.0).powf(0.25)).floor() as usize);
    if t_len < pmax + 12 {
        return Err(Error::Invalid(format!(
            "series too short for the unit-root regression: T = {t_len}, max lag = {pmax}"
        )));
    }
    let dy = stats::diff(y);

    // Common estimation sample across lag candidates: rows pmax..len(dy).
    let fit = |p: usize| -> Result<(f64, f64, usize)> {
        let rows = dy.len() - pmax;
        let ncoef = 2 + p;
        let mut design = DMatrix::zeros(rows, ncoef);
        let mut target = DVector::zeros(rows);
        for (row, s) in (pmax..dy.len()).enumerate() {
            design[(row, 0)] = 1.0;
            design[(row, 1)] = y[s]; // level lagged one period behind dy[s]
            for j in 0..p {
                design[(row, 2 + j)] = dy[s - 1 - j];
            }
            target[row] = dy[s];
        }
        let (coef, resid) = stats::ols(&design, &target)?;
        let rss = resid.norm_squared();
        let sigma2 = rss / (rows - ncoef) as f64;
        let xtx_inv = (design.transpose() * &design)
            .try_inverse()
            .ok_or_else(|| Error::numeric("adf", "singular design"))?;
        let se = (sigma2 * xtx_inv[(1, 1)]).sqrt();
        let tstat = coef[1] / se;
        let bic = (rss / rows as f64).ln() + ncoef as f64 * (rows as f64).ln() / rows as f64;
        Ok((tstat, bic, rows))
    };

    let mut best = (0usize, f64::INFINITY, 0.0, 0usize);
    for p in 0..=pmax {
        let (tstat, bic, rows) = fit(p)?;
        if bic < best.1 {
            best = (p, bic, tstat, rows);
        }
    }
    let (lags, _, statistic, nobs) = best;
    let critical_values = adf_critical_values(nobs);
    Ok(AdfResult {
        statistic,
        lags,
        critical_values,
        reject_5pct: statistic < critical_values.1,
    })
}

/// Per-series unit-root decision.
#[derive(Debug, Clone)]
pub struct RhoDecision {
    pub rho: bool,
    /// Test outcome when the decision is data-driven.
    pub adf: Option<AdfResult>,
    pub forced: bool,
}

/// Classifies each idiosyncratic component as I(1) (`rho = 1`, null not
/// rejected) or I(0) from the residuals of the initial principal-component
/// fit, with per-series overrides applied last.
pub fn classify_idiosyncratic(
    x: &DMatrix<f64>,
    chi_initial: &DMatrix<f64>,
    rho_modes: &[RhoMode],
) -> Result<Vec<RhoDecision>> {
    let n = x.nrows();
    let t_len = x.ncols();
    if chi_initial.nrows() != n || chi_initial.ncols() != t_len {
        return Err(Error::dim("chi_initial", format!("expected {n} x {t_len}")));
    }
    if rho_modes.len() != n {
        return Err(Error::dim("rho_modes", format!("expected length {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let resid: Vec<f64> = (0..t_len).map(|t| x[(i, t)] - chi_initial[(i, t)]).collect();
        let decision = match rho_modes[i] {
            RhoMode::Force0 => RhoDecision {
                rho: false,
                adf: None,
                forced: true,
            },
            RhoMode::Force1 => RhoDecision {
                rho: true,
                adf: None,
                forced: true,
            },
            RhoMode::Auto => {
                let adf = adf_test(&resid, None)?;
                RhoDecision {
                    rho: !adf.reject_5pct,
                    adf: Some(adf),
                    forced: false,
                }
            }
        };
        out.push(decision);
    }
    Ok(out)
}

/// Combined report of all selection steps.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub q_hat: usize,
    pub trend_count_hat: usize,
    pub r_hat: usize,
    pub d_hat: usize,
    pub table: ShareTable,
    pub rho: Vec<RhoDecision>,
    pub warnings: Vec<String>,
}

impl SelectionReport {
    /// Clamps the joint outcome to `0 < d < q <= r`, warning when the raw
    /// criteria disagree. The trend count drives `d = q - trend_count`.
    pub fn reconcile(&mut self) {
        if self.trend_count_hat >= self.q_hat {
            self.warnings.push(format!(
                "trend count {} >= q {}; clamping to q - 1",
                self.trend_count_hat, self.q_hat
            ));
            self.trend_count_hat = self.q_hat.saturating_sub(1).max(1);
        }
        if self.trend_count_hat == 0 {
            self.warnings
                .push("no common trend detected; forcing one trend for the decomposition".into());
            self.trend_count_hat = 1;
        }
        self.d_hat = self.q_hat - self.trend_count_hat;
        if self.r_hat < self.q_hat {
            self.warnings.push(format!(
                "r {} below q {}; raising r to q",
                self.r_hat, self.q_hat
            ));
            self.r_hat = self.q_hat;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn white_panel(n: usize, t_len: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn white_noise_spectral_eigs_are_flat_near_inverse_two_pi() {
        // Identity covariance: all spectral eigenvalues concentrate around
        // 1 / (2 pi); check the cross-frequency average of the mean
        // eigenvalue within 10 percent.
        let n = 20;
        let t_len = 2000;
        let dx = white_panel(n, t_len, 1);
        let est = spectral_density_eigs(&dx, default_bandwidth(t_len), n).unwrap();
        let target = 1.0 / (2.0 * std::f64::consts::PI);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (h, vals) in est.eigs.iter().enumerate() {
            acc += est.weights[h] * vals.iter().sum::<f64>() / n as f64;
            wsum += est.weights[h];
        }
        let mean = acc / wsum;
        assert!((mean - target).abs() < 0.1 * target, "mean eig {mean} vs {target}");
    }

    #[test]
    fn common_factor_dominates_low_frequencies() {
        let n = 50;
        let t_len = 500;
        let mut rng = StdRng::seed_from_u64(2);
        let mut f = vec![0.0f64; t_len];
        for t in 1..t_len {
            f[t] = 0.9 * f[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let lam = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, t_len, |i, t| {
            lam[i] * f[t] + rng.sample::<f64, _>(StandardNormal)
        });
        let est = spectral_density_eigs(&x, default_bandwidth(t_len), 5).unwrap();
        // At frequency zero the leading eigenvalue dwarfs the second.
        assert!(est.eigs[0][0] > 5.0 * est.eigs[0][1]);
    }

    #[test]
    fn zero_panel_has_zero_spectral_eigenvalues() {
        let dx = DMatrix::zeros(5, 100);
        let est = spectral_density_eigs(&dx, 6, 5).unwrap();
        assert!(est.eigs.iter().flatten().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn bandwidth_bound_is_enforced() {
        let dx = white_panel(4, 20, 3);
        assert!(spectral_density_eigs(&dx, 20, 4).is_err());
    }

    #[test]
    fn pure_idiosyncratic_panel_selects_zero_shocks() {
        let dx = white_panel(40, 400, 4);
        let est = spectral_density_eigs(&dx, default_bandwidth(400), 10).unwrap();
        let sel = select_q(&est, 40, 400, 8).unwrap();
        assert_eq!(sel.q_hat, 0, "path: {:?}", &sel.criterion_path[..5]);
    }

    #[test]
    fn q_max_clamp_warns_at_boundary() {
        // Three strong dynamic shocks but q_max = 1.
        let n = 60;
        let t_len = 300;
        let mut rng = StdRng::seed_from_u64(5);
        let mut f = DMatrix::zeros(3, t_len);
        for t in 1..t_len {
            for j in 0..3 {
                f[(j, t)] = 0.5 * f[(j, t - 1)] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        let lam = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &lam * &f + white_panel(n, t_len, 6) * 0.5;
        let est = spectral_density_eigs(&x, default_bandwidth(t_len), 5).unwrap();
        let sel = select_q(&est, n, t_len, 1).unwrap();
        assert_eq!(sel.q_hat, 1);
        assert!(sel.warnings.iter().any(|w| w.contains("q_max")));
    }

    #[test]
    fn trend_count_zero_for_stationary_panel() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 60;
        let t_len = 400;
        let x = DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sel = select_trend_count(&x, 6, TREND_THRESHOLD_SCALE).unwrap();
        assert_eq!(sel.trend_count, 0, "eigs {:?}", sel.zero_freq_eigs);
    }

    #[test]
    fn trend_count_detects_one_and_two_walks() {
        let mut rng = StdRng::seed_from_u64(8);
        let n = 100;
        let t_len = 300;
        for n_trends in [1usize, 2] {
            let mut tau = DMatrix::zeros(n_trends, t_len);
            for t in 1..t_len {
                for j in 0..n_trends {
                    tau[(j, t)] = tau[(j, t - 1)] + rng.sample::<f64, _>(StandardNormal);
                }
            }
            let lam = DMatrix::from_fn(n, n_trends, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &lam * &tau + noise;
            let sel = select_trend_count(&x, 6, TREND_THRESHOLD_SCALE).unwrap();
            assert_eq!(sel.trend_count, n_trends, "eigs {:?}", sel.zero_freq_eigs);
        }
    }

    #[test]
    fn share_matching_reproduces_published_example() {
        // Cumulative shares: the dynamic row reaches 53.3 at q = 3 and the
        // static row first reaches it (within one point) at r = 6 = 2q.
        let q_row = vec![33.4, 45.8, 53.3, 58.9, 63.6, 67.4, 70.6, 73.4, 75.8, 77.9];
        let r_row = vec![23.4, 33.9, 42.1, 47.9, 51.8, 55.3, 58.2, 60.6, 62.7, 64.9];
        assert_eq!(match_r_from_shares(&q_row, &r_row, 3, 1.0), Some(6));
        // And q = 2 (45.8) matches at r = 4 (47.9 >= 44.8).
        assert_eq!(match_r_from_shares(&q_row, &r_row, 2, 1.0), Some(4));
    }

    #[test]
    fn adf_keeps_null_on_random_walk_and_rejects_on_noise() {
        let mut rng = StdRng::seed_from_u64(9);
        let t_len = 300;
        let mut walk = vec![0.0f64; t_len];
        for t in 1..t_len {
            walk[t] = walk[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let res = adf_test(&walk, None).unwrap();
        assert!(!res.reject_5pct, "stat {}", res.statistic);

        let noise: Vec<f64> = (0..t_len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let res = adf_test(&noise, None).unwrap();
        assert!(res.reject_5pct, "stat {}", res.statistic);
    }

    #[test]
    fn adf_critical_values_match_reference_surface() {
        let (c1, c5, c10) = adf_critical_values(100);
        assert!((c1 - (-3.43035 - 6.5393 / 100.0 - 16.786 / 1e4 - 79.433 / 1e6)).abs() < 1e-12);
        assert!(c1 < c5 && c5 < c10);
    }

    #[test]
    fn forced_overrides_win_over_the_test() {
        let mut rng = StdRng::seed_from_u64(10);
        let t_len = 300;
        let n = 2;
        // Series 0: pure random walk residual, forced to rho = 0 anyway.
        let mut x = DMatrix::zeros(n, t_len);
        for t in 1..t_len {
            x[(0, t)] = x[(0, t - 1)] + rng.sample::<f64, _>(StandardNormal);
            x[(1, t)] = rng.sample::<f64, _>(StandardNormal);
        }
        let chi = DMatrix::zeros(n, t_len);
        let modes = vec![RhoMode::Force0, RhoMode::Auto];
        let decisions = classify_idiosyncratic(&x, &chi, &modes).unwrap();
        assert!(!decisions[0].rho);
        assert!(decisions[0].forced);
        assert!(!decisions[1].rho); // white noise rejects the unit root
    }

    #[test]
    fn short_series_is_rejected_by_adf() {
        let y = vec![1.0; 10];
        assert!(adf_test(&y, None).is_err());
    }

    #[test]
    fn reconcile_clamps_degenerate_combinations() {
        let mut report = SelectionReport {
            q_hat: 2,
            trend_count_hat: 3,
            r_hat: 1,
            d_hat: 0,
            table: ShareTable { q_row: vec![], r_row: vec![] },
            rho: vec![],
            warnings: vec![],
        };
        report.reconcile();
        assert_eq!(report.trend_count_hat, 1);
        assert_eq!(report.d_hat, 1);
        assert_eq!(report.r_hat, 2);
        assert!(!report.warnings.is_empty());
    }
}
