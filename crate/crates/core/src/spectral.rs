//! Bartlett lag-window spectral density estimation, univariate and
//! multivariate.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::stats;

/// Fourier grid on `[0, pi]` for a window of half-width `bandwidth`:
/// `omega_h = 2 pi h / (2 B + 1)`, `h = 0..=B`.
pub fn fourier_grid(bandwidth: usize) -> Vec<f64> {
    let denom = (2 * bandwidth + 1) as f64;
    (0..=bandwidth)
        .map(|h| 2.0 * std::f64::consts::PI * h as f64 / denom)
        .collect()
}

/// Circle weights matching [`fourier_grid`]: frequency 0 counts once, the
/// others twice (their mirror images carry the same density).
pub fn frequency_weights(bandwidth: usize) -> Vec<f64> {
    (0..=bandwidth).map(|h| if h == 0 { 1.0 } else { 2.0 }).collect()
}

fn bartlett_weight(lag: usize, bandwidth: usize) -> f64 {
    1.0 - lag as f64 / (bandwidth as f64 + 1.0)
}

/// Smoothed periodogram of a scalar series at the given frequencies, using
/// a Bartlett lag window of half-width `bandwidth`.
pub fn bartlett_spectrum(series: &[f64], bandwidth: usize, freqs: &[f64]) -> Result<Vec<f64>> {
    let t = series.len();
    if bandwidth >= t {
        return Err(Error::Invalid(format!(
            "bandwidth {} must be below the series length {}",
            bandwidth, t
        )));
    }
    let gammas: Vec<f64> = (0..=bandwidth)
        .map(|k| stats::autocovariance(series, k))
        .collect();
    let two_pi_inv = 1.0 / (2.0 * std::f64::consts::PI);
    Ok(freqs
        .iter()
        .map(|&w| {
            let mut acc = gammas[0];
            for k in 1..=bandwidth {
                acc += 2.0 * bartlett_weight(k, bandwidth) * gammas[k] * (w * k as f64).cos();
            }
            (acc * two_pi_inv).max(0.0)
        })
        .collect())
}

/// Multivariate Bartlett lag-window spectral density of an `n x T` panel
/// (series in rows, demeaned internally) evaluated at one frequency.
/// Returns a Hermitian `n x n` matrix.
pub fn spectral_density_matrix(
    panel: &DMatrix<f64>,
    bandwidth: usize,
    omega: f64,
) -> Result<DMatrix<Complex<f64>>> {
    let n = panel.nrows();
    let t = panel.ncols();
    if bandwidth >= t {
        return Err(Error::Invalid(format!(
            "bandwidth {} must be below the sample length {}",
            bandwidth, t
        )));
    }
    let centered = {
        let mut c = panel.clone();
        for i in 0..n {
            let mean = panel.row(i).sum() / t as f64;
            for s in 0..t {
                c[(i, s)] -= mean;
            }
        }
        c
    };
    // Gamma_k = (1/T) sum_t z_t z_{t-k}'.
    let mut dens = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    let gamma0 = &centered * centered.transpose() / t as f64;
    for i in 0..n {
        for j in 0..n {
            dens[(i, j)] = Complex::new(gamma0[(i, j)], 0.0);
        }
    }
    for k in 1..=bandwidth {
        let lead = centered.columns(k, t - k);
        let lag = centered.columns(0, t - k);
        let gk = lead * lag.transpose() / t as f64;
        let w = bartlett_weight(k, bandwidth);
        let phase = Complex::new(0.0, -(omega * k as f64)).exp();
        let phase_conj = phase.conj();
        for i in 0..n {
            for j in 0..n {
                // w_k (G_k e^{-i w k} + G_k' e^{+i w k})
                dens[(i, j)] += Complex::new(w * gk[(i, j)], 0.0) * phase
                    + Complex::new(w * gk[(j, i)], 0.0) * phase_conj;
            }
        }
    }
    let scale = Complex::new(1.0 / (2.0 * std::f64::consts::PI), 0.0);
    Ok(dens * scale)
}

/// Eigenvalues (descending) and trace of a Hermitian spectral density
/// matrix, keeping only the leading `top_k`.
pub fn hermitian_eigs_desc(m: &DMatrix<Complex<f64>>, top_k: usize) -> (Vec<f64>, f64) {
    let trace = m.diagonal().iter().map(|c| c.re).sum();
    let se = m.clone().symmetric_eigen();
    let mut vals: Vec<f64> = se.eigenvalues.iter().cloned().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals.truncate(top_k);
    (vals, trace)
}

/// Convenience: demeaned+standardized copy of a panel (rows scaled to unit
/// variance; zero-variance rows are left at zero).
pub fn standardize_rows(panel: &DMatrix<f64>) -> DMatrix<f64> {
    let n = panel.nrows();
    let t = panel.ncols();
    let mut out = DMatrix::zeros(n, t);
    for i in 0..n {
        let row: Vec<f64> = (0..t).map(|s| panel[(i, s)]).collect();
        let m = stats::mean(&row);
        let sd = stats::variance(&row).sqrt();
        if sd > 0.0 {
            for s in 0..t {
                out[(i, s)] = (panel[(i, s)] - m) / sd;
            }
        }
    }
    out
}

/// Standardized row variances helper used by selection reports.
pub fn row_variance(panel: &DMatrix<f64>, i: usize) -> f64 {
    let row: Vec<f64> = (0..panel.ncols()).map(|s| panel[(i, s)]).collect();
    stats::variance(&row)
}
