//! Panel pretreatment: frequency aggregation, log / log-difference
//! transforms, and the drift-test detrending rule, keeping everything
//! needed to add the deterministic component back after estimation.

use crate::error::{Error, Result};
use crate::stats;

/// Series transform codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Code 0: use the series as is.
    None,
    /// Code 1: natural log.
    Log,
    /// Code 2: first difference of the log.
    DLog,
}

impl Transform {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Transform::None),
            1 => Ok(Transform::Log),
            2 => Ok(Transform::DLog),
            other => Err(Error::Invalid(format!("unknown transform code {other}"))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Transform::None => 0,
            Transform::Log => 1,
            Transform::DLog => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetrendMode {
    Auto,
    ForceMean,
    ForceTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMode {
    Auto,
    Force0,
    Force1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frequency {
    Quarterly,
    Monthly,
    Daily,
}

/// Per-series metadata driving the pretreatment.
#[derive(Debug, Clone)]
pub struct SeriesMeta {
    pub id: String,
    pub transform: Transform,
    /// Seasonally adjusted at the source.
    pub sa: bool,
    pub detrend_mode: DetrendMode,
    pub tie_group: Option<String>,
    pub rho_mode: RhoMode,
}

impl SeriesMeta {
    pub fn new(id: impl Into<String>) -> Self {
        SeriesMeta {
            id: id.into(),
            transform: Transform::None,
            sa: true,
            detrend_mode: DetrendMode::Auto,
            tie_group: None,
            rho_mode: RhoMode::Auto,
        }
    }
}

/// Which deterministic specification was removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetrendKind {
    Mean,
    Trend,
}

/// Deterministic component removed from a series. The removed path is
/// `a_hat + b_hat * t` in trend mode and `c_hat + a_hat * t` in mean mode
/// (`a_hat` is then the drift of the differenced series and `c_hat` the
/// residual mean), with `t = 1..T`.
#[derive(Debug, Clone)]
pub struct DetrendResult {
    /// Intercept (trend mode) or drift of the differences (mean mode).
    pub a_hat: f64,
    /// Trend slope; 0 in mean mode.
    pub b_hat: f64,
    /// Residual-mean offset removed in mean mode; 0 in trend mode.
    pub c_hat: f64,
    pub mode_used: DetrendKind,
    /// The |m| / gamma-bar drift statistic (NaN when the scale estimate
    /// was degenerate).
    pub statistic: f64,
    /// Set when the long-run scale estimate was nonpositive and the rule
    /// fell back to mean mode.
    pub scale_fallback: bool,
}

impl DetrendResult {
    /// The deterministic path at `t = 1..len`.
    pub fn path(&self, len: usize) -> Vec<f64> {
        (1..=len)
            .map(|t| match self.mode_used {
                DetrendKind::Trend => self.a_hat + self.b_hat * t as f64,
                DetrendKind::Mean => self.c_hat + self.a_hat * t as f64,
            })
            .collect()
    }
}

/// Aggregates a higher-frequency series to quarterly values by simple
/// averages over fixed-size blocks (3 months, 63 trading days). A partial
/// trailing quarter is dropped. Quarterly input passes through unchanged.
pub fn aggregate_to_quarterly(series: &[f64], frequency: Frequency) -> Result<Vec<f64>> {
    let per_quarter = match frequency {
        Frequency::Quarterly => return Ok(series.to_vec()),
        Frequency::Monthly => 3,
        Frequency::Daily => 63,
    };
    if series.len() < per_quarter {
        return Err(Error::Invalid(format!(
            "series too short to form a single quarter ({} observations, {} needed)",
            series.len(),
            per_quarter
        )));
    }
    Ok(series
        .chunks_exact(per_quarter)
        .map(|chunk| chunk.iter().sum::<f64>() / per_quarter as f64)
        .collect())
}

/// Applies a transform code. Log transforms require strictly positive
/// values; `DLog` shortens the series by one observation.
pub fn apply_transform(series: &[f64], transform: Transform) -> Result<Vec<f64>> {
    match transform {
        Transform::None => Ok(series.to_vec()),
        Transform::Log => {
            for (idx, &v) in series.iter().enumerate() {
                if v <= 0.0 {
                    return Err(Error::Invalid(format!(
                        "log transform needs positive values; found {v} at index {idx}"
                    )));
                }
            }
            Ok(series.iter().map(|v| v.ln()).collect())
        }
        Transform::DLog => {
            let logged = apply_transform(series, Transform::Log)?;
            Ok(stats::diff(&logged))
        }
    }
}

/// Drift statistic scale: the Bartlett long-run variance of the differenced
/// series divided by its length, so `|m| / gamma_bar` behaves like a size-5%
/// drift test against the 1.96 threshold. Negative (degenerate) estimates
/// report as `None`.
fn drift_scale(dy: &[f64], max_lag: usize) -> Option<f64> {
    let t = dy.len();
    let mut lrv = stats::autocovariance(dy, 0);
    for j in 1..=max_lag.min(t.saturating_sub(1)) {
        let w = 1.0 - j as f64 / (max_lag as f64 + 1.0);
        lrv += 2.0 * w * stats::autocovariance(dy, j);
    }
    if lrv <= 0.0 {
        return None;
    }
    Some((lrv / t as f64).sqrt())
}

/// Removes the deterministic component of a series.
///
/// Under [`DetrendMode::Auto`], computes the drift statistic of the
/// differenced series and fits an OLS line when it reaches 1.96; otherwise
/// only the implied drift path and the residual mean are removed so the
/// stochastic part has mean zero. `max_lag` defaults to `floor(T^(1/3))`.
pub fn detrend(
    series: &[f64],
    mode: DetrendMode,
    max_lag: Option<usize>,
) -> Result<(DetrendResult, Vec<f64>)> {
    let t_len = series.len();
    if t_len < 8 {
        return Err(Error::Invalid(format!(
            "detrend needs at least 8 observations, got {t_len}"
        )));
    }
    let dy = stats::diff(series);
    let m = stats::mean(&dy);
    let lag = max_lag.unwrap_or_else(|| (t_len as f64).powf(1.0 / 3.0).floor() as usize);

    let mut scale_fallback = false;
    let statistic = match drift_scale(&dy, lag.max(1)) {
        Some(scale) if scale > 0.0 => (m.abs() / scale).abs(),
        _ => {
            scale_fallback = true;
            f64::NAN
        }
    };

    let use_trend = match mode {
        DetrendMode::ForceTrend => true,
        DetrendMode::ForceMean => false,
        DetrendMode::Auto => !scale_fallback && statistic >= 1.96,
    };

    if use_trend {
        // OLS of y on a constant and t = 1..T.
        let t_mean = (t_len as f64 + 1.0) / 2.0;
        let y_mean = stats::mean(series);
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (i, &y) in series.iter().enumerate() {
            let tt = (i + 1) as f64 - t_mean;
            sxx += tt * tt;
            sxy += tt * (y - y_mean);
        }
        let b = sxy / sxx;
        let a = y_mean - b * t_mean;
        let resid: Vec<f64> = series
            .iter()
            .enumerate()
            .map(|(i, &y)| y - a - b * (i + 1) as f64)
            .collect();
        Ok((
            DetrendResult {
                a_hat: a,
                b_hat: b,
                c_hat: 0.0,
                mode_used: DetrendKind::Trend,
                statistic,
                scale_fallback,
            },
            resid,
        ))
    } else {
        // Remove the drift path implied by the mean of the differences,
        // then the residual mean, so the remainder has mean zero.
        let drifted: Vec<f64> = series
            .iter()
            .enumerate()
            .map(|(i, &y)| y - m * (i + 1) as f64)
            .collect();
        let c = stats::mean(&drifted);
        let resid: Vec<f64> = drifted.iter().map(|v| v - c).collect();
        Ok((
            DetrendResult {
                a_hat: m,
                b_hat: 0.0,
                c_hat: c,
                mode_used: DetrendKind::Mean,
                statistic,
                scale_fallback,
            },
            resid,
        ))
    }
}

/// Inverse of [`detrend`]: adds the removed deterministic path back onto a
/// component series.
pub fn add_back_deterministic(component: &[f64], detrend: &DetrendResult) -> Vec<f64> {
    let path = detrend.path(component.len());
    component.iter().zip(path.iter()).map(|(c, p)| c + p).collect()
}

/// Optional symmetric winsorizing hook: clamps observations more than
/// `z_thresh` interquartile ranges away from the median. Disabled by
/// default in the pipeline.
pub fn winsorize(series: &mut [f64], z_thresh: f64) {
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let median = quantile(0.5);
    let iqr = quantile(0.75) - quantile(0.25);
    if iqr <= 0.0 {
        return;
    }
    let lo = median - z_thresh * iqr;
    let hi = median + z_thresh * iqr;
    for v in series.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}
