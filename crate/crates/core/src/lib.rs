//! Estimation of non-stationary approximate dynamic factor models on large
//! time-series panels, and decomposition of the estimated common factors into
//! common trends and common cycles.
//!
//! The model observed on an `n x T` panel `x` is
//!
//! ```text
//! x_it  = lambda_i' F_t + xi_it          (observation)
//! F_t   = A1 F_{t-1} + A2 F_{t-2} + H u_t (factor VAR(2), u_t ~ N(0, I_q))
//! xi_it = rho_i xi_{it-1} + e_it          (idiosyncratic, rho_i in {0, 1})
//! ```
//!
//! with `r` static factors driven by `q <= r` dynamic shocks and `q - d`
//! common stochastic trends. Estimation is quasi maximum likelihood via the
//! EM algorithm with Kalman filter/smoother E-steps ([`em`], [`kalman`]).
//! The fitted factors are split into trends and cycles by eigenanalysis of
//! their long-run covariance ([`trendcycle`]). The number of shocks, trends,
//! and static factors, and the unit-root classification of each idiosyncratic
//! component, are data-driven ([`modelselect`]). Synthetic panels with known
//! ground truth and a brute-force conditional-moments oracle live in
//! [`simulate`].

pub mod em;
pub mod error;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod modelselect;
pub mod preprocess;
pub mod simulate;
pub mod spectral;
mod stats;
pub mod trendcycle;

pub use error::{Error, Result};
pub use model::{FactorEstimates, ModelSpec, Params, StateSpace};
