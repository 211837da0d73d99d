//! Structural invariants of the filtering recursions beyond pointwise
//! oracle agreement: steady-state approach, MSE ordering, and invariance
//! under factor rescaling.

use nalgebra::{DMatrix, DVector};

use dfm_core::em::{run_em, TieGroups};
use dfm_core::kalman::{
    burn_in_index, kf_forward, ks_backward, mse_traces, riccati_steady_state, InitialState,
    SmootherVariant,
};
use dfm_core::metrics;
use dfm_core::model::{build_state_space, ModelSpec};
use dfm_core::simulate::{gen_cointegrated_params, gen_dfm, DgpConfig};

#[test]
fn one_step_ahead_covariance_approaches_steady_state_geometrically() {
    // Persistent scalar system observed with sizable noise: the transient
    // is long enough to measure the decay slope.
    let ss = dfm_core::model::StateSpace {
        tmat: DMatrix::from_element(1, 1, 0.95),
        zmat: DMatrix::from_element(1, 1, 1.0),
        qmat: DMatrix::from_element(1, 1, 0.2),
        hobs: nalgebra::DVector::from_element(1, 4.0),
        r: 0,
        n1: 1,
        i1_state: vec![Some(0)],
    };
    let x = DMatrix::from_fn(1, 200, |_, t| ((t as f64) * 0.37).sin());
    let init = InitialState::Explicit {
        mean: nalgebra::DVector::zeros(1),
        cov: DMatrix::from_element(1, 1, 1e7),
    };
    let filter = kf_forward(&ss, &x, &init).unwrap();
    let ric = riccati_steady_state(&ss, 1e-12, 100_000).unwrap();

    // log distance to the steady state decays at a near-constant rate:
    // consecutive log-distance decrements stabilize once past the initial
    // collapse and before the floating-point floor.
    let dists: Vec<f64> = filter
        .p_pred
        .iter()
        .map(|p| (p - &ric.p_star).norm().max(1e-300))
        .collect();
    let mut rates = Vec::new();
    for t in 5..30 {
        if dists[t] > 1e-10 {
            rates.push((dists[t + 1] / dists[t]).ln());
        }
    }
    assert!(rates.len() >= 10, "distance hit the floor too early");
    let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!(mean_rate < -0.05, "no geometric decay: mean log rate {mean_rate}");
    let spread = rates
        .iter()
        .map(|r| (r - mean_rate).abs())
        .fold(0.0f64, f64::max);
    assert!(
        spread < 0.9 * mean_rate.abs().max(0.5),
        "log-distance path is far from linear (spread {spread:.3}, mean {mean_rate:.3})"
    );
}

#[test]
fn mse_traces_are_ordered_smoother_filter_predictor() {
    let cfg = DgpConfig::new(30, 120, 4, 2, 1, 17);
    let (x, truth) = gen_dfm(&cfg).unwrap();
    let _ = truth;
    let params = gen_cointegrated_params(30, 2, 1, vec![false; 30], 17);
    let spec = ModelSpec::new(30, 120, 4, 2, 1).unwrap();
    let ss = build_state_space(&params, &spec).unwrap();
    let filter = kf_forward(&ss, &x, &InitialState::Diffuse { kappa: 1e7 }).unwrap();
    let smoother = ks_backward(&filter, &ss, SmootherVariant::DkNoInverse).unwrap();
    for (t, (pred, filt, smooth)) in mse_traces(&filter, &smoother).into_iter().enumerate() {
        assert!(
            smooth <= filt + 1e-9 && filt <= pred + 1e-9,
            "ordering violated at t = {t}: {smooth} / {filt} / {pred}"
        );
    }
}

#[test]
fn smoothed_factor_space_is_invariant_to_column_rescaling() {
    // Rescaling loading column j by c and the matching factor coordinates
    // by 1/c leaves the data distribution unchanged; the smoothed factor
    // column space must not move.
    let n = 20;
    let t_len = 80;
    let cfg = DgpConfig::new(n, t_len, 4, 2, 1, 23);
    let (x, _) = gen_dfm(&cfg).unwrap();
    let params = gen_cointegrated_params(n, 2, 1, vec![false; n], 23);
    let spec = ModelSpec::new(n, t_len, 4, 2, 1).unwrap();

    let run = |p: &dfm_core::Params| -> DMatrix<f64> {
        let ss = build_state_space(p, &spec).unwrap();
        let filter = kf_forward(&ss, &x, &InitialState::Diffuse { kappa: 1e6 }).unwrap();
        let sm = ks_backward(&filter, &ss, SmootherVariant::DkNoInverse).unwrap();
        DMatrix::from_fn(t_len, 4, |t, j| sm.f_smoothed[(t, j)])
    };

    let base = run(&params);

    // Scale: D on the factor block, applied consistently to Lambda, the
    // VAR matrices, and H.
    let scales = [2.5, 0.4, 1.0, 3.0];
    let dmat = DMatrix::from_diagonal(&DVector::from_row_slice(&scales));
    let dinv = DMatrix::from_diagonal(&DVector::from_fn(4, |i, _| 1.0 / scales[i]));
    let mut scaled = params.clone();
    scaled.lambda = &params.lambda * &dmat;
    scaled.a1 = &dinv * &params.a1 * &dmat;
    scaled.a2 = &dinv * &params.a2 * &dmat;
    scaled.h = &dinv * &params.h;
    let rescaled = run(&scaled);

    let angle = metrics::principal_angle(&base, &rescaled);
    assert!(angle < 1e-6, "smoothed factor space moved: angle {angle:.2e}");
}

#[test]
fn reported_burn_in_is_where_the_trace_settles() {
    let mut cfg = DgpConfig::new(50, 200, 2, 2, 1, 31);
    cfg.balanced_shocks = true;
    let (x, _) = gen_dfm(&cfg).unwrap();
    let spec = ModelSpec::new(50, 200, 2, 2, 1).unwrap();
    let (state, _) = run_em(&x, &spec, &vec![false; 50], &TieGroups::none()).unwrap();
    let ss = build_state_space(&state.params, &spec).unwrap();
    let filter = kf_forward(&ss, &x, &InitialState::Diffuse { kappa: 1e7 }).unwrap();
    let ric = riccati_steady_state(&ss, 1e-11, 100_000).unwrap();
    let burn = burn_in_index(&filter.p_pred, &ric.p_star, 1e-6);
    assert!(burn < 200, "steady state never reached");
    for t in burn..200 {
        let rel = (&filter.p_pred[t] - &ric.p_star).norm() / ric.p_star.norm();
        assert!(rel < 1e-6, "relative distance {rel:.2e} at t = {t}");
    }
}
