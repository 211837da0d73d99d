//! Rotation-invariant evaluation metrics for factor-space recovery.

use nalgebra::DMatrix;

/// Largest principal angle (radians) between the column spaces of `a` and
/// `b`. Zero means identical spans.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let cross = qa.transpose() * qb;
    let svd = cross.svd(false, false);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(-1.0, 1.0);
    min_sv.acos()
}

fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let q = qr.q();
    q.columns(0, m.ncols().min(q.ncols())).into_owned()
}

/// Trace R^2 of the multivariate regression of `target` on `pred` (rows are
/// time periods, both demeaned). 1.0 means the prediction spans the target.
pub fn trace_r2(target: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let t = target.nrows() as f64;
    let tc = demean_columns(target);
    let pc = demean_columns(pred);
    let stt = tc.transpose() * &tc / t;
    let spp = pc.transpose() * &pc / t;
    let stp = tc.transpose() * &pc / t;
    let spp_inv = match spp.clone().cholesky() {
        Some(c) => c.inverse(),
        None => return f64::NAN,
    };
    let explained = (&stp * spp_inv * stp.transpose()).trace();
    explained / stt.trace()
}

fn demean_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / m.nrows() as f64;
        for i in 0..m.nrows() {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Root-mean-square factor estimation error after least-squares alignment:
/// `K = argmin sum_t || est_t - K true_t ||^2`, evaluated from `from_t` on.
/// Rows of both inputs are time periods.
pub fn aligned_factor_rmse(est: &DMatrix<f64>, truth: &DMatrix<f64>, from_t: usize) -> f64 {
    let t_len = est.nrows();
    assert_eq!(t_len, truth.nrows());
    let stt = truth.transpose() * truth;
    let set = est.transpose() * truth;
    // K' solves (truth' truth) K' = truth' est.
    let kt = stt
        .lu()
        .solve(&set.transpose())
        .expect("alignment normal equations are singular");
    let fitted = truth * kt;
    let mut acc = 0.0;
    let mut count = 0usize;
    for t in from_t..t_len {
        let diff = est.row(t) - fitted.row(t);
        acc += diff.norm_squared();
        count += 1;
    }
    (acc / count.max(1) as f64).sqrt()
}

/// Pearson correlation of two equally long series.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    sab / (saa.sqrt() * sbb.sqrt()).max(f64::MIN_POSITIVE)
}
