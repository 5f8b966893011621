//! Central finite-difference helpers used by unit tests to verify analytic
//! Jacobians.

use nalgebra::{DMatrix, DVector};

/// Relative step used for all central differences.
pub(crate) const FD_STEP: f64 = 1e-5;

/// Central-difference Jacobian of `f` at `x`, column by column.
pub(crate) fn jacobian<F>(mut f: F, x: &DVector<f64>, m: usize) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = FD_STEP * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Largest entrywise deviation between two matrices, relative to the scale of
/// the reference matrix (floor 1.0 so near-zero blocks compare absolutely).
pub(crate) fn rel_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(1.0);
    (analytic - reference).amax() / scale
}
