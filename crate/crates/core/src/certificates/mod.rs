//! Dual certificates for the discrete and the continuous-time optimality
//! systems, together with residual-based checkers.

mod continuous;
mod discrete;
mod report;

pub use continuous::{check_continuous, limit_certificate, synthesize_continuous, ContinuousCertificate};
pub use discrete::{build_discrete_certificate, check_discrete, DiscreteCertificate};
pub use report::{CheckEntry, CheckReport};

use nalgebra::{DMatrix, DVector};

use crate::cost::RunningCost;
use crate::dynamics::{DiscreteTrajectory, SweepingProblem};

/// Candidate multipliers for the cost, tried from the top.
pub(crate) const LAMBDA_GRID: [f64; 10] = [
    1.0,
    0.5,
    0.25,
    0.125,
    0.0625,
    0.03125,
    0.015625,
    0.0078125,
    0.00390625,
    0.0,
];

/// Subgradients `(w_j, v_j)` of the running cost on every interval, stacked
/// as `(x, u, a)`.
pub(crate) fn subgradients(p: &SweepingProblem, traj: &DiscreteTrajectory) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut w = Vec::with_capacity(traj.k());
    let mut v = Vec::with_capacity(traj.k());
    for j in 0..traj.k() {
        let c = p.ell.partials(
            traj.mesh.t(j),
            &traj.x[j],
            &traj.u[j],
            &traj.a[j],
            &traj.xdot(j),
            &traj.udot(j),
            &traj.adot(j),
        );
        w.push(stack(&c.wx, &c.wu, &c.wa));
        v.push(stack(&c.vx, &c.vu, &c.va));
    }
    (w, v)
}

pub(crate) fn stack(x: &DVector<f64>, u: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() + u.len() + a.len());
    out.rows_mut(0, x.len()).copy_from(x);
    out.rows_mut(x.len(), u.len()).copy_from(u);
    out.rows_mut(x.len() + u.len(), a.len()).copy_from(a);
    out
}

/// Columns are the generators of `C`.
pub(crate) fn generator_columns(p: &SweepingProblem) -> DMatrix<f64> {
    p.polyhedron.matrix().transpose()
}

/// Subdifferential of `ℓ₃` in `ȧ` over a whole interval, as the hull of the
/// endpoint sets; a sign change of the kink argument inside the interval
/// opens the full range.
pub(crate) fn adot_hull(ell: &RunningCost, t0: f64, t1: f64, ad: &DVector<f64>) -> Vec<(f64, f64)> {
    let a = ell.adot_interval(t0, ad);
    let b = ell.adot_interval(t1, ad);
    a.iter()
        .zip(b.iter())
        .enumerate()
        .map(|(i, (&(l0, h0), &(l1, h1)))| {
            let s0 = ad[i] + ell.abs_shift[i] + t0 * ell.abs_shift_rate[i];
            let s1 = ad[i] + ell.abs_shift[i] + t1 * ell.abs_shift_rate[i];
            if ell.abs_weight != 0.0 && s0 * s1 < 0.0 {
                let base = ell.adot_weight * ad[i];
                (base - ell.abs_weight, base + ell.abs_weight)
            } else {
                (l0.min(l1), h0.max(h1))
            }
        })
        .collect()
}

/// Largest entry of a residual, with non-finite values mapped to infinity.
pub(crate) fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}
