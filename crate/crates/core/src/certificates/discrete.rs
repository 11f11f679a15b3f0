use nalgebra::{DMatrix, DVector};

use super::report::Peak;
use super::{generator_columns, stack, subgradients, CheckReport, LAMBDA_GRID};
use crate::dynamics::{eta_from_trajectory, DiscreteTrajectory};
use crate::error::{Error, Result};
use crate::linalg::{signed_lstsq, Sign};
use crate::optimizer::DiscreteSolution;
use crate::transcription::{DecisionVector, DiscreteProblem};

/// Dual certificate of the discrete problem. Vectors indexed by node hold
/// `k + 1` entries, those indexed by interval hold `k`. Stacked vectors are
/// ordered `(x, u, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCertificate {
    pub lambda: f64,
    pub xi: Vec<f64>,
    pub px: Vec<DVector<f64>>,
    pub pu: Vec<DVector<f64>>,
    pub pa: Vec<DVector<f64>>,
    /// Normal multipliers of the dynamics, read off the trajectory.
    pub eta: Vec<DVector<f64>>,
    /// Multiplier at the final node; a dual unknown.
    pub eta_terminal: DVector<f64>,
    pub gamma: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub theta: Vec<DVector<f64>>,
    pub chi: Vec<DVector<f64>>,
    /// Largest equation residual of the build, after normalization.
    pub residual: f64,
    /// `(λ, normalized residual)` for every trial.
    pub lambda_trials: Vec<(f64, f64)>,
}

impl DiscreteCertificate {
    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    /// The nontriviality sum; normalized certificates have it equal to one.
    pub fn weight(&self, dp: &DiscreteProblem) -> f64 {
        let k = self.k();
        let h = dp.mesh.h();
        let c = &dp.problem.polyhedron;
        let pk = (self.px[k].norm_squared() + self.pu[k].norm_squared() + self.pa[k].norm_squared()).sqrt();
        let mut s = self.lambda + self.xi.iter().map(|v| v.abs()).sum::<f64>() + self.pu[0].norm() + self.pa[0].norm() + pk;
        for g in &self.gamma {
            s += h * c.combine(g).norm();
        }
        s
    }

    /// Multiply every dual quantity by `c`; primal data stays.
    pub fn scaled(&self, c: f64) -> Self {
        let sv = |v: &[DVector<f64>]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        DiscreteCertificate {
            lambda: self.lambda * c,
            xi: self.xi.iter().map(|x| x * c).collect(),
            px: sv(&self.px),
            pu: sv(&self.pu),
            pa: sv(&self.pa),
            eta: self.eta.clone(),
            eta_terminal: &self.eta_terminal * c,
            gamma: sv(&self.gamma),
            w: self.w.clone(),
            v: self.v.clone(),
            theta: self.theta.clone(),
            chi: sv(&self.chi),
            residual: self.residual,
            lambda_trials: self.lambda_trials.clone(),
        }
    }

    /// `Y_j = λ(v^x_j + θ^x_j/h) − p^x_{j+1}`, the direction that selects
    /// the featured index sets.
    pub fn direction(&self, dp: &DiscreteProblem, j: usize) -> DVector<f64> {
        let n = dp.problem.n;
        let h = dp.mesh.h();
        let vx = self.v[j].rows(0, n).into_owned();
        let tx = self.theta[j].rows(0, n).into_owned();
        (vx + tx / h) * self.lambda - &self.px[j + 1]
    }
}

/// Column layout of the unknowns `(η_k, γ_0 … γ_{k−1}, ξ_0 … ξ_k)`.
struct Layout {
    m: usize,
    k: usize,
    free_u: bool,
}

impl Layout {
    fn eta_k(&self) -> usize {
        0
    }
    fn gamma(&self, j: usize) -> usize {
        self.m + j * self.m
    }
    fn xi(&self, j: usize) -> usize {
        self.m + self.k * self.m + j
    }
    fn len(&self) -> usize {
        self.m + self.k * self.m + if self.free_u { self.k + 1 } else { 0 }
    }
}

/// Everything the recursion needs that does not depend on the duals.
struct Frame<'a> {
    dp: &'a DiscreteProblem,
    traj: &'a DiscreteTrajectory,
    lay: Layout,
    eta: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    theta: Vec<DVector<f64>>,
    chi: Vec<DVector<f64>>,
    gens: DMatrix<f64>,
    margin: f64,
}

/// `p_j = coef_j ζ + λ cst_j` for every node.
struct Affine {
    coef: Vec<DMatrix<f64>>,
    cst: Vec<DVector<f64>>,
}

impl<'a> Frame<'a> {
    fn new(dp: &'a DiscreteProblem, traj: &'a DiscreteTrajectory, tol: f64) -> Result<Self> {
        let p = &dp.problem;
        traj.check_shape(p.n, p.d)?;
        if traj.mesh != dp.mesh {
            return Err(Error::DimensionMismatch("trajectory mesh differs from the problem".into()));
        }
        let k = traj.k();
        let h = dp.mesh.h();
        let eta = eta_from_trajectory(p, traj)?;
        let (w, v) = subgradients(&dp.problem, traj);
        let z = DecisionVector::from_trajectory(traj);
        let theta = (0..k)
            .map(|j| {
                let [a, b, c] = dp.theta(&z, j);
                stack(&a, &b, &c)
            })
            .collect();
        let mut chi = vec![DVector::zeros(p.n); k];
        if k > 1 {
            chi[1] = (&traj.x[1] - &traj.x[0]) / h;
        }
        Ok(Frame {
            dp,
            traj,
            lay: Layout { m: p.m(), k, free_u: p.u.is_free() },
            eta,
            w,
            v,
            theta,
            chi,
            gens: generator_columns(&dp.problem),
            margin: 10.0 * tol,
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        let p = &self.dp.problem;
        (p.n, p.d, 2 * p.n + p.d)
    }

    fn backward(&self) -> Affine {
        let (n, d, dim) = self.dims();
        let p = &self.dp.problem;
        let lay = &self.lay;
        let k = lay.k;
        let m = lay.m;
        let h = self.dp.mesh.h();
        let nc = lay.len();
        let fx: Vec<DMatrix<f64>> = (0..k).map(|_| p.f.grad_x(n)).collect();
        let fa: Vec<DMatrix<f64>> = (0..k).map(|_| p.f.grad_a(n, d)).collect();

        let mut coef = vec![DMatrix::zeros(dim, nc); k + 1];
        let mut cst = vec![DVector::zeros(dim); k + 1];
        {
            let ck = &mut coef[k];
            for i in 0..m {
                for r in 0..n {
                    ck[(r, lay.eta_k() + i)] = -self.gens[(r, i)];
                    if lay.free_u {
                        ck[(n + r, lay.eta_k() + i)] = self.gens[(r, i)];
                    }
                }
            }
            if lay.free_u {
                for r in 0..n {
                    ck[(n + r, lay.xi(k))] = -2.0 * self.traj.u[k][r];
                }
            }
            let g = p.phi.gradient(&self.traj.x[k]);
            cst[k].rows_mut(0, n).copy_from(&(-g));
        }
        for j in (0..k).rev() {
            let next_coef = coef[j + 1].clone();
            let next_cst = cst[j + 1].clone();
            let yc = -next_coef.rows(0, n).into_owned();
            let yk = self.v[j].rows(0, n) + self.theta[j].rows(0, n) / h - next_cst.rows(0, n);
            let mut cj = next_coef;
            let mut sj = next_cst;
            // x block
            let fxt = fx[j].transpose();
            let dx = &fxt * &yc;
            for r in 0..n {
                for c in 0..nc {
                    cj[(r, c)] -= h * dx[(r, c)];
                }
                for i in 0..m {
                    cj[(r, lay.gamma(j) + i)] -= h * self.gens[(r, i)];
                }
            }
            let sx = self.w[j].rows(0, n) + &self.chi[j] + &fxt * &yk;
            for r in 0..n {
                sj[r] -= h * sx[r];
            }
            // u block
            if lay.free_u {
                for r in 0..n {
                    cj[(n + r, lay.xi(j))] -= 2.0 * self.traj.u[j][r];
                    for i in 0..m {
                        cj[(n + r, lay.gamma(j) + i)] += h * self.gens[(r, i)];
                    }
                    sj[n + r] -= h * self.w[j][n + r];
                }
            }
            // a block
            let fat = fa[j].transpose();
            let da = &fat * &yc;
            let sa = self.w[j].rows(2 * n, d) + &fat * &yk;
            for r in 0..d {
                for c in 0..nc {
                    cj[(2 * n + r, c)] -= h * da[(r, c)];
                }
                sj[2 * n + r] -= h * sa[r];
            }
            coef[j] = cj;
            cst[j] = sj;
        }
        Affine { coef, cst }
    }

    /// Velocity matching and implication rows, `E ζ = λ e`.
    fn rows(&self, aff: &Affine) -> (DMatrix<f64>, DVector<f64>) {
        let (n, d, _) = self.dims();
        let h = self.dp.mesh.h();
        let nc = self.lay.len();
        let mut er: Vec<Vec<f64>> = Vec::new();
        let mut ev: Vec<f64> = Vec::new();
        for j in 0..self.lay.k {
            let c1 = &aff.coef[j + 1];
            let s1 = &aff.cst[j + 1];
            let mut push_block = |off: usize, len: usize| {
                for r in 0..len {
                    er.push(c1.row(off + r).iter().copied().collect());
                    ev.push(self.v[j][off + r] + self.theta[j][off + r] / h - s1[off + r]);
                }
            };
            push_block(2 * n, d);
            if self.lay.free_u {
                push_block(n, n);
            }
            for i in 0..self.lay.m {
                if self.eta[j][i] > self.margin {
                    let g = self.gens.column(i);
                    let row: Vec<f64> = (0..nc).map(|c| -g.dot(&c1.column(c).rows(0, n))).collect();
                    let rhs = -g.dot(&(self.v[j].rows(0, n) + self.theta[j].rows(0, n) / h - s1.rows(0, n)));
                    er.push(row);
                    ev.push(rhs);
                }
            }
        }
        let mut e = DMatrix::zeros(er.len(), nc);
        for (r, row) in er.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                e[(r, c)] = val;
            }
        }
        (e, DVector::from_vec(ev))
    }

    fn initial_signs(&self) -> Vec<Sign> {
        let lay = &self.lay;
        let p = &self.dp.problem;
        let c = &p.polyhedron;
        let mut s = vec![Sign::Zero; lay.len()];
        let vk = c.values(&self.traj.gap(lay.k));
        for i in 0..lay.m {
            if vk[i] >= -self.margin {
                s[lay.eta_k() + i] = Sign::NonNeg;
            }
        }
        for j in 0..lay.k {
            let vj = c.values(&self.traj.gap(j));
            for i in 0..lay.m {
                if vj[i] >= -self.margin {
                    s[lay.gamma(j) + i] = Sign::Free;
                }
            }
        }
        if lay.free_u {
            for j in 0..=lay.k {
                s[lay.xi(j)] = self.xi_sign(j);
            }
        }
        s
    }

    /// Sign of `ξ_j` from the normal cone to the relaxed norm band.
    fn xi_sign(&self, j: usize) -> Sign {
        let p = &self.dp.problem;
        if j < self.lay.k && self.dp.mesh.in_window(j, p.tau) {
            return Sign::Free;
        }
        let (lo, hi) = self.band();
        let nu = self.traj.u[j].norm();
        let at_hi = nu >= hi - self.margin;
        let at_lo = nu <= lo + self.margin;
        match (at_lo, at_hi) {
            (true, true) => Sign::Free,
            (false, true) => Sign::NonNeg,
            (true, false) => Sign::NonPos,
            (false, false) => Sign::Zero,
        }
    }

    fn band(&self) -> (f64, f64) {
        let p = &self.dp.problem;
        let e = p.tau + self.dp.eps_k;
        (p.r - e, p.r + e)
    }

    fn assemble(&self, aff: &Affine, zeta: &DVector<f64>, lambda: f64, residual: f64) -> DiscreteCertificate {
        let (n, d, _) = self.dims();
        let lay = &self.lay;
        let k = lay.k;
        let m = lay.m;
        let p: Vec<DVector<f64>> = (0..=k).map(|j| &aff.coef[j] * zeta + &aff.cst[j] * lambda).collect();
        DiscreteCertificate {
            lambda,
            xi: (0..=k).map(|j| if lay.free_u { zeta[lay.xi(j)] } else { 0.0 }).collect(),
            px: p.iter().map(|v| v.rows(0, n).into_owned()).collect(),
            pu: p
                .iter()
                .map(|v| if lay.free_u { v.rows(n, n).into_owned() } else { DVector::zeros(n) })
                .collect(),
            pa: p.iter().map(|v| v.rows(2 * n, d).into_owned()).collect(),
            eta: self.eta.clone(),
            eta_terminal: zeta.rows(lay.eta_k(), m).into_owned(),
            gamma: (0..k).map(|j| zeta.rows(lay.gamma(j), m).into_owned()).collect(),
            w: self.w.clone(),
            v: self.v.clone(),
            theta: self.theta.clone(),
            chi: self.chi.iter().map(|c| c * lambda).collect(),
            residual,
            lambda_trials: Vec::new(),
        }
    }
}

/// Solve the linear system for the duals at a fixed `λ`, iterating the
/// sign pattern of `γ` until it agrees with the featured index sets.
fn solve_at(fr: &Frame, aff: &Affine, e: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<(DVector<f64>, f64)> {
    let lay = &fr.lay;
    let c = &fr.dp.problem.polyhedron;
    let b = rhs * lambda;
    let mut signs = fr.initial_signs();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _ in 0..12 {
        let (zeta, _) = signed_lstsq(e, &b, &signs)?;
        let res = if e.nrows() == 0 { 0.0 } else { (e * &zeta - &b).amax() };
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((zeta.clone(), res));
        }
        let cert = fr.assemble(aff, &zeta, lambda, res);
        let mut next = signs.clone();
        for j in 0..lay.k {
            let gap = c.values(&fr.traj.gap(j));
            let vals = c.values(&cert.direction(fr.dp, j));
            for i in 0..lay.m {
                if gap[i] < -fr.margin {
                    continue;
                }
                next[lay.gamma(j) + i] = if vals[i] > fr.margin {
                    Sign::NonNeg
                } else if vals[i] < -fr.margin {
                    Sign::Zero
                } else {
                    Sign::Free
                };
            }
        }
        if next == signs {
            break;
        }
        signs = next;
    }
    Ok(best.expect("at least one solve"))
}

/// Build the dual certificate of a discrete solution.
pub fn build_discrete_certificate(dp: &DiscreteProblem, sol: &DiscreteSolution, tol: f64) -> Result<DiscreteCertificate> {
    build_for_trajectory(dp, &sol.traj, tol)
}

/// Same as [`build_discrete_certificate`] for any feasible discrete trajectory.
pub fn build_for_trajectory(dp: &DiscreteProblem, traj: &DiscreteTrajectory, tol: f64) -> Result<DiscreteCertificate> {
    let fr = Frame::new(dp, traj, tol)?;
    let aff = fr.backward();
    let (e, rhs) = fr.rows(&aff);
    let mut trials = Vec::new();
    let mut chosen: Option<(f64, DiscreteCertificate)> = None;
    for &lambda in LAMBDA_GRID.iter() {
        let (zeta, res) = solve_at(&fr, &aff, &e, &rhs, lambda)?;
        let cert = fr.assemble(&aff, &zeta, lambda, res);
        let s = cert.weight(dp);
        if s <= 1e-14 {
            trials.push((lambda, if res <= tol { 0.0 } else { f64::INFINITY }));
            continue;
        }
        let normalized = res / s;
        trials.push((lambda, normalized));
        if normalized <= tol && chosen.as_ref().is_none_or(|(r, _)| normalized < *r - 1e-12) {
            let mut c = cert.scaled(1.0 / s);
            c.residual = normalized;
            chosen = Some((normalized, c));
        }
    }
    let mut cert = match chosen {
        Some((_, c)) => c,
        None => {
            let best = trials.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
            if trials.last().is_some_and(|t| t.0 == 0.0 && t.1 == 0.0) {
                // only the trivial multiplier set is consistent
                let zeta = DVector::zeros(fr.lay.len());
                fr.assemble(&aff, &zeta, 0.0, 0.0)
            } else {
                return Err(Error::NoConsistentDuals { residual: best });
            }
        }
    };
    cert.lambda_trials = trials;
    Ok(cert)
}

/// Evaluate every condition of the discrete optimality system.
pub fn check_discrete(dp: &DiscreteProblem, traj: &DiscreteTrajectory, cert: &DiscreteCertificate, tol: f64) -> CheckReport {
    let p = &dp.problem;
    let (n, d) = (p.n, p.d);
    let k = dp.k();
    let h = dp.mesh.h();
    let c = &p.polyhedron;
    let m = c.len();
    let margin = 10.0 * tol;
    let free_u = p.u.is_free();

    let shape_ok = traj.check_shape(n, d).is_ok()
        && traj.k() == k
        && cert.k() == k
        && cert.px.len() == k + 1
        && cert.xi.len() == k + 1
        && cert.eta.len() == k;
    let mut rep = CheckReport::new(cert.lambda);
    if !shape_ok {
        rep.record("shape", f64::INFINITY, 0.0, None);
        return rep.finish();
    }
    let s = cert.weight(dp);
    let cert = if s > 0.0 { cert.scaled(1.0 / s) } else { cert.clone() };
    rep.lambda = cert.lambda;
    let lam = cert.lambda;
    let t = |j: usize| dp.mesh.t(j);

    rep.record("lambda_sign", (-lam).max(0.0), tol, None);

    // dynamics and the sign of η
    let mut dyn_peak = Peak::default();
    for j in 0..k {
        let rhs = c.combine(&cert.eta[j]);
        let r = (-traj.xdot(j) - p.f.eval(&traj.x[j], &traj.a[j]) - rhs).amax();
        let neg = cert.eta[j].iter().fold(0.0f64, |acc, &e| acc.max(-e));
        dyn_peak.see(r.max(neg), t(j));
    }
    rep.record_max("dynamics", dyn_peak, tol);

    // subgradients
    let (w, v) = subgradients(&dp.problem, traj);
    let mut sub = Peak::default();
    for j in 0..k {
        let fixed = (&cert.w[j] - &w[j]).amax().max((cert.v[j].rows(0, 2 * n) - v[j].rows(0, 2 * n)).amax());
        let ivals = p.ell.adot_interval(t(j), &traj.adot(j));
        let a_off = ivals
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| crate::cost::dist_to_interval(cert.v[j][2 * n + i], lo, hi))
            .fold(0.0, f64::max);
        sub.see(fixed.max(a_off), t(j));
    }
    rep.record_max("subgradient", sub, tol);

    // adjoint recursions
    let fx = p.f.grad_x(n).transpose();
    let fa = p.f.grad_a(n, d).transpose();
    let mut ax = Peak::default();
    let mut au = Peak::default();
    let mut aa = Peak::default();
    for j in 0..k {
        let y = cert.direction(dp, j);
        let g = c.combine(&cert.gamma[j]);
        let wx = cert.w[j].rows(0, n).into_owned();
        let wu = cert.w[j].rows(n, n).into_owned();
        let wa = cert.w[j].rows(2 * n, d).into_owned();
        let rx = &cert.px[j] - &cert.px[j + 1] + h * (wx * lam + &cert.chi[j] + &fx * &y + &g);
        ax.see(rx.amax(), t(j));
        if free_u {
            let ru = &cert.pu[j] - &cert.pu[j + 1] + h * (wu * lam - &g) + 2.0 * cert.xi[j] * &traj.u[j];
            au.see(ru.amax(), t(j));
        }
        let ra = &cert.pa[j] - &cert.pa[j + 1] + h * (wa * lam + &fa * &y);
        aa.see(ra.amax(), t(j));
    }
    rep.record_max("adjoint_x", ax, tol);
    if free_u {
        rep.record_max("adjoint_u", au, tol);
    } else {
        rep.skip("adjoint_u", "u is prescribed");
    }
    rep.record_max("adjoint_a", aa, tol);

    // velocity matching
    let mut vm = Peak::default();
    for j in 0..k {
        let target = (&cert.v[j] + &cert.theta[j] / h) * lam;
        let mut r = (&cert.pa[j + 1] - target.rows(2 * n, d)).amax();
        if free_u {
            r = r.max((&cert.pu[j + 1] - target.rows(n, n)).amax());
        }
        vm.see(r, t(j));
    }
    rep.record_max("velocity_matching", vm, tol);

    // implications on η and the structure of γ
    let mut imp = Peak::default();
    let mut gin = Peak::default();
    let mut gsign = Peak::default();
    for j in 0..k {
        let g0 = c.values(&traj.gap(j));
        let g1 = c.values(&traj.gap(j + 1));
        let y = c.values(&cert.direction(dp, j));
        for i in 0..m {
            if g0[i] < -margin && g1[i] < -margin {
                imp.see(cert.eta[j][i].abs(), t(j));
            }
            if cert.eta[j][i] > margin {
                imp.see(y[i].abs(), t(j));
            }
            let gm = cert.gamma[j][i];
            if g0[i] < -margin {
                gin.see(gm.abs(), t(j));
            } else if y[i] > margin {
                gsign.see((-gm).max(0.0), t(j));
            } else if y[i] < -margin {
                gsign.see(gm.abs(), t(j));
            }
        }
    }
    rep.record_max("eta_implication", imp, tol);
    rep.record_max("gamma_inactive", gin, tol);
    rep.record_max("gamma_sign", gsign, tol);

    // normal cone to the norm band
    if free_u {
        let e = p.tau + dp.eps_k;
        let (lo, hi) = (p.r - e, p.r + e);
        let mut xn = Peak::default();
        for j in 0..=k {
            if j < k && dp.mesh.in_window(j, p.tau) {
                continue;
            }
            let nu = traj.u[j].norm();
            let x = cert.xi[j];
            let r = match (nu <= lo + margin, nu >= hi - margin) {
                (true, true) => 0.0,
                (false, true) => (-x).max(0.0),
                (true, false) => x.max(0.0),
                (false, false) => x.abs(),
            };
            xn.see(r, t(j));
        }
        rep.record_max("xi_normal", xn, tol);
    } else {
        rep.skip("xi_normal", "u is prescribed");
    }

    // right endpoint
    let ek = c.combine(&cert.eta_terminal);
    let mut tr = (&cert.px[k] + p.phi.gradient(&traj.x[k]) * lam + &ek).amax().max(cert.pa[k].amax());
    if free_u {
        tr = tr.max((&cert.pu[k] - &ek + 2.0 * cert.xi[k] * &traj.u[k]).amax());
    }
    rep.record("transversality", tr, tol, Some(t(k)));
    let gk = c.values(&traj.gap(k));
    let mut tm = 0.0f64;
    for i in 0..m {
        let e = cert.eta_terminal[i];
        tm = tm.max((-e).max(0.0));
        if gk[i] < -margin {
            tm = tm.max(e.abs());
        }
    }
    rep.record("terminal_multiplier", tm, tol, Some(t(k)));

    let weight = cert.weight(dp);
    rep.record("nontriviality", (margin - weight).max(0.0), 0.0, None);
    rep.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{RunningCost, TerminalCost};
    use crate::dynamics::{ControlPath, Perturbation, SweepingProblem, UControl};
    use crate::geometry::Polyhedron;
    use crate::optimizer::{solve_discrete, SolveOptions};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn ex41() -> SweepingProblem {
        let mut ell = RunningCost::zero(1, 1);
        ell.a_weight = 1.0;
        SweepingProblem {
            n: 1,
            d: 1,
            horizon: 1.0,
            x0: v(&[0.0]),
            polyhedron: Polyhedron::new(vec![v(&[1.0])]).unwrap(),
            r: 0.5,
            tau: 0.0,
            f: Perturbation::Identity,
            phi: TerminalCost::new(1.0, v(&[1.0])),
            ell,
            u: UControl::Fixed(ControlPath::constant(v(&[0.5]))),
            growth: None,
            terminal_on_boundary: false,
        }
    }

    /// Far from the constraint, tracking `a ≡ −1` with no terminal cost.
    fn interior(u: UControl) -> SweepingProblem {
        let mut p = ex41();
        p.phi = TerminalCost::new(0.0, v(&[0.0]));
        p.ell.a_shift = v(&[1.0]);
        p.r = 5.0;
        p.u = u;
        p
    }

    #[test]
    fn interior_problem_has_no_measure() {
        let dp = DiscreteProblem::new(interior(UControl::Fixed(ControlPath::constant(v(&[5.0])))), 20).unwrap();
        let sol = solve_discrete(&dp, &SolveOptions { multistart: 1, ..Default::default() }).unwrap();
        let cert = build_discrete_certificate(&dp, &sol, 1e-6).unwrap();
        assert!(cert.lambda > 0.0, "{:?}", cert.lambda_trials);
        assert!(cert.gamma.iter().all(|g| g.amax() == 0.0));
        assert!(cert.eta.iter().all(|e| e.amax() < 1e-9));
        let p0 = cert.px[2][0];
        assert!(cert.px[2..].iter().all(|q| (q[0] - p0).abs() < 1e-9));
        let rep = check_discrete(&dp, &sol.traj, &cert, 1e-6);
        assert!(rep.verdict, "{:?}", rep.failing());
    }

    #[test]
    fn terminal_gradient_without_contact_has_no_multiplier() {
        // the adjoint and transversality signs only reconcile through a
        // terminal normal, which an inactive endpoint cannot supply
        let mut p = ex41();
        p.u = UControl::Fixed(ControlPath::constant(v(&[5.0])));
        let dp = DiscreteProblem::new(p, 20).unwrap();
        let sol = solve_discrete(&dp, &SolveOptions { multistart: 1, ..Default::default() }).unwrap();
        let cert = build_discrete_certificate(&dp, &sol, 1e-6).unwrap();
        assert_eq!(cert.lambda, 0.0);
        assert!(!check_discrete(&dp, &sol.traj, &cert, 1e-6).verdict);
    }

    #[test]
    fn ex41_round_trip_and_faults() {
        let dp = DiscreteProblem::new(ex41(), 50).unwrap();
        let sol = solve_discrete(&dp, &SolveOptions { multistart: 1, ..Default::default() }).unwrap();
        let cert = build_discrete_certificate(&dp, &sol, 1e-6).unwrap();
        assert!(cert.lambda > 0.0);
        // λ a_j = p^x_{j+1} on the interior steps
        for j in 1..49 {
            assert!((cert.lambda * sol.traj.a[j][0] - cert.px[j + 1][0]).abs() < 1e-5);
        }
        let rep = check_discrete(&dp, &sol.traj, &cert, 1e-6);
        assert!(rep.verdict, "{:?}", rep.failing());

        let mut zero = cert.scaled(0.0);
        zero.eta = cert.eta.clone();
        let rep = check_discrete(&dp, &sol.traj, &zero, 1e-6);
        assert_eq!(rep.failing(), vec!["nontriviality"]);

        let mut bad = cert.clone();
        bad.pa[0][0] += 1.0;
        let rep = check_discrete(&dp, &sol.traj, &bad, 1e-6);
        assert!(rep.failing().contains(&"adjoint_a"));

        // scaling leaves the verdict alone
        assert!(check_discrete(&dp, &sol.traj, &cert.scaled(7.0), 1e-6).verdict);
    }

    #[test]
    fn free_u_fault_in_adjoint() {
        let dp = DiscreteProblem::new(interior(UControl::Free(ControlPath::constant(v(&[5.0])))), 40).unwrap();
        let sol = solve_discrete(&dp, &SolveOptions { multistart: 1, ..Default::default() }).unwrap();
        let cert = build_discrete_certificate(&dp, &sol, 1e-6).unwrap();
        let rep = check_discrete(&dp, &sol.traj, &cert, 1e-6);
        assert!(rep.verdict, "{:?} {:?}", rep.failing(), cert.lambda_trials);
        let mut bad = cert.clone();
        bad.pu[0][0] += 1.0;
        let rep = check_discrete(&dp, &sol.traj, &bad, 1e-6);
        assert!(rep.failing().contains(&"adjoint_u"));
    }

    #[test]
    fn non_optimal_point_is_rejected() {
        let dp = DiscreteProblem::new(ex41(), 30).unwrap();
        let sol = solve_discrete(&dp, &SolveOptions { multistart: 1, ..Default::default() }).unwrap();
        let mut tr = sol.traj.clone();
        for (j, a) in tr.a.iter_mut().enumerate() {
            a[0] = -0.2 - 0.01 * j as f64;
        }
        let (tr, _) = crate::dynamics::catching_up_sampled(&dp.problem, dp.mesh, &tr.u, &tr.a).unwrap();
        match build_for_trajectory(&dp, &tr, 1e-6) {
            Err(Error::NoConsistentDuals { .. }) => {}
            Ok(c) => assert!(!check_discrete(&dp, &tr, &c, 1e-6).verdict),
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
