use nalgebra::{DMatrix, DVector};

use super::report::Peak;
use super::{adot_hull, generator_columns, stack, subgradients, CheckReport, DiscreteCertificate, LAMBDA_GRID};
use crate::cost::dist_to_interval;
use crate::dynamics::{apriori_bounds, eta_midpoint, eta_terminal, DiscreteTrajectory, Mesh, SweepingProblem};
use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg::{signed_lstsq, Sign};

/// Continuous-time certificate sampled on a mesh. `p` is absolutely
/// continuous and stored at the nodes. The measures are atoms at nodes plus
/// piecewise-constant densities on intervals. `q` is the left-continuous
/// track `q(t) = p(t) − ∫_{[t,T]}(dγ, 2u dξ − dγ, 0)`, stacked `(x, u, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousCertificate {
    pub lambda: f64,
    pub mesh: Mesh,
    pub px: Vec<DVector<f64>>,
    pub pu: Vec<DVector<f64>>,
    pub pa: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    /// `η` on each interval.
    pub eta: Vec<DVector<f64>>,
    pub eta_terminal: DVector<f64>,
    pub gamma_atoms: Vec<DVector<f64>>,
    pub gamma_density: Vec<DVector<f64>>,
    pub xi_atoms: Vec<f64>,
    pub xi_density: Vec<f64>,
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// Times where the measure mass concentrates across refinements.
    pub detected_atoms: Vec<f64>,
}

impl ContinuousCertificate {
    pub fn k(&self) -> usize {
        self.mesh.k
    }

    /// `γ([t_j, T])`.
    pub fn gamma_tail(&self, j: usize) -> DVector<f64> {
        let h = self.mesh.h();
        let mut s = DVector::zeros(self.px[0].len());
        for i in j..=self.k() {
            s += &self.gamma_atoms[i];
        }
        for i in j..self.k() {
            s += &self.gamma_density[i] * h;
        }
        s
    }

    /// `γ([t, T])` for any `t`.
    pub fn gamma_tail_at(&self, t: f64) -> DVector<f64> {
        let h = self.mesh.h();
        let k = self.k();
        let j = ((t / h).ceil() as usize).min(k);
        let mut s = self.gamma_tail(j);
        if j > 0 && self.mesh.t(j) > t {
            s += &self.gamma_density[j - 1] * (self.mesh.t(j) - t);
        }
        s
    }

    /// Total variation of `γ` on the closed interval `[t0, t1]`.
    pub fn gamma_mass(&self, t0: f64, t1: f64) -> f64 {
        let h = self.mesh.h();
        let mut s = 0.0;
        for j in 0..=self.k() {
            let t = self.mesh.t(j);
            if t >= t0 && t <= t1 {
                s += self.gamma_atoms[j].norm();
            }
        }
        for j in 0..self.k() {
            let (a, b) = (self.mesh.t(j).max(t0), (self.mesh.t(j) + h).min(t1));
            if b > a {
                s += self.gamma_density[j].norm() * (b - a);
            }
        }
        s
    }

    pub fn gamma_variation(&self) -> f64 {
        self.gamma_mass(0.0, self.mesh.horizon)
    }

    pub fn xi_variation(&self) -> f64 {
        let h = self.mesh.h();
        self.xi_atoms.iter().map(|x| x.abs()).sum::<f64>() + self.xi_density.iter().map(|x| x.abs() * h).sum::<f64>()
    }

    /// Rebuild `q` from `p` and the measures.
    pub fn refresh_q(&mut self, traj: &DiscreteTrajectory) {
        let k = self.k();
        let h = self.mesh.h();
        let n = self.px[0].len();
        let mut g = DVector::zeros(n);
        let mut uxi = DVector::zeros(n);
        let mut q = vec![DVector::zeros(0); k + 1];
        for j in (0..=k).rev() {
            g += &self.gamma_atoms[j];
            uxi += &traj.u[j] * (2.0 * self.xi_atoms[j]);
            if j < k {
                g += &self.gamma_density[j] * h;
                uxi += (&traj.u[j] + &traj.u[j + 1]) * (h * self.xi_density[j]);
            }
            q[j] = stack(&(&self.px[j] - &g), &(&self.pu[j] - (&uxi - &g)), &self.pa[j]);
        }
        self.q = q;
    }

    /// `λ + ‖p(T)‖ + ‖q^u(0)‖ + ‖q^a(0)‖` plus the variations of both measures.
    pub fn weight(&self) -> f64 {
        let k = self.k();
        let n = self.px[0].len();
        let pt = (self.px[k].norm_squared() + self.pu[k].norm_squared() + self.pa[k].norm_squared()).sqrt();
        let q0 = &self.q[0];
        let qu = q0.rows(n, n).norm();
        let qa = q0.rows(2 * n, q0.len() - 2 * n).norm();
        self.lambda + pt + qu + qa + self.xi_variation() + self.gamma_variation()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let sv = |v: &[DVector<f64>]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        ContinuousCertificate {
            lambda: self.lambda * c,
            mesh: self.mesh,
            px: sv(&self.px),
            pu: sv(&self.pu),
            pa: sv(&self.pa),
            q: sv(&self.q),
            eta: self.eta.clone(),
            eta_terminal: self.eta_terminal.clone(),
            gamma_atoms: sv(&self.gamma_atoms),
            gamma_density: sv(&self.gamma_density),
            xi_atoms: self.xi_atoms.iter().map(|x| x * c).collect(),
            xi_density: self.xi_density.iter().map(|x| x * c).collect(),
            w: self.w.clone(),
            v: self.v.clone(),
            detected_atoms: self.detected_atoms.clone(),
        }
    }

    /// Divide by `λ` when it carries the certificate, otherwise by the
    /// full nontriviality sum.
    pub fn normalized(&self, tol: f64) -> Self {
        let s = self.weight();
        if s <= 0.0 {
            return self.clone();
        }
        if self.lambda / s > tol {
            self.scaled(1.0 / self.lambda)
        } else {
            self.scaled(1.0 / s)
        }
    }
}

/// Normal cone to `[lo, hi]` at `v`, as a sign restriction.
fn band_sign(v: f64, lo: f64, hi: f64, margin: f64) -> Sign {
    match (v <= lo + margin, v >= hi - margin) {
        (true, true) => Sign::Free,
        (false, true) => Sign::NonNeg,
        (true, false) => Sign::NonPos,
        (false, false) => Sign::Zero,
    }
}

/// Distance from `target` to `{s·dir : s restricted by sign}`.
fn ray_distance(target: &DVector<f64>, dir: &DVector<f64>, sign: Sign) -> f64 {
    let dd = dir.norm_squared();
    let mut s = if dd > 0.0 { target.dot(dir) / dd } else { 0.0 };
    s = match sign {
        Sign::Free => s,
        Sign::NonNeg => s.max(0.0),
        Sign::NonPos => s.min(0.0),
        Sign::Zero => 0.0,
        Sign::Between(lo, hi) => s.clamp(lo, hi),
    };
    (target - dir * s).norm()
}

/// Evaluate every continuous-time condition on the mesh of `traj`.
pub fn check_continuous(
    problem: &SweepingProblem,
    traj: &DiscreteTrajectory,
    cert: &ContinuousCertificate,
    tol: f64,
) -> CheckReport {
    let p = problem;
    let (n, d) = (p.n, p.d);
    let k = traj.k();
    let mut rep = CheckReport::new(cert.lambda);
    let shape_ok = traj.check_shape(n, d).is_ok()
        && cert.mesh == traj.mesh
        && cert.px.len() == k + 1
        && cert.q.len() == k + 1
        && cert.eta.len() == k
        && cert.gamma_atoms.len() == k + 1
        && cert.gamma_density.len() == k
        && cert.xi_atoms.len() == k + 1
        && cert.xi_density.len() == k
        && cert.w.len() == k
        && cert.v.len() == k;
    if !shape_ok {
        rep.record("shape", f64::INFINITY, 0.0, None);
        return rep.finish();
    }
    let h = traj.mesh.h();
    let c = &p.polyhedron;
    let m = c.len();
    let margin = 10.0 * tol;
    let free_u = p.u.is_free();
    let t = |j: usize| traj.mesh.t(j);

    // the q identity is checked on the certificate as given
    let mut rebuilt = cert.clone();
    rebuilt.refresh_q(traj);
    let mut bv = Peak::default();
    for j in 0..=k {
        bv.see((&rebuilt.q[j] - &cert.q[j]).amax(), t(j));
    }

    let cert = cert.normalized(tol);
    let lam = cert.lambda;
    rep.lambda = lam;
    rep.record("lambda_sign", (-lam).max(0.0), tol, None);

    // primal representation
    let eta_ref = eta_midpoint(p, traj).and_then(|e| {
        let et = eta_terminal(p, traj, &e[k - 1])?;
        Ok((e, et))
    });
    match &eta_ref {
        Ok((e, et)) => {
            let mut pr = Peak::default();
            for j in 0..k {
                pr.see((&cert.eta[j] - &e[j]).amax(), t(j));
            }
            pr.see((&cert.eta_terminal - et).amax(), t(k));
            rep.record_max("primal_representation", pr, tol);
        }
        Err(err) => {
            rep.record("primal_representation", f64::INFINITY, tol, None);
            rep.annotate("primal_representation", &err.to_string());
        }
    }

    // subgradients
    let (w, v) = subgradients(p, traj);
    let mut sub = Peak::default();
    for j in 0..k {
        let fixed = (&cert.w[j] - &w[j]).amax().max((cert.v[j].rows(0, 2 * n) - v[j].rows(0, 2 * n)).amax());
        sub.see(fixed, t(j));
    }
    rep.record_max("subgradient", sub, tol);

    // adjoint arc in integrated form, q taken at the right end of each interval
    let qx = |j: usize| cert.q[j].rows(0, n).into_owned();
    let qu = |j: usize| cert.q[j].rows(n, n).into_owned();
    let qa = |j: usize| cert.q[j].rows(2 * n, d).into_owned();
    let mut ax = Peak::default();
    let mut au = Peak::default();
    let mut aa = Peak::default();
    let mut qa_sub = Peak::default();
    let mut qu_grad = Peak::default();
    for j in 0..k {
        let fx = p.f.grad_x(n).transpose();
        let fa = p.f.grad_a(n, d).transpose();
        let y = cert.v[j].rows(0, n) * lam - qx(j + 1);
        let rx = &cert.px[j + 1] - &cert.px[j] - h * (cert.w[j].rows(0, n) * lam + &fx * &y);
        let ru = &cert.pu[j + 1] - &cert.pu[j] - h * lam * cert.w[j].rows(n, n);
        let ra = &cert.pa[j + 1] - &cert.pa[j] - h * (cert.w[j].rows(2 * n, d) * lam + &fa * &y);
        ax.see(rx.amax(), t(j));
        au.see(ru.amax(), t(j));
        aa.see(ra.amax(), t(j));
        let iv = adot_hull(&p.ell, t(j), t(j + 1), &traj.adot(j));
        let q = qa(j + 1);
        let r = iv.iter().enumerate().map(|(i, &(lo, hi))| dist_to_interval(q[i], lam * lo, lam * hi)).fold(0.0, f64::max);
        qa_sub.see(r, t(j));
        if free_u {
            qu_grad.see((qu(j + 1) - cert.v[j].rows(n, n) * lam).amax(), t(j));
        }
    }
    rep.record_max("adjoint_x", ax, tol);
    rep.record_max("adjoint_u", au, tol);
    rep.record_max("adjoint_a", aa, tol);
    rep.record_max("qa_subgradient", qa_sub, tol);
    if free_u {
        rep.record_max("qu_gradient", qu_grad, tol);
    } else {
        rep.skip("qu_gradient", "u is prescribed");
    }
    rep.record_max("bv_identity", bv, 1e-8_f64.max(tol));

    // complementarity
    let gaps: Vec<DVector<f64>> = (0..=k).map(|j| c.values(&traj.gap(j))).collect();
    let mut imp = Peak::default();
    for j in 0..k {
        let y = c.values(&(cert.v[j].rows(0, n) * lam - qx(j + 1)));
        for i in 0..m {
            if gaps[j][i] < -margin && gaps[j + 1][i] < -margin {
                imp.see(cert.eta[j][i].abs(), t(j));
            }
            if cert.eta[j][i] > margin {
                imp.see(y[i].abs(), t(j));
            }
        }
    }
    {
        let y = c.values(&(cert.v[k - 1].rows(0, n) * lam - qx(k)));
        for i in 0..m {
            if gaps[k][i] < -margin {
                imp.see(cert.eta_terminal[i].abs(), t(k));
            }
            if cert.eta_terminal[i] > margin {
                imp.see(y[i].abs(), t(k));
            }
        }
    }
    rep.record_max("eta_implication", imp, tol);

    // right endpoint
    let ek = c.combine(&cert.eta_terminal);
    let (lo, hi) = (p.r - p.tau, p.r + p.tau);
    let mut rt = (&cert.px[k] + p.phi.gradient(&traj.x[k]) * lam + &ek).amax().max(cert.pa[k].amax());
    if free_u {
        let uk = &traj.u[k];
        let sign = band_sign(uk.norm(), lo, hi, margin);
        rt = rt.max(ray_distance(&(&cert.pu[k] - &ek), &(uk * 2.0), sign));
    }
    rep.record("right_transversality", rt, tol, Some(t(k)));
    let mut cone = 0.0f64;
    for i in 0..m {
        let e = cert.eta_terminal[i];
        cone = cone.max((-e).max(0.0));
        if gaps[k][i] < -margin {
            cone = cone.max(e.abs());
        }
    }
    rep.record("right_transversality_cone", cone, tol, Some(t(k)));

    // left endpoint
    let mut lt = (qa(0) - cert.v[0].rows(2 * n, d) * lam).amax();
    if free_u {
        lt = lt.max(left_u_residual(p, traj, &cert, margin));
    }
    rep.record("left_transversality", lt, tol, Some(0.0));

    // nonatomicity of γ on strictly inactive stretches of [0, T)
    let inactive: Vec<bool> = (0..k).map(|j| gaps[j].iter().all(|&g| g < -margin)).collect();
    let mut na = Peak::default();
    let mut j = 0;
    while j < k {
        if !inactive[j] {
            j += 1;
            continue;
        }
        let start = j;
        let mut mass = 0.0;
        while j < k && inactive[j] {
            mass += cert.gamma_atoms[j].norm();
            if j + 1 < k && inactive[j + 1] {
                mass += cert.gamma_density[j].norm() * h;
            }
            j += 1;
        }
        na.see(mass, t(start));
    }
    rep.record_max("nonatomicity_gamma", na, tol);

    // nonatomicity of ξ near the endpoints where the norm band is slack
    let tb = p.tau.min(p.r).min(p.horizon);
    if free_u && p.tau > 0.0 && p.tau < tb.max(p.tau) + 1.0 && p.tau < p.r.min(p.horizon) {
        let slack = |j: usize| {
            let tj = t(j);
            let nu = traj.u[j].norm();
            (tj < p.tau || tj > p.horizon - p.tau) && nu > lo + margin && nu < hi - margin
        };
        let mut nx = Peak::default();
        for j in 0..=k {
            if slack(j) {
                nx.see(cert.xi_atoms[j].abs(), t(j));
                if j < k && slack(j + 1) {
                    nx.see(cert.xi_density[j].abs() * h, t(j));
                }
            }
        }
        rep.record_max("nonatomicity_xi", nx, tol);
    } else {
        rep.skip("nonatomicity_xi", "no slack endpoint window");
    }

    // nontriviality
    let pt = (cert.px[k].norm_squared() + cert.pu[k].norm_squared() + cert.pa[k].norm_squared()).sqrt();
    let qu0 = if free_u { qu(0).norm() } else { 0.0 };
    let off_sphere = (0..k).all(|j| (traj.x[j].dot(&traj.u[j]) - traj.u[j].norm_squared()).abs() > margin);
    let a_sup = traj.a.iter().map(|a| a.norm()).fold(0.0, f64::max);
    let udot_int: f64 = (0..k).map(|j| traj.udot(j).norm() * h).sum();
    let l = apriori_bounds(p, p.growth_for(a_sup), udot_int).l;
    let small_l = l * (p.r + 2.0 * p.tau) < (p.r - 2.0 * p.tau).powi(2);
    let end_ok = p.tau < p.r || traj.u[k].norm() > margin;
    if (off_sphere || small_l) && end_ok {
        rep.record("nontriviality", (margin - (lam + qu0 + pt)).max(0.0), 0.0, None);
    } else {
        rep.record("nontriviality", (margin - cert.weight()).max(0.0), 0.0, None);
        rep.annotate("nontriviality", "premise fails; only requiring a nonzero certificate");
    }
    let interior0 = gaps[0].iter().all(|&g| g < -margin);
    if free_u {
        let band_in = |j: usize| {
            let nu = traj.u[j].norm();
            nu > lo + margin && nu < hi - margin
        };
        let tau_ok = p.tau > 0.0 && p.tau < p.r;
        if tau_ok && interior0 && band_in(0) {
            rep.record("enhanced_nontriviality", (margin - (lam + pt)).max(0.0), 0.0, None);
        } else {
            rep.skip("enhanced_nontriviality", "interiority premise at t = 0 fails");
        }
        let interior_t = gaps[k].iter().all(|&g| g < -margin);
        if tau_ok && interior_t && band_in(k) {
            rep.record("enhanced_nontriviality_terminal", (margin - (lam + qu0)).max(0.0), 0.0, None);
        } else {
            rep.skip("enhanced_nontriviality_terminal", "interiority premise at t = T fails");
        }
    } else if off_sphere || interior0 {
        rep.record("enhanced_nontriviality", (margin - (lam + pt)).max(0.0), 0.0, None);
    } else {
        rep.skip("enhanced_nontriviality", "premise fails");
    }

    // carried only by endpoint atoms
    let interior_mass = cert.gamma_variation()
        - cert.gamma_atoms[0].norm()
        - cert.gamma_atoms[k].norm()
        + cert.xi_variation()
        - cert.xi_atoms[0].abs()
        - cert.xi_atoms[k].abs();
    let endpoint_mass = cert.gamma_atoms[0].norm() + cert.gamma_atoms[k].norm() + cert.xi_atoms[0].abs() + cert.xi_atoms[k].abs();
    rep.degenerate = lam <= tol && endpoint_mass > margin && interior_mass <= tol;
    if rep.degenerate {
        rep.notes.push("certificate is nontrivial only through endpoint atoms".into());
    }
    rep.finish()
}

/// Residual of the `u` part of the left transversality inclusion.
fn left_u_residual(p: &SweepingProblem, traj: &DiscreteTrajectory, cert: &ContinuousCertificate, margin: f64) -> f64 {
    let n = p.n;
    let lam = cert.lambda;
    let c = &p.polyhedron;
    let target = cert.q[0].rows(n, n) - cert.v[0].rows(n, n) * lam;
    let u0 = &traj.u[0];
    let gap0 = traj.gap(0);
    let y0 = c.combine(&cert.eta[0]);
    let dir = cert.v[0].rows(0, n) * lam - cert.q[0].rows(0, n);
    let tol = geometry::default_tol(&gap0).max(margin);
    let gens = match geometry::coderivative_generators(&gap0, &y0, &dir, c, tol) {
        Ok(g) => g,
        Err(Error::DomainViolation { value, .. }) => return value.abs(),
        Err(_) => return f64::INFINITY,
    };
    let ncol = 1 + gens.span.len() + gens.cone.len();
    let mut a = DMatrix::zeros(n, ncol);
    let mut signs = Vec::with_capacity(ncol);
    a.set_column(0, &(u0 * -2.0));
    signs.push(band_sign(u0.norm(), p.r - p.tau, p.r + p.tau, margin));
    for (s, &i) in gens.span.iter().enumerate() {
        a.set_column(1 + s, &c.generator(i));
        signs.push(Sign::Free);
    }
    for (s, &i) in gens.cone.iter().enumerate() {
        a.set_column(1 + gens.span.len() + s, &c.generator(i));
        signs.push(Sign::NonNeg);
    }
    match signed_lstsq(&a, &target, &signs) {
        Ok((z, _)) => (&a * z - target).amax(),
        Err(_) => f64::INFINITY,
    }
}

/// Column bookkeeping for the synthesis.
struct Cols {
    n: usize,
    count: usize,
    signs: Vec<Sign>,
    g_atom: Vec<Option<usize>>,
    g_dens: Vec<Option<usize>>,
    x_atom: Vec<Option<usize>>,
    x_dens: Vec<Option<usize>>,
    nu_t: Option<usize>,
    nu_0: Option<usize>,
    cod: Vec<(usize, usize)>,
    kink: Vec<Vec<Option<usize>>>,
}

impl Cols {
    fn add(&mut self, s: Sign, len: usize) -> usize {
        let at = self.count;
        self.count += len;
        self.signs.extend(std::iter::repeat_n(s, len));
        at
    }
    /// Index of the `λ` column and the constant column in affine rows.
    fn lam(&self) -> usize {
        self.count
    }
    fn one(&self) -> usize {
        self.count + 1
    }
}

/// Solve the continuous conditions for the duals of a given candidate,
/// trying `λ` from the top of the grid. Returns the zero-`λ` solution when
/// no positive multiplier is consistent.
pub fn synthesize_continuous(problem: &SweepingProblem, traj: &DiscreteTrajectory, tol: f64) -> Result<ContinuousCertificate> {
    let p = problem;
    traj.check_shape(p.n, p.d)?;
    let (n, d) = (p.n, p.d);
    let k = traj.k();
    let h = traj.mesh.h();
    let c = &p.polyhedron;
    let m = c.len();
    let margin = 10.0 * tol;
    let free_u = p.u.is_free();
    let eta = eta_midpoint(p, traj)?;
    let eta_t = eta_terminal(p, traj, &eta[k - 1])?;
    let (w, v) = subgradients(p, traj);
    let gens = generator_columns(p);
    let gaps: Vec<DVector<f64>> = (0..=k).map(|j| c.values(&traj.gap(j))).collect();
    let allowed: Vec<bool> = (0..=k).map(|j| j == k || gaps[j].iter().any(|&g| g >= -margin)).collect();
    let (lo, hi) = (p.r - p.tau, p.r + p.tau);

    let mut cols = Cols {
        n,
        count: 0,
        signs: Vec::new(),
        g_atom: vec![None; k + 1],
        g_dens: vec![None; k],
        x_atom: vec![None; k + 1],
        x_dens: vec![None; k],
        nu_t: None,
        nu_0: None,
        cod: Vec::new(),
        kink: vec![vec![None; d]; k],
    };
    for j in 0..=k {
        if allowed[j] {
            cols.g_atom[j] = Some(cols.add(Sign::Free, n));
        }
        if j < k && (allowed[j] || allowed[j + 1]) {
            cols.g_dens[j] = Some(cols.add(Sign::Free, n));
        }
    }
    if free_u {
        for j in 0..=k {
            cols.x_atom[j] = Some(cols.add(Sign::Free, 1));
            if j < k {
                cols.x_dens[j] = Some(cols.add(Sign::Free, 1));
            }
        }
        cols.nu_t = Some(cols.add(band_sign(traj.u[k].norm(), lo, hi, margin), 1));
        cols.nu_0 = Some(cols.add(band_sign(traj.u[0].norm(), lo, hi, margin), 1));
        let act = geometry::active_set(&traj.gap(0), c, margin)?;
        for i in act {
            let at = cols.add(Sign::Free, 1);
            cols.cod.push((i, at));
        }
    }
    let hulls: Vec<Vec<(f64, f64)>> = (0..k).map(|j| adot_hull(&p.ell, traj.mesh.t(j), traj.mesh.t(j + 1), &traj.adot(j))).collect();
    for j in 0..k {
        for i in 0..d {
            let (l, u) = hulls[j][i];
            if u - l > 1e-14 {
                cols.kink[j][i] = Some(cols.add(Sign::Between(-1.0, 1.0), 1));
            }
        }
    }
    let nc = cols.count + 2;
    let lam_c = cols.lam();
    let one_c = cols.one();
    let _ = cols.n;

    // tails of the measures as affine rows (n × nc)
    let mut g_tail = vec![DMatrix::zeros(n, nc); k + 1];
    let mut u_tail = vec![DMatrix::zeros(n, nc); k + 1];
    {
        let mut g = DMatrix::zeros(n, nc);
        let mut ut = DMatrix::zeros(n, nc);
        for j in (0..=k).rev() {
            if let Some(o) = cols.g_atom[j] {
                for r in 0..n {
                    g[(r, o + r)] += 1.0;
                }
            }
            if let Some(o) = cols.x_atom[j] {
                for r in 0..n {
                    ut[(r, o)] += 2.0 * traj.u[j][r];
                }
            }
            if j < k {
                if let Some(o) = cols.g_dens[j] {
                    for r in 0..n {
                        g[(r, o + r)] += h;
                    }
                }
                if let Some(o) = cols.x_dens[j] {
                    for r in 0..n {
                        ut[(r, o)] += h * (traj.u[j][r] + traj.u[j + 1][r]);
                    }
                }
            }
            g_tail[j] = g.clone();
            u_tail[j] = ut.clone();
        }
    }

    // p at the nodes, backward from the right endpoint
    let dim = 2 * n + d;
    let mut pn = vec![DMatrix::zeros(dim, nc); k + 1];
    {
        let pk = &mut pn[k];
        let grad = p.phi.gradient(&traj.x[k]);
        let ek = c.combine(&eta_t);
        for r in 0..n {
            pk[(r, lam_c)] = -grad[r];
            pk[(r, one_c)] = -ek[r];
            pk[(n + r, one_c)] = ek[r];
            if let Some(o) = cols.nu_t {
                pk[(n + r, o)] = 2.0 * traj.u[k][r];
            }
        }
    }
    let fx = p.f.grad_x(n).transpose();
    let fa = p.f.grad_a(n, d).transpose();
    for j in (0..k).rev() {
        let next = pn[j + 1].clone();
        // y = λ v^x − q^x(t_{j+1})
        let mut y = -(next.rows(0, n) - &g_tail[j + 1]);
        for r in 0..n {
            y[(r, lam_c)] += v[j][r];
        }
        let mut cur = next;
        let dx = &fx * &y;
        let da = &fa * &y;
        for r in 0..n {
            for col in 0..nc {
                cur[(r, col)] -= h * dx[(r, col)];
            }
            cur[(r, lam_c)] -= h * w[j][r];
            cur[(n + r, lam_c)] -= h * w[j][n + r];
        }
        for r in 0..d {
            for col in 0..nc {
                cur[(2 * n + r, col)] -= h * da[(r, col)];
            }
            cur[(2 * n + r, lam_c)] -= h * w[j][2 * n + r];
        }
        pn[j] = cur;
    }
    let q_x = |j: usize| pn[j].rows(0, n) - &g_tail[j];
    let q_u = |j: usize| pn[j].rows(n, n) - (&u_tail[j] - &g_tail[j]);
    let q_a = |j: usize| pn[j].rows(2 * n, d).into_owned();

    // equations as affine rows; the λ-dependent kink coefficient is patched per trial
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut kink_rows: Vec<(usize, usize, f64)> = Vec::new();
    for j in 0..k {
        let qa = q_a(j + 1);
        for i in 0..d {
            let mut r = qa.row(i).transpose();
            let (l, u) = hulls[j][i];
            match cols.kink[j][i] {
                Some(o) => {
                    r[lam_c] -= 0.5 * (l + u);
                    kink_rows.push((rows.len(), o, 0.5 * (u - l)));
                }
                None => r[lam_c] -= l,
            }
            rows.push(r);
        }
        if free_u {
            let qu = q_u(j + 1);
            for i in 0..n {
                let mut r = qu.row(i).transpose();
                r[lam_c] -= v[j][n + i];
                rows.push(r);
            }
        }
        let qx = q_x(j + 1);
        for i in 0..m {
            if eta[j][i] > margin {
                let g = gens.column(i);
                let mut r = -(qx.transpose() * g);
                r[lam_c] += g.dot(&v[j].rows(0, n));
                rows.push(r);
            }
        }
    }
    {
        let qx = q_x(k);
        for i in 0..m {
            if eta_t[i] > margin {
                let g = gens.column(i);
                let mut r = -(qx.transpose() * g);
                r[lam_c] += g.dot(&v[k - 1].rows(0, n));
                rows.push(r);
            }
        }
    }
    let qa0 = q_a(0);
    for i in 0..d {
        let mut r = qa0.row(i).transpose();
        r[lam_c] -= v[0][2 * n + i];
        rows.push(r);
    }
    if free_u {
        let qu0 = q_u(0);
        for i in 0..n {
            let mut r = qu0.row(i).transpose();
            r[lam_c] -= v[0][n + i];
            if let Some(o) = cols.nu_0 {
                r[o] += 2.0 * traj.u[0][i];
            }
            for &(g, o) in &cols.cod {
                r[o] -= gens[(i, g)];
            }
            rows.push(r);
        }
    }

    let nz = cols.count;
    let mut base = DMatrix::zeros(rows.len(), nz);
    for (ri, r) in rows.iter().enumerate() {
        for col in 0..nz {
            base[(ri, col)] = r[col];
        }
    }

    let assemble = |zeta: &DVector<f64>, lambda: f64| -> ContinuousCertificate {
        let mut full = DVector::zeros(nc);
        full.rows_mut(0, nz).copy_from(zeta);
        full[lam_c] = lambda;
        full[one_c] = 1.0;
        let pv: Vec<DVector<f64>> = pn.iter().map(|a| a * &full).collect();
        let pick = |o: Option<usize>, len: usize| match o {
            Some(o) => zeta.rows(o, len).into_owned(),
            None => DVector::zeros(len),
        };
        let mut cert = ContinuousCertificate {
            lambda,
            mesh: traj.mesh,
            px: pv.iter().map(|x| x.rows(0, n).into_owned()).collect(),
            pu: pv.iter().map(|x| x.rows(n, n).into_owned()).collect(),
            pa: pv.iter().map(|x| x.rows(2 * n, d).into_owned()).collect(),
            q: Vec::new(),
            eta: eta.clone(),
            eta_terminal: eta_t.clone(),
            gamma_atoms: (0..=k).map(|j| pick(cols.g_atom[j], n)).collect(),
            gamma_density: (0..k).map(|j| pick(cols.g_dens[j], n)).collect(),
            xi_atoms: (0..=k).map(|j| cols.x_atom[j].map_or(0.0, |o| zeta[o])).collect(),
            xi_density: (0..k).map(|j| cols.x_dens[j].map_or(0.0, |o| zeta[o])).collect(),
            w: w.clone(),
            v: v.clone(),
            detected_atoms: Vec::new(),
        };
        cert.refresh_q(traj);
        cert
    };

    let mut best: Option<(f64, ContinuousCertificate)> = None;
    let mut fallback: Option<ContinuousCertificate> = None;
    for &lambda in LAMBDA_GRID.iter() {
        let mut e = base.clone();
        for &(ri, o, half) in &kink_rows {
            e[(ri, o)] = -lambda * half;
        }
        let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|r| -(r[lam_c] * lambda + r[one_c])));
        let (zeta, _) = signed_lstsq(&e, &rhs, &cols.signs)?;
        let res = if rows.is_empty() { 0.0 } else { (&e * &zeta - &rhs).amax() };
        let cert = assemble(&zeta, lambda);
        let s = cert.weight();
        if lambda == 0.0 {
            fallback = Some(cert.clone());
        }
        if s <= 1e-14 || lambda == 0.0 {
            continue;
        }
        let normalized = res / s;
        if normalized <= tol && best.as_ref().is_none_or(|(r, _)| normalized < *r - 1e-12) {
            best = Some((normalized, cert));
        }
    }
    match best {
        Some((_, c)) => Ok(c.normalized(tol)),
        None => Ok(fallback.expect("grid ends at zero").normalized(tol)),
    }
}

/// Pass to the continuous certificate from discrete ones on successive
/// refinements. Each level is rescaled to `λ = 1` when possible. The finest
/// level supplies the measures; the adjoint arc is integrated backward from
/// the continuous transversality condition.
pub fn limit_certificate(
    problem: &SweepingProblem,
    levels: &[(DiscreteTrajectory, DiscreteCertificate)],
    tol: f64,
) -> Result<ContinuousCertificate> {
    if levels.len() < 2 {
        return Err(Error::InconsistentSequence("need at least two refinement levels".into()));
    }
    let p = problem;
    let (n, d) = (p.n, p.d);
    let c = &p.polyhedron;
    let norm_of = |traj: &DiscreteTrajectory, cert: &DiscreteCertificate| -> (DiscreteCertificate, f64) {
        let h = traj.mesh.h();
        let s = cert.lambda + cert.px.iter().chain(cert.pa.iter()).chain(cert.pu.iter()).map(|x| x.norm()).fold(0.0, f64::max);
        let scale = if cert.lambda > tol * s.max(1e-300) { 1.0 / cert.lambda } else if s > 0.0 { 1.0 / s } else { 1.0 };
        let sc = cert.scaled(scale);
        let size = sc.px.iter().chain(sc.pa.iter()).map(|x| x.norm()).fold(0.0, f64::max)
            + sc.gamma.iter().map(|g| h * c.combine(g).norm()).sum::<f64>();
        (sc, size)
    };
    let mut sizes = Vec::new();
    let mut scaled = Vec::new();
    for (traj, cert) in levels {
        traj.check_shape(n, d)?;
        if cert.k() != traj.k() {
            return Err(Error::DimensionMismatch("certificate and trajectory grids differ".into()));
        }
        let (sc, size) = norm_of(traj, cert);
        sizes.push(size);
        scaled.push(sc);
    }
    let first = sizes[0].max(1e-12);
    if sizes.iter().any(|&s| !s.is_finite() || s > 10.0 * first + 1.0) {
        return Err(Error::InconsistentSequence(format!("dual norms grow along the refinements: {sizes:?}")));
    }

    let (traj, dc) = (&levels[levels.len() - 1].0, &scaled[scaled.len() - 1]);
    let k = traj.k();
    let h = traj.mesh.h();
    let lam = dc.lambda;
    let eta = eta_midpoint(p, traj)?;
    let eta_t = eta_terminal(p, traj, &eta[k - 1])?;
    let (w, v) = subgradients(p, traj);
    let ek = c.combine(&eta_t);

    let mut gamma_atoms = vec![DVector::zeros(n); k + 1];
    let gamma_density: Vec<DVector<f64>> = dc.gamma.iter().map(|g| c.combine(g)).collect();
    let px_t = -(p.phi.gradient(&traj.x[k]) * lam) - &ek;
    gamma_atoms[k] = &px_t - &dc.px[k];
    let xi_atoms = dc.xi.clone();
    let xi_density = vec![0.0; k];

    let mut cert = ContinuousCertificate {
        lambda: lam,
        mesh: traj.mesh,
        px: vec![DVector::zeros(n); k + 1],
        pu: vec![DVector::zeros(n); k + 1],
        pa: vec![DVector::zeros(d); k + 1],
        q: Vec::new(),
        eta,
        eta_terminal: eta_t,
        gamma_atoms,
        gamma_density,
        xi_atoms,
        xi_density,
        w,
        v,
        detected_atoms: Vec::new(),
    };
    cert.px[k] = px_t;
    cert.pu[k] = if p.u.is_free() { dc.pu[k].clone() } else { DVector::zeros(n) };
    let fx = p.f.grad_x(n).transpose();
    let fa = p.f.grad_a(n, d).transpose();
    for j in (0..k).rev() {
        let qx = &cert.px[j + 1] - cert.gamma_tail(j + 1);
        let y = cert.v[j].rows(0, n) * lam - qx;
        cert.px[j] = &cert.px[j + 1] - h * (cert.w[j].rows(0, n) * lam + &fx * &y);
        cert.pu[j] = &cert.pu[j + 1] - h * lam * cert.w[j].rows(n, n);
        cert.pa[j] = &cert.pa[j + 1] - h * (cert.w[j].rows(2 * n, d) * lam + &fa * &y);
    }
    cert.refresh_q(traj);
    cert.detected_atoms = detect_atoms(levels, &scaled, c, tol);
    Ok(cert)
}

/// Nodes of the finest level whose local mass stands out by a factor ten
/// against the neighbours and persists on the coarser level.
fn detect_atoms(
    levels: &[(DiscreteTrajectory, DiscreteCertificate)],
    scaled: &[DiscreteCertificate],
    c: &geometry::Polyhedron,
    tol: f64,
) -> Vec<f64> {
    let local = |traj: &DiscreteTrajectory, cert: &DiscreteCertificate| -> Vec<f64> {
        let h = traj.mesh.h();
        let k = traj.k();
        let dens: Vec<f64> = cert.gamma.iter().map(|g| h * c.combine(g).norm()).collect();
        (0..=k)
            .map(|j| {
                let left = if j > 0 { dens[j - 1] } else { 0.0 };
                let right = if j < k { dens[j] } else { 0.0 };
                left + right
            })
            .collect()
    };
    let nl = levels.len();
    let fine = local(&levels[nl - 1].0, &scaled[nl - 1]);
    let coarse = local(&levels[nl - 2].0, &scaled[nl - 2]);
    let (tf, tc) = (&levels[nl - 1].0, &levels[nl - 2].0);
    let mut out = Vec::new();
    for j in 0..fine.len() {
        let nb: Vec<f64> = [j.wrapping_sub(2), j + 2].iter().filter(|&&i| i < fine.len()).map(|&i| fine[i]).collect();
        let neighbour = nb.iter().cloned().fold(0.0, f64::max);
        if fine[j] > 10.0 * tol && fine[j] > 10.0 * neighbour {
            let t = tf.mesh.t(j);
            let jc = ((t / tc.mesh.h()).round() as usize).min(tc.k());
            if coarse[jc] >= 0.5 * fine[j] {
                out.push(t);
            }
        }
    }
    out
}
