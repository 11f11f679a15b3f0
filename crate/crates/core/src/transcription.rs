//! Discrete approximating problems: decision vector layout, the penalized
//! cost with its gradient, hard-constraint residuals and a feasible seed.

use nalgebra::DVector;

use crate::dynamics::{self, DiscreteTrajectory, Mesh, SweepingProblem, UControl};
use crate::error::{Error, Result};
use crate::geometry;

/// Decision variables `(x_j, u_j, a_j)` at every node. `x_0` is always the
/// initial state; with a reference, `u_0` and `a_0` are pinned to it too.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
}

impl DecisionVector {
    pub fn from_trajectory(t: &DiscreteTrajectory) -> Self {
        DecisionVector { x: t.x.clone(), u: t.u.clone(), a: t.a.clone() }
    }

    pub fn to_trajectory(&self, mesh: Mesh) -> DiscreteTrajectory {
        DiscreteTrajectory { mesh, x: self.x.clone(), u: self.u.clone(), a: self.a.clone() }
    }

    /// Flattened `(x₁..x_k, u₀..u_k, a₀..a_k)`, skipping pinned entries.
    pub fn flatten(&self, pinned: bool) -> DVector<f64> {
        let s = usize::from(pinned);
        let parts = self.x[1..]
            .iter()
            .chain(self.u[s..].iter())
            .chain(self.a[s..].iter());
        let data: Vec<f64> = parts.flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        DVector::from_vec(data)
    }

    /// Inverse of [`flatten`](Self::flatten); pinned values come from `base`.
    pub fn unflatten(flat: &DVector<f64>, base: &DecisionVector, pinned: bool) -> Result<Self> {
        let k = base.x.len() - 1;
        let n = base.x[0].len();
        let d = base.a[0].len();
        let s = usize::from(pinned);
        let len = k * n + (k + 1 - s) * (n + d);
        if flat.len() != len {
            return Err(Error::DimensionMismatch(format!("decision vector of length {} (expected {len})", flat.len())));
        }
        let mut out = base.clone();
        let mut off = 0;
        for j in 1..=k {
            out.x[j] = flat.rows(off, n).into_owned();
            off += n;
        }
        for j in s..=k {
            out.u[j] = flat.rows(off, n).into_owned();
            off += n;
        }
        for j in s..=k {
            out.a[j] = flat.rows(off, d).into_owned();
            off += d;
        }
        Ok(out)
    }
}

/// Gradient blocks matching [`DecisionVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
}

impl Gradient {
    pub fn zeros(k: usize, n: usize, d: usize) -> Self {
        Gradient {
            x: vec![DVector::zeros(n); k + 1],
            u: vec![DVector::zeros(n); k + 1],
            a: vec![DVector::zeros(d); k + 1],
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Gradient) {
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            a.axpy(s, b, 1.0);
        }
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            a.axpy(s, b, 1.0);
        }
        for (a, b) in self.a.iter_mut().zip(&other.a) {
            a.axpy(s, b, 1.0);
        }
    }
}

/// A continuous piecewise-linear reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub traj: DiscreteTrajectory,
}

impl Reference {
    fn cell(&self, t: f64) -> (usize, f64) {
        let m = self.traj.mesh;
        let s = (t / m.h()).clamp(0.0, m.k as f64);
        let j = (s.floor() as usize).min(m.k - 1);
        (j, s - j as f64)
    }

    fn lerp(v: &[DVector<f64>], j: usize, w: f64) -> DVector<f64> {
        &v[j] * (1.0 - w) + &v[j + 1] * w
    }

    /// `(x̄, ū, ā)` at time `t`.
    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (j, w) = self.cell(t);
        (Self::lerp(&self.traj.x, j, w), Self::lerp(&self.traj.u, j, w), Self::lerp(&self.traj.a, j, w))
    }

    /// `∫_{t0}^{t1} ‖ż̄‖²` per block, summed over the reference cells.
    fn speed_sq_integral(&self, t0: f64, t1: f64) -> f64 {
        let m = self.traj.mesh;
        let h = m.h();
        let j0 = ((t0 / h).floor() as usize).min(m.k - 1);
        let mut total = 0.0;
        let mut j = j0;
        while j < m.k {
            let a = m.t(j).max(t0);
            let b = m.t(j + 1).min(t1);
            if b > a {
                let s = self.traj.xdot(j).norm_squared() + self.traj.udot(j).norm_squared() + self.traj.adot(j).norm_squared();
                total += s * (b - a);
            }
            if m.t(j + 1) >= t1 {
                break;
            }
            j += 1;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteProblem {
    pub problem: SweepingProblem,
    pub mesh: Mesh,
    pub reference: Option<Reference>,
    /// Trust-region radius around the reference.
    pub epsilon: f64,
    /// Bound on the variation of `u` in the penalties.
    pub mu_tilde: f64,
    /// Relaxation of the norm band outside the inner window.
    pub eps_k: f64,
    pub proximity_on: bool,
}

impl DiscreteProblem {
    pub fn new(problem: SweepingProblem, k: usize) -> Result<Self> {
        problem.validate()?;
        if k < 2 {
            return Err(Error::DimensionMismatch("need k >= 2".into()));
        }
        let mesh = Mesh::new(k, problem.horizon);
        let udot = problem.u.path().slope.norm();
        Ok(DiscreteProblem {
            problem,
            mesh,
            reference: None,
            epsilon: 1.0,
            mu_tilde: 10.0 * (1.0 + udot),
            eps_k: 1.0 / (k as f64).sqrt(),
            proximity_on: false,
        })
    }

    /// Attach a reference trajectory; this turns on the proximity terms and
    /// the trust region and pins `(u_0, a_0)`.
    pub fn with_reference(mut self, reference: DiscreteTrajectory, epsilon: f64) -> Result<Self> {
        reference.check_shape(self.problem.n, self.problem.d)?;
        if (reference.mesh.horizon - self.problem.horizon).abs() > 1e-12 {
            return Err(Error::DimensionMismatch("reference horizon differs".into()));
        }
        let udot = (0..reference.k()).map(|j| reference.udot(j).amax()).fold(0.0, f64::max);
        self.mu_tilde = 10.0 * (1.0 + udot);
        self.reference = Some(Reference { traj: reference });
        self.epsilon = epsilon;
        self.proximity_on = true;
        Ok(self)
    }

    pub fn pinned(&self) -> bool {
        self.reference.is_some()
    }

    pub fn k(&self) -> usize {
        self.mesh.k
    }

    /// Proximity integrand contribution of step `j` with its gradient in the
    /// three step velocities: `θ = 2(h c − Δz̄)`.
    fn proximity_step(&self, z: &DecisionVector, j: usize) -> (f64, [DVector<f64>; 3]) {
        let r = self.reference.as_ref().expect("proximity needs a reference");
        let h = self.mesh.h();
        let (t0, t1) = (self.mesh.t(j), self.mesh.t(j + 1));
        let (x0, u0, a0) = r.at(t0);
        let (x1, u1, a1) = r.at(t1);
        let cx = (&z.x[j + 1] - &z.x[j]) / h;
        let cu = (&z.u[j + 1] - &z.u[j]) / h;
        let ca = (&z.a[j + 1] - &z.a[j]) / h;
        let dx = x1 - x0;
        let du = u1 - u0;
        let da = a1 - a0;
        let val = h * (cx.norm_squared() + cu.norm_squared() + ca.norm_squared())
            - 2.0 * (cx.dot(&dx) + cu.dot(&du) + ca.dot(&da))
            + r.speed_sq_integral(t0, t1);
        let th = [2.0 * (h * cx - dx), 2.0 * (h * cu - du), 2.0 * (h * ca - da)];
        (val.max(0.0), th)
    }

    /// `θ_j` per block; zero without a reference.
    pub fn theta(&self, z: &DecisionVector, j: usize) -> [DVector<f64>; 3] {
        let p = &self.problem;
        if self.proximity_on && self.reference.is_some() {
            self.proximity_step(z, j).1
        } else {
            [DVector::zeros(p.n), DVector::zeros(p.n), DVector::zeros(p.d)]
        }
    }

    fn first_step_norm(&self, z: &DecisionVector) -> (f64, DVector<f64>) {
        let w = (&z.u[1] - &z.u[0]) / self.mesh.h();
        (w.norm(), w)
    }

    fn second_diffs(&self, z: &DecisionVector) -> (f64, Vec<DVector<f64>>) {
        let h = self.mesh.h();
        let ds: Vec<DVector<f64>> = (0..self.k() - 1)
            .map(|j| (&z.u[j + 2] - 2.0 * &z.u[j + 1] + &z.u[j]) / h)
            .collect();
        (ds.iter().map(|d| d.norm()).sum(), ds)
    }
}

/// Penalized discrete cost `J_k` and its gradient in every block.
pub fn assemble_cost(dp: &DiscreteProblem, z: &DecisionVector) -> (f64, Gradient) {
    let p = &dp.problem;
    let k = dp.k();
    let h = dp.mesh.h();
    let mut g = Gradient::zeros(k, p.n, p.d);
    let mut total = p.phi.value(&z.x[k]);
    g.x[k] += p.phi.gradient(&z.x[k]);

    for j in 0..k {
        let t = dp.mesh.t(j);
        let xd = (&z.x[j + 1] - &z.x[j]) / h;
        let ud = (&z.u[j + 1] - &z.u[j]) / h;
        let ad = (&z.a[j + 1] - &z.a[j]) / h;
        total += h * p.ell.value(t, &z.x[j], &z.u[j], &z.a[j], &xd, &ud, &ad);
        let w = p.ell.partials(t, &z.x[j], &z.u[j], &z.a[j], &xd, &ud, &ad);
        g.x[j] += h * &w.wx;
        g.u[j] += h * &w.wu;
        g.a[j] += h * &w.wa;
        g.x[j + 1] += &w.vx;
        g.x[j] -= &w.vx;
        g.u[j + 1] += &w.vu;
        g.u[j] -= &w.vu;
        g.a[j + 1] += &w.va;
        g.a[j] -= &w.va;
        if dp.proximity_on && dp.reference.is_some() {
            let (val, th) = dp.proximity_step(z, j);
            total += val;
            // d/dc of the step term is θ; c = Δz/h
            g.x[j + 1] += &th[0] / h;
            g.x[j] -= &th[0] / h;
            g.u[j + 1] += &th[1] / h;
            g.u[j] -= &th[1] / h;
            g.a[j + 1] += &th[2] / h;
            g.a[j] -= &th[2] / h;
        }
    }

    let mu = dp.mu_tilde;
    let (n1, w1) = dp.first_step_norm(z);
    if n1 > mu {
        total += (n1 - mu).powi(2);
        let dir = &w1 * (2.0 * (n1 - mu) / (n1 * h));
        g.u[1] += &dir;
        g.u[0] -= &dir;
    }
    let (s2, ds) = dp.second_diffs(z);
    if s2 > mu {
        total += (s2 - mu).powi(2);
        let coef = 2.0 * (s2 - mu) / h;
        for (j, dj) in ds.iter().enumerate() {
            let nj = dj.norm();
            if nj > 0.0 {
                let dir = dj * (coef / nj);
                g.u[j + 2] += &dir;
                g.u[j + 1] -= 2.0 * &dir;
                g.u[j] += &dir;
            }
        }
    }
    (total, g)
}

/// Which block a sparse gradient entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    X,
    U,
    A,
}

/// Smooth inequality `value ≤ 0` with a sparse gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Inequality {
    pub name: &'static str,
    pub node: usize,
    pub value: f64,
    pub grad: Vec<(Block, usize, DVector<f64>)>,
}

/// Inequalities that the reduced-space optimizer handles by augmented
/// Lagrangian. The moving-set inclusion itself is enforced by construction.
pub fn inequalities(dp: &DiscreteProblem, z: &DecisionVector) -> Vec<Inequality> {
    let p = &dp.problem;
    let k = dp.k();
    let h = dp.mesh.h();
    let mut out = Vec::new();
    let free_u = p.u.is_free();

    if free_u && !dp.pinned() {
        let vals = p.polyhedron.values(&(&z.x[0] - &z.u[0]));
        for i in 0..p.m() {
            out.push(Inequality {
                name: "initial",
                node: 0,
                value: vals[i],
                grad: vec![(Block::U, 0, -p.polyhedron.generator(i))],
            });
        }
    }
    if free_u {
        let bound = dp.mu_tilde + 1.0;
        let (n1, w1) = dp.first_step_norm(z);
        let dir = if n1 > 0.0 { &w1 / (n1 * h) } else { DVector::zeros(p.n) };
        out.push(Inequality {
            name: "u_first_step",
            node: 0,
            value: n1 - bound,
            grad: vec![(Block::U, 1, dir.clone()), (Block::U, 0, -dir)],
        });
        let (s2, ds) = dp.second_diffs(z);
        let mut grad = Vec::new();
        for (j, dj) in ds.iter().enumerate() {
            let nj = dj.norm();
            if nj > 0.0 {
                let dir = dj / (nj * h);
                grad.push((Block::U, j + 2, dir.clone()));
                grad.push((Block::U, j + 1, -2.0 * &dir));
                grad.push((Block::U, j, dir));
            }
        }
        out.push(Inequality { name: "u_second_diff", node: 0, value: s2 - bound, grad });
    }
    if let Some(r) = &dp.reference {
        let e2 = 0.25 * dp.epsilon * dp.epsilon;
        for j in 0..=k {
            let (xr, ur, ar) = r.at(dp.mesh.t(j));
            let dx = &z.x[j] - xr;
            let du = &z.u[j] - ur;
            let da = &z.a[j] - ar;
            let v = dx.norm_squared() + du.norm_squared() + da.norm_squared() - e2;
            out.push(Inequality {
                name: "trust_sup",
                node: j,
                value: v,
                grad: vec![(Block::X, j, 2.0 * dx), (Block::U, j, 2.0 * du), (Block::A, j, 2.0 * da)],
            });
        }
        let mut total = 0.0;
        let mut grad = Vec::new();
        for j in 0..k {
            let (val, th) = dp.proximity_step(z, j);
            total += val;
            for (b, g) in [(Block::X, &th[0]), (Block::U, &th[1]), (Block::A, &th[2])] {
                grad.push((b, j + 1, g / h));
                grad.push((b, j, -(g / h)));
            }
        }
        out.push(Inequality { name: "trust_w12", node: 0, value: total - 0.5 * dp.epsilon, grad });
    }
    if p.terminal_on_boundary {
        let vals = p.polyhedron.values(&(&z.x[k] - &z.u[k]));
        let (imax, vmax) = vals.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let g = p.polyhedron.generator(imax);
        out.push(Inequality {
            name: "terminal_boundary",
            node: k,
            value: -vmax,
            grad: vec![(Block::X, k, -g.clone()), (Block::U, k, g)],
        });
    }
    out
}

/// Per-constraint violations (all `≥ 0`, zero when satisfied).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub entries: Vec<(String, f64)>,
    /// Distance of the explicit-form inclusion, reported for information.
    pub dynamics_explicit: f64,
}

impl ResidualReport {
    pub fn get(&self, name: &str) -> f64 {
        self.entries.iter().find(|(n, _)| n == name).map_or(0.0, |(_, v)| *v)
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|(_, v)| *v).fold(0.0, f64::max)
    }
}

/// Distance of `v` from the normal cone at the active set of `gap`, or the
/// constraint violation if `gap` leaves `C`.
fn inclusion_residual(dp: &DiscreteProblem, v: &DVector<f64>, gap: &DVector<f64>) -> f64 {
    let c = &dp.problem.polyhedron;
    let tol = geometry::default_tol(gap);
    match geometry::active_set(gap, c, tol) {
        Ok(act) => geometry::fit_cone(v, &act, c).map_or(f64::INFINITY, |d| d.residual),
        Err(Error::InfeasiblePoint { violation, .. }) => violation,
        Err(_) => f64::INFINITY,
    }
}

pub fn constraint_residuals(dp: &DiscreteProblem, z: &DecisionVector) -> ResidualReport {
    let p = &dp.problem;
    let k = dp.k();
    let h = dp.mesh.h();
    let c = &p.polyhedron;
    let mut dyn_res: f64 = 0.0;
    let mut explicit: f64 = 0.0;
    for j in 0..k {
        let v = -(&z.x[j + 1] - &z.x[j]) / h - p.f.eval(&z.x[j], &z.a[j]);
        // implicit (catching-up) form: normal cone at the new point
        dyn_res = dyn_res.max(inclusion_residual(dp, &v, &(&z.x[j + 1] - &z.u[j + 1])));
        explicit = explicit.max(inclusion_residual(dp, &v, &(&z.x[j] - &z.u[j])));
    }
    let mut state: f64 = 0.0;
    for j in 0..=k {
        let vals = c.values(&(&z.x[j] - &z.u[j]));
        state = state.max(vals.max().max(0.0));
    }
    let endpoint = c.values(&(&z.x[k] - &z.u[k])).max().max(0.0);
    let x0 = (&z.x[0] - &p.x0).amax();

    let mut entries = vec![
        ("dynamics".to_string(), dyn_res),
        ("state".to_string(), state),
        ("endpoint".to_string(), endpoint),
        ("initial_state".to_string(), x0),
    ];

    match &p.u {
        UControl::Fixed(path) => {
            let dev = (0..=k).map(|j| (&z.u[j] - path.at(dp.mesh.t(j))).amax()).fold(0.0, f64::max);
            entries.push(("u_path".to_string(), dev));
        }
        UControl::Free(_) => {
            let mut band: f64 = 0.0;
            let (lo, hi) = (p.r - p.tau - dp.eps_k, p.r + p.tau + dp.eps_k);
            for j in 0..=k {
                let nu = z.u[j].norm();
                let v = if dp.mesh.in_window(j, p.tau) {
                    (nu - p.r).abs()
                } else {
                    crate::cost::dist_to_interval(nu, lo, hi)
                };
                band = band.max(v);
            }
            entries.push(("norm_band".to_string(), band));
            let bound = dp.mu_tilde + 1.0;
            entries.push(("u_first_step".to_string(), (dp.first_step_norm(z).0 - bound).max(0.0)));
            entries.push(("u_second_diff".to_string(), (dp.second_diffs(z).0 - bound).max(0.0)));
        }
    }
    if let Some(r) = &dp.reference {
        let mut sup: f64 = 0.0;
        for j in 0..=k {
            let (xr, ur, ar) = r.at(dp.mesh.t(j));
            let d = ((&z.x[j] - xr).norm_squared() + (&z.u[j] - ur).norm_squared() + (&z.a[j] - ar).norm_squared()).sqrt();
            sup = sup.max(d - 0.5 * dp.epsilon);
        }
        let w12: f64 = (0..k).map(|j| dp.proximity_step(z, j).0).sum();
        entries.push(("trust_sup".to_string(), sup.max(0.0)));
        entries.push(("trust_w12".to_string(), (w12 - 0.5 * dp.epsilon).max(0.0)));
        let pin = (&z.u[0] - &r.traj.u[0]).amax().max((&z.a[0] - &r.traj.a[0]).amax());
        entries.push(("pinned_start".to_string(), pin));
    }
    if p.terminal_on_boundary {
        let v = c.values(&(&z.x[k] - &z.u[k])).max();
        entries.push(("terminal_boundary".to_string(), (-v).max(0.0)));
    }
    ResidualReport { entries, dynamics_explicit: explicit }
}

/// A starting point satisfying every hard constraint: `u` constant of norm
/// `r` (or the prescribed path), `a ≡ 0`, `x` from catching-up.
pub fn feasible_seed(dp: &DiscreteProblem) -> Result<DecisionVector> {
    let p = &dp.problem;
    let k = dp.k();
    let mesh = dp.mesh;
    let u: Vec<DVector<f64>> = match &p.u {
        UControl::Fixed(path) => (0..=k).map(|j| path.at(mesh.t(j))).collect(),
        UControl::Free(init) => {
            let u0 = seed_direction(p, &init.value)?;
            vec![u0; k + 1]
        }
    };
    let mut a = vec![DVector::zeros(p.d); k + 1];
    let mut u = u;
    if let Some(r) = &dp.reference {
        u[0] = r.traj.u[0].clone();
        a[0] = r.traj.a[0].clone();
    }
    let w = &p.x0 - &u[0];
    if !p.polyhedron.contains(&w, geometry::default_tol(&w)) {
        return Err(Error::InfeasibleStart("x0 - u0 is outside C".into()));
    }
    let (traj, _) = dynamics::catching_up_sampled(p, mesh, &u, &a)?;
    Ok(DecisionVector::from_trajectory(&traj))
}

/// Scale the guess onto `‖u‖ = r`, falling back to coordinate directions
/// when the guess leaves `x0 − u` outside `C`.
fn seed_direction(p: &SweepingProblem, guess: &DVector<f64>) -> Result<DVector<f64>> {
    let mut cands = Vec::new();
    if guess.norm() > 0.0 {
        cands.push(guess * (p.r / guess.norm()));
    }
    for i in 0..p.n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(p.n);
            e[i] = s * p.r;
            cands.push(e);
        }
    }
    for u in cands {
        let w = &p.x0 - &u;
        if p.polyhedron.contains(&w, geometry::default_tol(&w)) {
            return Ok(u);
        }
    }
    Err(Error::InfeasibleStart("no constant control of norm r keeps x0 - u in C".into()))
}
