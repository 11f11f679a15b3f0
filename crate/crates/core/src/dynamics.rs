//! The controlled sweeping process `−ẋ ∈ N(x − u; C) + f(x, a)` and its
//! catching-up discretization.

use nalgebra::{DMatrix, DVector};

use crate::cost::{RunningCost, TerminalCost};
use crate::error::{Error, Result};
use crate::geometry::{self, Polyhedron};

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// `f(x, a) = a`, needs `d = n`.
    Identity,
    /// `f(x, a) = s ∘ a`.
    DiagSpeeds(DVector<f64>),
    /// `f(x, a) = A x + B a + c`.
    Affine { a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64> },
}

impl Perturbation {
    pub fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        match self {
            Perturbation::Identity => a.clone(),
            Perturbation::DiagSpeeds(s) => s.component_mul(a),
            Perturbation::Affine { a: am, b, c } => am * x + b * a + c,
        }
    }

    /// `∇ₓf`, an `n × n` matrix.
    pub fn grad_x(&self, n: usize) -> DMatrix<f64> {
        match self {
            Perturbation::Affine { a, .. } => a.clone(),
            _ => DMatrix::zeros(n, n),
        }
    }

    /// `∇ₐf`, an `n × d` matrix.
    pub fn grad_a(&self, n: usize, d: usize) -> DMatrix<f64> {
        match self {
            Perturbation::Identity => DMatrix::identity(n, d),
            Perturbation::DiagSpeeds(s) => DMatrix::from_diagonal(s),
            Perturbation::Affine { b, .. } => b.clone(),
        }
    }

    pub fn is_state_independent(&self) -> bool {
        match self {
            Perturbation::Affine { a, .. } => a.iter().all(|&v| v == 0.0),
            _ => true,
        }
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        let ok = match self {
            Perturbation::Identity => n == d,
            Perturbation::DiagSpeeds(s) => n == d && s.len() == n,
            Perturbation::Affine { a, b, c } => {
                a.shape() == (n, n) && b.shape() == (n, d) && c.len() == n
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!("perturbation does not fit n = {n}, d = {d}")))
        }
    }

    /// A constant `M` with `‖f(x, a)‖ ≤ M (1 + ‖x‖)` for `‖a‖ ≤ a_sup`.
    pub fn growth_constant(&self, a_sup: f64) -> f64 {
        match self {
            Perturbation::Identity => a_sup,
            Perturbation::DiagSpeeds(s) => s.amax() * a_sup,
            Perturbation::Affine { a, b, c } => {
                let na = a.clone().singular_values().max();
                let nb = b.clone().singular_values().max();
                na.max(nb * a_sup + c.norm())
            }
        }
    }
}

/// An affine-in-time path `value + slope · t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub value: DVector<f64>,
    pub slope: DVector<f64>,
}

impl ControlPath {
    pub fn constant(value: DVector<f64>) -> Self {
        let slope = DVector::zeros(value.len());
        ControlPath { value, slope }
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        &self.value + t * &self.slope
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UControl {
    /// `u` is prescribed.
    Fixed(ControlPath),
    /// `u` is a decision variable; the path is only a starting guess.
    Free(ControlPath),
}

impl UControl {
    pub fn path(&self) -> &ControlPath {
        match self {
            UControl::Fixed(p) | UControl::Free(p) => p,
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, UControl::Free(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepingProblem {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub polyhedron: Polyhedron,
    /// Radius of the sphere `‖u‖ = r` the free control lives on.
    pub r: f64,
    pub tau: f64,
    pub f: Perturbation,
    pub phi: TerminalCost,
    pub ell: RunningCost,
    pub u: UControl,
    /// Growth constant `M`; estimated from the controls when absent.
    pub growth: Option<f64>,
    /// Require `x(T) − u(T)` on the boundary of `C`.
    pub terminal_on_boundary: bool,
}

impl SweepingProblem {
    pub fn m(&self) -> usize {
        self.polyhedron.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n, self.d);
        if n == 0 || d == 0 {
            return Err(Error::DimensionMismatch("n and d must be positive".into()));
        }
        if self.x0.len() != n || self.polyhedron.dim() != n {
            return Err(Error::DimensionMismatch("x0 or generators do not match n".into()));
        }
        self.f.check(n, d)?;
        if self.phi.target.len() != n || self.ell.x_target.len() != n {
            return Err(Error::DimensionMismatch("cost targets do not match n".into()));
        }
        for v in [&self.ell.a_shift, &self.ell.a_shift_rate, &self.ell.abs_shift, &self.ell.abs_shift_rate] {
            if v.len() != d {
                return Err(Error::DimensionMismatch("cost shifts do not match d".into()));
            }
        }
        if self.u.path().dim() != n {
            return Err(Error::DimensionMismatch("u path does not match n".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::Config("r must be positive".into()));
        }
        if self.tau < 0.0 || self.tau > self.r.min(self.horizon) {
            return Err(Error::Config("tau must lie in [0, min(r, T)]".into()));
        }
        let w = &self.x0 - self.u.path().at(0.0);
        let tol = geometry::default_tol(&w);
        let vals = self.polyhedron.values(&w);
        if let Some(i) = vals.iter().position(|&v| v > tol) {
            return Err(Error::InfeasibleStart(format!(
                "x0 - u(0) violates constraint {i} by {:e}",
                vals[i]
            )));
        }
        Ok(())
    }

    /// Growth constant for controls bounded by `a_sup`.
    pub fn growth_for(&self, a_sup: f64) -> f64 {
        self.growth.unwrap_or_else(|| self.f.growth_constant(a_sup))
    }
}

/// Uniform mesh `t_j = jT/k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub k: usize,
    pub horizon: f64,
}

impl Mesh {
    pub fn new(k: usize, horizon: f64) -> Self {
        Mesh { k, horizon }
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.k as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        if j == self.k {
            self.horizon
        } else {
            j as f64 * self.h()
        }
    }

    /// First node of the inner window, `⌈kτ/T⌉`.
    pub fn j_lower(&self, tau: f64) -> usize {
        let v = self.k as f64 * tau / self.horizon;
        ((v - 1e-9).ceil().max(0.0) as usize).min(self.k)
    }

    /// Last node of the inner window, `⌊k(T − τ)/T⌋ − 1`.
    pub fn j_upper(&self, tau: f64) -> isize {
        let v = self.k as f64 * (self.horizon - tau) / self.horizon;
        (v + 1e-9).floor() as isize - 1
    }

    /// True when node `j` lies in the window where `‖u_j‖ = r` is enforced.
    pub fn in_window(&self, j: usize, tau: f64) -> bool {
        j >= self.j_lower(tau) && (j as isize) <= self.j_upper(tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory {
    pub mesh: Mesh,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
}

impl DiscreteTrajectory {
    pub fn k(&self) -> usize {
        self.mesh.k
    }

    pub fn xdot(&self, j: usize) -> DVector<f64> {
        (&self.x[j + 1] - &self.x[j]) / self.mesh.h()
    }

    pub fn udot(&self, j: usize) -> DVector<f64> {
        (&self.u[j + 1] - &self.u[j]) / self.mesh.h()
    }

    pub fn adot(&self, j: usize) -> DVector<f64> {
        (&self.a[j + 1] - &self.a[j]) / self.mesh.h()
    }

    /// `x_j − u_j`.
    pub fn gap(&self, j: usize) -> DVector<f64> {
        &self.x[j] - &self.u[j]
    }

    /// Sample closed-form paths on a mesh.
    pub fn sample(
        mesh: Mesh,
        x: impl Fn(f64) -> DVector<f64>,
        u: impl Fn(f64) -> DVector<f64>,
        a: impl Fn(f64) -> DVector<f64>,
    ) -> Self {
        let ts: Vec<f64> = (0..=mesh.k).map(|j| mesh.t(j)).collect();
        DiscreteTrajectory {
            mesh,
            x: ts.iter().map(|&t| x(t)).collect(),
            u: ts.iter().map(|&t| u(t)).collect(),
            a: ts.iter().map(|&t| a(t)).collect(),
        }
    }

    pub fn check_shape(&self, n: usize, d: usize) -> Result<()> {
        let k = self.mesh.k;
        let ok = k >= 1
            && self.x.len() == k + 1
            && self.u.len() == k + 1
            && self.a.len() == k + 1
            && self.x.iter().all(|v| v.len() == n)
            && self.u.iter().all(|v| v.len() == n)
            && self.a.iter().all(|v| v.len() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("trajectory shape does not match the problem".into()))
        }
    }
}

/// Per-step data of a catching-up run, kept for the adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Projection multipliers, `z − P(z) = Σ λ_i x*_i`.
    pub lambda: Vec<f64>,
}

/// One catching-up step `x⁺ = u⁺ + P_C(x − h f(x, a) − u⁺)`.
pub fn catching_up_step(
    problem: &SweepingProblem,
    x: &DVector<f64>,
    a: &DVector<f64>,
    u_next: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let z = x - h * problem.f.eval(x, a);
    geometry::project_with_multipliers(&z, &problem.polyhedron, u_next)
}

/// Catching-up on given control samples (`k + 1` nodes each).
pub fn catching_up_sampled(
    problem: &SweepingProblem,
    mesh: Mesh,
    u: &[DVector<f64>],
    a: &[DVector<f64>],
) -> Result<(DiscreteTrajectory, Vec<StepRecord>)> {
    let k = mesh.k;
    if u.len() != k + 1 || a.len() != k + 1 {
        return Err(Error::DimensionMismatch("control samples need k + 1 nodes".into()));
    }
    let h = mesh.h();
    let mut x = Vec::with_capacity(k + 1);
    let mut steps = Vec::with_capacity(k);
    x.push(problem.x0.clone());
    for j in 0..k {
        let (next, lambda) = catching_up_step(problem, &x[j], &a[j], &u[j + 1], h)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite state at step {j}")));
        }
        x.push(next);
        steps.push(StepRecord { lambda });
    }
    Ok((DiscreteTrajectory { mesh, x, u: u.to_vec(), a: a.to_vec() }, steps))
}

/// Run the catching-up scheme from `x0` with controls given as functions of time.
pub fn catching_up(
    problem: &SweepingProblem,
    u_path: impl Fn(f64) -> DVector<f64>,
    a_path: impl Fn(f64) -> DVector<f64>,
    k: usize,
) -> Result<DiscreteTrajectory> {
    if k == 0 {
        return Err(Error::DimensionMismatch("k must be positive".into()));
    }
    let mesh = Mesh::new(k, problem.horizon);
    let u: Vec<_> = (0..=k).map(|j| u_path(mesh.t(j))).collect();
    let a: Vec<_> = (0..=k).map(|j| a_path(mesh.t(j))).collect();
    if u[0].len() != problem.n || a[0].len() != problem.d {
        return Err(Error::DimensionMismatch("control paths do not match (n, d)".into()));
    }
    let w = &problem.x0 - &u[0];
    let tol = geometry::default_tol(&w);
    if !problem.polyhedron.contains(&w, tol) {
        return Err(Error::InfeasibleStart("x0 - u(0) is outside C".into()));
    }
    catching_up_sampled(problem, mesh, &u, &a).map(|(t, _)| t)
}

/// `l = ‖x0‖ + e^{2MT}(2MT(1 + ‖x0‖) + ∫‖u̇‖)` and the matching speed bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriBound {
    pub l: f64,
    pub growth: f64,
}

impl AprioriBound {
    /// Velocity bound `2(1 + l)M + ‖u̇(t)‖`.
    pub fn vbound(&self, udot_norm: f64) -> f64 {
        2.0 * (1.0 + self.l) * self.growth + udot_norm
    }
}

pub fn apriori_bounds(problem: &SweepingProblem, growth: f64, udot_integral: f64) -> AprioriBound {
    let t = problem.horizon;
    let nx = problem.x0.norm();
    let e = (2.0 * growth * t).exp();
    AprioriBound { l: nx + e * (2.0 * growth * t * (1.0 + nx) + udot_integral), growth }
}

/// Recover `η_j ≥ 0` with `−(x_{j+1} − x_j)/h − f(x_j, a_j) = Σ η_ji x*_i`,
/// using the union of the active sets at both ends of the step. The union
/// covers the explicit scheme and the implicit catching-up step alike.
pub fn eta_from_trajectory(problem: &SweepingProblem, traj: &DiscreteTrajectory) -> Result<Vec<DVector<f64>>> {
    eta_with(problem, traj, |j| problem.f.eval(&traj.x[j], &traj.a[j]))
}

/// Same decomposition with `f` evaluated at the interval midpoint, which is
/// exact for piecewise-linear candidates.
pub fn eta_midpoint(problem: &SweepingProblem, traj: &DiscreteTrajectory) -> Result<Vec<DVector<f64>>> {
    eta_with(problem, traj, |j| {
        let xm = (&traj.x[j] + &traj.x[j + 1]) * 0.5;
        let am = (&traj.a[j] + &traj.a[j + 1]) * 0.5;
        problem.f.eval(&xm, &am)
    })
}

fn eta_with(
    problem: &SweepingProblem,
    traj: &DiscreteTrajectory,
    f_at: impl Fn(usize) -> DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    traj.check_shape(problem.n, problem.d)?;
    let c = &problem.polyhedron;
    let m = c.len();
    let mut out = Vec::with_capacity(traj.k());
    for j in 0..traj.k() {
        let v = -traj.xdot(j) - f_at(j);
        let g0 = traj.gap(j);
        let g1 = traj.gap(j + 1);
        let tol0 = geometry::default_tol(&g0);
        let tol1 = geometry::default_tol(&g1);
        let mut idx = geometry::active_set(&g0, c, tol0)?;
        for i in geometry::active_set(&g1, c, tol1)? {
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        idx.sort_unstable();
        if !c.independent(&idx) {
            return Err(Error::DependentGenerators);
        }
        let dec = geometry::fit_cone(&v, &idx, c)?;
        let scale = 1.0 + v.norm() + traj.x[j].norm() / traj.mesh.h();
        if dec.residual > 1e-8 * scale {
            return Err(Error::NotInCone { residual: dec.residual });
        }
        out.push(dec.dense(m));
    }
    Ok(out)
}

/// Terminal normal multiplier `η(T)` read off the last interval and kept
/// only on constraints active at `T`.
pub fn eta_terminal(problem: &SweepingProblem, traj: &DiscreteTrajectory, eta_last: &DVector<f64>) -> Result<DVector<f64>> {
    let gk = traj.gap(traj.k());
    let act = geometry::active_set(&gk, &problem.polyhedron, geometry::default_tol(&gk))?;
    let mut out = DVector::zeros(problem.m());
    for i in act {
        out[i] = eta_last[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    pub(crate) fn ex41() -> SweepingProblem {
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
            ell: {
                let mut l = RunningCost::zero(1, 1);
                l.a_weight = 1.0;
                l
            },
            u: UControl::Fixed(ControlPath::constant(v(&[0.5]))),
            growth: None,
            terminal_on_boundary: false,
        }
    }

    #[test]
    fn window_indices() {
        let m = Mesh::new(10, 1.0);
        assert_eq!(m.j_lower(0.25), 3);
        assert_eq!(m.j_upper(0.25), 6);
        assert!(m.t(m.j_upper(0.25) as usize) <= 0.75);
        assert_eq!(m.j_lower(0.0), 0);
        assert_eq!(m.j_upper(0.0), 9);
    }

    #[test]
    fn catching_up_stops_at_the_wall() {
        let p = ex41();
        let tr = catching_up(&p, |_| v(&[0.5]), |_| v(&[-1.0]), 10).unwrap();
        // x = t until t = 1/2, then x = 1/2
        assert!((tr.x[3][0] - 0.3).abs() < 1e-14);
        assert!((tr.x[10][0] - 0.5).abs() < 1e-14);
        let eta = eta_from_trajectory(&p, &tr).unwrap();
        assert!(eta[2][0].abs() < 1e-12);
        assert!((eta[8][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_start_rejected() {
        let p = ex41();
        let err = catching_up(&p, |_| v(&[-1.0]), |_| v(&[0.0]), 4).unwrap_err();
        assert!(matches!(err, Error::InfeasibleStart(_)));
    }

    #[test]
    fn zero_control_is_stationary_inside() {
        let p = ex41();
        let tr = catching_up(&p, |_| v(&[0.5]), |_| v(&[0.0]), 7).unwrap();
        assert!(tr.x.iter().all(|x| x[0] == 0.0));
    }
}
