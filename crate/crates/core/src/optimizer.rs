//! Reduced-space solver for the discrete problems. The state is eliminated
//! by running catching-up on the controls, gradients come from the adjoint
//! of that recursion, and the remaining inequalities are handled by an
//! augmented Lagrangian around an L-BFGS inner loop.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{self, Mesh, StepRecord};
use crate::error::{Error, Result};
use crate::transcription::{self, Block, DecisionVector, DiscreteProblem, Gradient};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub multistart: usize,
    pub seed: u64,
    /// Random initial controls are drawn from `[−s, s]^d`.
    pub init_scale: f64,
    pub max_iter: usize,
    pub max_outer: usize,
    /// Stationarity tolerance on the reduced gradient (sup norm).
    pub tol: f64,
    pub feas_tol: f64,
    pub penalty0: f64,
    pub parallel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            multistart: 8,
            seed: 0,
            init_scale: 1.0,
            max_iter: 400,
            max_outer: 25,
            tol: 1e-9,
            feas_tol: 1e-8,
            penalty0: 10.0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// The line search could not decrease the merit any further.
    Stalled,
    MaxIterExceeded,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Stalled => "stalled",
            SolveStatus::MaxIterExceeded => "max_iter_exceeded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSolution {
    pub z: DecisionVector,
    pub traj: dynamics::DiscreteTrajectory,
    /// `J_k` at the solution, without augmented-Lagrangian terms.
    pub cost: f64,
    pub status: SolveStatus,
    /// Sup norm of the reduced gradient of the final augmented Lagrangian.
    pub stationarity: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub start_index: usize,
    /// Multipliers of the augmented-Lagrangian inequalities.
    pub al_multipliers: Vec<(String, usize, f64)>,
    /// Merit values of accepted inner iterations, one list per outer pass.
    pub merit_history: Vec<Vec<f64>>,
}

/// How the reduced vector maps onto `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum UParam {
    Fixed,
    /// `n = 1`: `u = sign · ρ`.
    Line(f64),
    /// `n = 2`: `u = ρ (cos θ, sin θ)`.
    Polar,
    /// `n ≥ 3`: `u = ρ v / ‖v‖` with `(‖v‖² − 1)²` keeping `v` near the sphere.
    Sphere,
}

const SPHERE_WEIGHT: f64 = 1.0;

struct Layout<'a> {
    dp: &'a DiscreteProblem,
    uparam: UParam,
    /// First decision node (1 when the start is pinned).
    s: usize,
    tie_last: bool,
    a_nodes: Vec<usize>,
    /// Per node: (offset of the direction block, offset of the band variable).
    u_slots: Vec<(Option<usize>, Option<usize>)>,
    len: usize,
    band_half: f64,
}

impl<'a> Layout<'a> {
    fn new(dp: &'a DiscreteProblem, seed: &DecisionVector) -> Self {
        let p = &dp.problem;
        let k = dp.k();
        let s = usize::from(dp.pinned());
        let tie_last = p.ell.ignores_adot() && !dp.proximity_on;
        let last = if tie_last { k - 1 } else { k };
        let a_nodes: Vec<usize> = (s..=last).collect();
        let mut len = a_nodes.len() * p.d;
        let uparam = if !p.u.is_free() {
            UParam::Fixed
        } else {
            match p.n {
                1 => UParam::Line(if seed.u[k][0] < 0.0 { -1.0 } else { 1.0 }),
                2 => UParam::Polar,
                _ => UParam::Sphere,
            }
        };
        let mut u_slots = vec![(None, None); k + 1];
        if uparam != UParam::Fixed {
            for (j, slot) in u_slots.iter_mut().enumerate().skip(s) {
                let dir = match uparam {
                    UParam::Polar => Some(1),
                    UParam::Sphere => Some(p.n),
                    _ => None,
                };
                if let Some(w) = dir {
                    slot.0 = Some(len);
                    len += w;
                }
                if !dp.mesh.in_window(j, p.tau) {
                    slot.1 = Some(len);
                    len += 1;
                }
            }
        }
        let band_half = (p.tau + dp.eps_k).min(0.99 * p.r);
        Layout { dp, uparam, s, tie_last, a_nodes, u_slots, len, band_half }
    }

    fn rho(&self, y: &DVector<f64>, j: usize) -> (f64, f64) {
        match self.u_slots[j].1 {
            Some(o) => (self.dp.problem.r + self.band_half * y[o].sin(), self.band_half * y[o].cos()),
            None => (self.dp.problem.r, 0.0),
        }
    }

    /// Controls encoded by `y`, starting from `base` for pinned or fixed parts.
    fn controls(&self, y: &DVector<f64>, base: &DecisionVector) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let p = &self.dp.problem;
        let k = self.dp.k();
        let mut a = base.a.clone();
        for (i, &j) in self.a_nodes.iter().enumerate() {
            a[j] = y.rows(i * p.d, p.d).into_owned();
        }
        if self.tie_last {
            a[k] = a[k - 1].clone();
        }
        let mut u = base.u.clone();
        if self.uparam != UParam::Fixed {
            for j in self.s..=k {
                let (rho, _) = self.rho(y, j);
                u[j] = match self.uparam {
                    UParam::Line(sg) => DVector::from_element(1, sg * rho),
                    UParam::Polar => {
                        let th = y[self.u_slots[j].0.unwrap()];
                        DVector::from_vec(vec![rho * th.cos(), rho * th.sin()])
                    }
                    UParam::Sphere => {
                        let o = self.u_slots[j].0.unwrap();
                        let v = y.rows(o, p.n).into_owned();
                        let nv = v.norm().max(1e-300);
                        v * (rho / nv)
                    }
                    UParam::Fixed => unreachable!(),
                };
            }
        }
        (u, a)
    }

    fn encode(&self, z: &DecisionVector) -> DVector<f64> {
        let p = &self.dp.problem;
        let mut y = DVector::zeros(self.len);
        for (i, &j) in self.a_nodes.iter().enumerate() {
            y.rows_mut(i * p.d, p.d).copy_from(&z.a[j]);
        }
        if self.uparam != UParam::Fixed {
            for j in self.s..=self.dp.k() {
                let u = &z.u[j];
                if let Some(o) = self.u_slots[j].1 {
                    let s = ((u.norm() - p.r) / self.band_half).clamp(-1.0, 1.0);
                    y[o] = s.asin();
                }
                match self.uparam {
                    UParam::Polar => y[self.u_slots[j].0.unwrap()] = u[1].atan2(u[0]),
                    UParam::Sphere => {
                        let o = self.u_slots[j].0.unwrap();
                        let nu = u.norm();
                        let v = if nu > 0.0 { u / nu } else { DVector::from_fn(p.n, |i, _| if i == 0 { 1.0 } else { 0.0 }) };
                        y.rows_mut(o, p.n).copy_from(&v);
                    }
                    _ => {}
                }
            }
        }
        y
    }

    /// Pull gradients in `(u, a)` back to `y`.
    fn pullback(&self, y: &DVector<f64>, gu: &[DVector<f64>], ga: &[DVector<f64>]) -> DVector<f64> {
        let p = &self.dp.problem;
        let k = self.dp.k();
        let mut out = DVector::zeros(self.len);
        for (i, &j) in self.a_nodes.iter().enumerate() {
            let mut g = ga[j].clone();
            if self.tie_last && j == k - 1 {
                g += &ga[k];
            }
            out.rows_mut(i * p.d, p.d).copy_from(&g);
        }
        if self.uparam != UParam::Fixed {
            for j in self.s..=k {
                let (rho, drho) = self.rho(y, j);
                let g = &gu[j];
                // unit direction of u_j and its derivatives
                let dir: DVector<f64> = match self.uparam {
                    UParam::Line(sg) => DVector::from_element(1, sg),
                    UParam::Polar => {
                        let th = y[self.u_slots[j].0.unwrap()];
                        out[self.u_slots[j].0.unwrap()] += rho * (-th.sin() * g[0] + th.cos() * g[1]);
                        DVector::from_vec(vec![th.cos(), th.sin()])
                    }
                    UParam::Sphere => {
                        let o = self.u_slots[j].0.unwrap();
                        let v = y.rows(o, p.n).into_owned();
                        let nv = v.norm().max(1e-300);
                        let vh = &v / nv;
                        let gv = (g - &vh * vh.dot(g)) * (rho / nv);
                        let mut blk = out.rows_mut(o, p.n);
                        blk += gv;
                        vh
                    }
                    UParam::Fixed => unreachable!(),
                };
                if let Some(o) = self.u_slots[j].1 {
                    out[o] += drho * dir.dot(g);
                }
            }
        }
        out
    }

    fn sphere_penalty(&self, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut g = DVector::zeros(self.len);
        if self.uparam != UParam::Sphere {
            return (0.0, g);
        }
        let n = self.dp.problem.n;
        let mut val = 0.0;
        for j in self.s..=self.dp.k() {
            let o = self.u_slots[j].0.unwrap();
            let v = y.rows(o, n).into_owned();
            let e = v.norm_squared() - 1.0;
            val += SPHERE_WEIGHT * e * e;
            let mut blk = g.rows_mut(o, n);
            blk += v * (4.0 * SPHERE_WEIGHT * e);
        }
        (val, g)
    }
}

/// Backpropagate a gradient in `(x, u, a)` through the catching-up
/// recursion. Returns gradients in `u` and `a` only.
fn adjoint(
    dp: &DiscreteProblem,
    steps: &[StepRecord],
    g: &Gradient,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let p = &dp.problem;
    let k = dp.k();
    let h = dp.mesh.h();
    let n = p.n;
    let mut gu = g.u.clone();
    let mut ga = g.a.clone();
    let fx = p.f.grad_x(n);
    let state_free = p.f.is_state_independent();
    let mut mu = g.x[k].clone();
    for j in (0..k).rev() {
        let qmu = apply_q(dp, &steps[j].lambda, &mu);
        gu[j + 1] += &mu - &qmu;
        let fa = p.f.grad_a(n, p.d);
        ga[j] -= h * fa.tr_mul(&qmu);
        if j > 0 {
            let mut next = g.x[j].clone() + &qmu;
            if !state_free {
                next -= h * fx.tr_mul(&qmu);
            }
            mu = next;
        }
    }
    (gu, ga)
}

/// `Q μ` with `Q = I − Aᵀ(AAᵀ)⁻¹A` over generators with positive multiplier.
fn apply_q(dp: &DiscreteProblem, lambda: &[f64], mu: &DVector<f64>) -> DVector<f64> {
    let c = &dp.problem.polyhedron;
    let act: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] > 0.0).collect();
    if act.is_empty() {
        return mu.clone();
    }
    let a = c.matrix().select_rows(&act);
    let aat = &a * a.transpose();
    let rhs = &a * mu;
    let coef = match aat.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => crate::linalg::pinv_solve(&aat, &rhs),
    };
    mu - a.tr_mul(&coef)
}

struct Eval {
    merit: f64,
    grad: DVector<f64>,
    cost: f64,
    g: Vec<f64>,
    z: DecisionVector,
}

struct Problem<'a> {
    layout: Layout<'a>,
    base: DecisionVector,
}

impl<'a> Problem<'a> {
    fn evaluate(&self, y: &DVector<f64>, mult: &[f64], rho: f64) -> Result<Eval> {
        let dp = self.layout.dp;
        let (u, a) = self.layout.controls(y, &self.base);
        let (traj, steps) = dynamics::catching_up_sampled(&dp.problem, dp.mesh, &u, &a)?;
        let z = DecisionVector::from_trajectory(&traj);
        let (cost, mut g) = transcription::assemble_cost(dp, &z);
        let ineq = transcription::inequalities(dp, &z);
        let mut merit = cost;
        let mut gvals = Vec::with_capacity(ineq.len());
        for (i, c) in ineq.iter().enumerate() {
            let mu = mult.get(i).copied().unwrap_or(0.0);
            let s = (mu + rho * c.value).max(0.0);
            merit += (s * s - mu * mu) / (2.0 * rho);
            if s > 0.0 {
                for (b, j, v) in &c.grad {
                    let tgt = match b {
                        Block::X => &mut g.x[*j],
                        Block::U => &mut g.u[*j],
                        Block::A => &mut g.a[*j],
                    };
                    tgt.axpy(s, v, 1.0);
                }
            }
            gvals.push(c.value);
        }
        let (gu, ga) = adjoint(dp, &steps, &g);
        let mut grad = self.layout.pullback(y, &gu, &ga);
        let (pen, gpen) = self.layout.sphere_penalty(y);
        merit += pen;
        grad += gpen;
        if !merit.is_finite() {
            return Err(Error::NumericalFailure("non-finite merit".into()));
        }
        Ok(Eval { merit, grad, cost, g: gvals, z })
    }
}

struct InnerResult {
    y: DVector<f64>,
    status: SolveStatus,
    iterations: usize,
    history: Vec<f64>,
    stationarity: f64,
}

/// L-BFGS with Armijo backtracking.
fn lbfgs(prob: &Problem, y0: DVector<f64>, mult: &[f64], rho: f64, opts: &SolveOptions) -> Result<InnerResult> {
    const MEM: usize = 10;
    let mut y = y0;
    let mut cur = prob.evaluate(&y, mult, rho)?;
    let mut history = vec![cur.merit];
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut status = SolveStatus::MaxIterExceeded;
    let mut iterations = 0;
    let mut small_steps = 0;
    for it in 0..opts.max_iter {
        iterations = it;
        let gnorm = cur.grad.amax();
        if gnorm <= opts.tol {
            status = SolveStatus::Converged;
            break;
        }
        // two-loop recursion
        let mut q = cur.grad.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, yv) in s_hist.iter().zip(&y_hist).rev() {
            let r = 1.0 / yv.dot(s);
            let a = r * s.dot(&q);
            q.axpy(-a, yv, 1.0);
            alphas.push((a, r));
        }
        if let (Some(s), Some(yv)) = (s_hist.last(), y_hist.last()) {
            q *= s.dot(yv) / yv.norm_squared();
        } else {
            q *= 1.0 / cur.grad.norm().max(1.0);
        }
        for ((s, yv), (a, r)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = r * yv.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut dir = -q;
        let mut slope = dir.dot(&cur.grad);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = -cur.grad.clone() / cur.grad.norm().max(1.0);
            slope = dir.dot(&cur.grad);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &y + step * &dir;
            if let Ok(ev) = prob.evaluate(&trial, mult, rho) {
                if ev.merit <= cur.merit + 1e-4 * step * slope {
                    accepted = Some((trial, ev));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((ynew, ev)) = accepted else {
            status = SolveStatus::Stalled;
            break;
        };
        let s = &ynew - &y;
        let yv = &ev.grad - &cur.grad;
        let decrease = cur.merit - ev.merit;
        if s.dot(&yv) > 1e-12 * s.norm() * yv.norm() {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > MEM {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        y = ynew;
        cur = ev;
        history.push(cur.merit);
        if decrease <= 1e-15 * (1.0 + cur.merit.abs()) {
            small_steps += 1;
            if small_steps >= 5 {
                status = SolveStatus::Stalled;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    let stationarity = cur.grad.amax();
    if stationarity <= opts.tol {
        status = SolveStatus::Converged;
    }
    Ok(InnerResult { y, status, iterations, history, stationarity })
}

fn max_violation(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, &v| m.max(v))
}

fn solve_from(dp: &DiscreteProblem, opts: &SolveOptions, start: &DecisionVector, index: usize) -> Result<DiscreteSolution> {
    let layout = Layout::new(dp, start);
    let y0 = layout.encode(start);
    let prob = Problem { layout, base: start.clone() };
    let n_ineq = transcription::inequalities(dp, start).len();
    let mut mult = vec![0.0; n_ineq];
    let mut rho = opts.penalty0;
    let mut y = y0;
    let mut histories = Vec::new();
    let mut iterations = 0;
    let mut prev_viol = f64::INFINITY;
    let mut status = SolveStatus::MaxIterExceeded;
    let mut stationarity = f64::INFINITY;
    let outer = if n_ineq == 0 { 1 } else { opts.max_outer };
    for _ in 0..outer {
        let inner = lbfgs(&prob, y, &mult, rho, opts)?;
        iterations += inner.iterations;
        histories.push(inner.history);
        y = inner.y;
        status = inner.status;
        stationarity = inner.stationarity;
        if n_ineq == 0 {
            break;
        }
        let ev = prob.evaluate(&y, &mult, rho)?;
        let viol = max_violation(&ev.g);
        for (m, g) in mult.iter_mut().zip(&ev.g) {
            *m = (*m + rho * g).max(0.0);
        }
        if viol <= opts.feas_tol && status != SolveStatus::MaxIterExceeded {
            break;
        }
        if viol > 0.25 * prev_viol {
            rho = (rho * 10.0).min(1e10);
        }
        prev_viol = viol;
    }
    let ev = prob.evaluate(&y, &mult, rho)?;
    let traj = ev.z.to_trajectory(dp.mesh);
    let names = transcription::inequalities(dp, &ev.z);
    let al_multipliers = names
        .iter()
        .zip(&mult)
        .filter(|(_, &m)| m != 0.0)
        .map(|(c, &m)| (c.name.to_string(), c.node, m))
        .collect();
    Ok(DiscreteSolution {
        cost: ev.cost,
        max_violation: max_violation(&ev.g),
        z: ev.z,
        traj,
        status,
        stationarity,
        iterations,
        start_index: index,
        al_multipliers,
        merit_history: histories,
    })
}

fn random_start(dp: &DiscreteProblem, seed: &DecisionVector, opts: &SolveOptions, index: usize) -> DecisionVector {
    let mut z = seed.clone();
    if index == 0 {
        return z;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let s = opts.init_scale;
    let a = DVector::from_fn(dp.problem.d, |_, _| if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 });
    let first = usize::from(dp.pinned());
    for j in first..=dp.k() {
        z.a[j] = a.clone();
    }
    z
}

fn pick_best(results: Vec<Result<DiscreteSolution>>, feas_tol: f64) -> Result<DiscreteSolution> {
    let mut best: Option<DiscreteSolution> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(sol) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let fa = sol.max_violation <= 100.0 * feas_tol;
                        let fb = b.max_violation <= 100.0 * feas_tol;
                        (fa && !fb) || (fa == fb && sol.cost < b.cost)
                    }
                };
                if better {
                    best = Some(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::NumericalFailure("no start produced a solution".into())))
}

/// Multi-start solve from the feasible seed and random constant controls.
pub fn solve_discrete(dp: &DiscreteProblem, opts: &SolveOptions) -> Result<DiscreteSolution> {
    let seed = transcription::feasible_seed(dp)?;
    let starts: Vec<DecisionVector> = (0..opts.multistart.max(1)).map(|i| random_start(dp, &seed, opts, i)).collect();
    let run = |(i, z): (usize, &DecisionVector)| solve_from(dp, opts, z, i);
    let results: Vec<_> = if opts.parallel {
        starts.par_iter().enumerate().map(run).collect()
    } else {
        starts.iter().enumerate().map(run).collect()
    };
    pick_best(results, opts.feas_tol)
}

/// Single solve from a given starting point.
pub fn solve_discrete_from(dp: &DiscreteProblem, opts: &SolveOptions, warm: &DecisionVector) -> Result<DiscreteSolution> {
    if warm.x.len() != dp.k() + 1 {
        return Err(Error::DimensionMismatch("warm start on a different mesh".into()));
    }
    solve_from(dp, opts, warm, 0)
}

/// Move a solution to a finer mesh: controls are interpolated piecewise
/// linearly and the state is recomputed by catching-up.
pub fn refine_grid(dp: &DiscreteProblem, sol: &DiscreteSolution, k_new: usize) -> Result<(DiscreteProblem, DecisionVector)> {
    if k_new <= dp.k() {
        return Err(Error::DimensionMismatch("refinement must increase k".into()));
    }
    let mut fine = dp.clone();
    fine.mesh = Mesh::new(k_new, dp.problem.horizon);
    fine.eps_k = 1.0 / (k_new as f64).sqrt();
    let coarse = &sol.traj;
    let interp = |v: &[DVector<f64>], t: f64| {
        let hc = coarse.mesh.h();
        let s = (t / hc).clamp(0.0, coarse.k() as f64);
        let j = (s.floor() as usize).min(coarse.k() - 1);
        let w = s - j as f64;
        &v[j] * (1.0 - w) + &v[j + 1] * w
    };
    let u: Vec<_> = (0..=k_new).map(|j| interp(&coarse.u, fine.mesh.t(j))).collect();
    let a: Vec<_> = (0..=k_new).map(|j| interp(&coarse.a, fine.mesh.t(j))).collect();
    let (traj, _) = dynamics::catching_up_sampled(&dp.problem, fine.mesh, &u, &a)?;
    Ok((fine, DecisionVector::from_trajectory(&traj)))
}

/// Reduced gradient at `z` with zero multipliers, exposed for testing the
/// adjoint against finite differences.
pub fn reduced_gradient(dp: &DiscreteProblem, z: &DecisionVector) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let layout = Layout::new(dp, z);
    let y = layout.encode(z);
    let prob = Problem { layout, base: z.clone() };
    let ev = prob.evaluate(&y, &[], 1.0)?;
    Ok((ev.merit, ev.grad, y))
}

/// Merit at a reduced point, companion to [`reduced_gradient`].
pub fn reduced_merit(dp: &DiscreteProblem, base: &DecisionVector, y: &DVector<f64>) -> Result<f64> {
    let layout = Layout::new(dp, base);
    let prob = Problem { layout, base: base.clone() };
    prob.evaluate(y, &[], 1.0).map(|e| e.merit)
}
