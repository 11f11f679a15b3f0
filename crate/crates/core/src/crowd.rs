//! Crowd motion in a corridor: `n` disks of radius `R` on a line, each
//! pushed towards the exit at the origin with speed `s_i ā_i`, kept apart by
//! the nonoverlap constraint `x_{i+1} − x_i ≥ 2R`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{subgradients, ContinuousCertificate};
use crate::cost::{RunningCost, TerminalCost};
use crate::dynamics::{eta_midpoint, eta_terminal, ControlPath, DiscreteTrajectory, Mesh, Perturbation, SweepingProblem, UControl};
use crate::error::{Error, Result};
use crate::geometry::Polyhedron;
use crate::linalg::null_space;

/// Relative tolerance of the event arithmetic.
const EVENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdConfig {
    pub n: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub speeds: Vec<f64>,
    pub x0: Vec<f64>,
    /// Position of the first shifted disk centre when embedding as a
    /// sweeping process. Chosen from the trajectory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl CrowdConfig {
    pub fn new(n: usize, radius: f64, horizon: f64, speeds: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        let c = CrowdConfig { n, radius, horizon, speeds, x0, alpha: None };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.speeds.len() != self.n || self.x0.len() != self.n {
            return bad(format!("speeds and x0 need {} entries", self.n));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("R must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("T must be positive".into());
        }
        if let Some(i) = self.speeds.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("speeds[{i}] must be positive"));
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return bad("x0 must be finite".into());
        }
        for i in 0..self.n - 1 {
            if self.x0[i + 1] - self.x0[i] < 2.0 * self.radius - self.scale() * EVENT_TOL {
                return bad(format!("x0[{}] and x0[{}] overlap", i, i + 1));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 + self.x0.iter().fold(0.0f64, |m, x| m.max(x.abs())) + self.radius
    }

    fn gap_tol(&self) -> f64 {
        self.scale() * EVENT_TOL
    }

    /// Spontaneous velocities `U_i = −s_i ā_i`.
    pub fn free_velocity(&self, a_bar: &[f64]) -> Vec<f64> {
        self.speeds.iter().zip(a_bar).map(|(s, a)| -s * a).collect()
    }

    fn initially_touching(&self, i: usize) -> bool {
        self.x0[i + 1] - self.x0[i] <= 2.0 * self.radius + self.gap_tol()
    }

    /// `½‖x(T)‖² + ½ T ‖ā‖²`.
    pub fn cost(&self, x_end: &[f64], a_bar: &[f64]) -> f64 {
        0.5 * x_end.iter().map(|x| x * x).sum::<f64>() + 0.5 * self.horizon * a_bar.iter().map(|a| a * a).sum::<f64>()
    }
}

/// A stretch of time with constant velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    /// Positions at `t0`.
    pub x: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Contact forces of the `n − 1` pairs.
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdTrajectory {
    pub segments: Vec<Segment>,
    /// First contact time of each pair, `None` if the pair never touches.
    pub contact_times: Vec<Option<f64>>,
}

impl CrowdTrajectory {
    pub fn at(&self, t: f64) -> Vec<f64> {
        let seg = self
            .segments
            .iter()
            .find(|s| t <= s.t1)
            .unwrap_or_else(|| self.segments.last().expect("at least one segment"));
        let dt = t - seg.t0;
        seg.x.iter().zip(&seg.slopes).map(|(x, v)| x + dt * v).collect()
    }

    pub fn end(&self) -> Vec<f64> {
        let s = self.segments.last().expect("at least one segment");
        self.at(s.t1)
    }

    /// `η` on the segment containing `t` (right-continuous).
    pub fn eta_at(&self, t: f64) -> &[f64] {
        let seg = self
            .segments
            .iter()
            .find(|s| t < s.t1)
            .unwrap_or_else(|| self.segments.last().expect("at least one segment"));
        &seg.eta
    }

    /// Pairs touching at the final time.
    pub fn final_contacts(&self, cfg: &CrowdConfig) -> Vec<usize> {
        let x = self.end();
        (0..cfg.n.saturating_sub(1))
            .filter(|&i| x[i + 1] - x[i] <= 2.0 * cfg.radius + 10.0 * cfg.gap_tol())
            .collect()
    }

    /// Start of the contact episode of pair `i` that lasts until the final
    /// time, `None` when the pair is apart at the end.
    pub fn final_episode(&self, cfg: &CrowdConfig, i: usize) -> Option<f64> {
        let touch = 2.0 * cfg.radius + 10.0 * cfg.gap_tol();
        let gap = |s: &Segment, t: f64| s.x[i + 1] - s.x[i] + (t - s.t0) * (s.slopes[i + 1] - s.slopes[i]);
        let last = self.segments.last()?;
        if gap(last, last.t1) > touch {
            return None;
        }
        let mut start = last.t1;
        for s in self.segments.iter().rev() {
            if gap(s, s.t0) <= touch && gap(s, s.t1) <= touch {
                start = s.t0;
            } else {
                break;
            }
        }
        Some(start)
    }

    pub fn min_gap(&self) -> f64 {
        let mut g = f64::INFINITY;
        for s in &self.segments {
            for t in [s.t0, s.t1] {
                let dt = t - s.t0;
                for i in 0..s.x.len().saturating_sub(1) {
                    g = g.min(s.x[i + 1] + dt * s.slopes[i + 1] - s.x[i] - dt * s.slopes[i]);
                }
            }
        }
        g
    }
}

/// Isotonic (nondecreasing) regression of `u` with unit weights.
fn pava(u: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in u {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 > m2 {
                blocks.pop();
                let last = blocks.last_mut().expect("nonempty");
                *last = ((m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64, c1 + c2);
            } else {
                break;
            }
        }
    }
    blocks.iter().flat_map(|&(m, c)| std::iter::repeat_n(m, c)).collect()
}

/// Projection of the spontaneous velocity on the feasible velocities given
/// the touching pairs; returns the velocities and the pair forces.
fn project_velocity(u: &[f64], touching: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let mut v = vec![0.0; n];
    let mut start = 0;
    for i in 0..n {
        if i + 1 == n || !touching[i] {
            v[start..=i].copy_from_slice(&pava(&u[start..=i]));
            start = i + 1;
        }
    }
    let mut eta = vec![0.0; n.saturating_sub(1)];
    let mut acc = 0.0;
    for i in 0..n.saturating_sub(1) {
        acc += u[i] - v[i];
        eta[i] = if touching[i] { acc.max(0.0) } else { 0.0 };
    }
    (v, eta)
}

/// Exact event-driven integration with constant controls.
pub fn simulate_crowd(cfg: &CrowdConfig, a_bar: &[f64]) -> Result<CrowdTrajectory> {
    cfg.validate()?;
    if a_bar.len() != cfg.n {
        return Err(Error::DimensionMismatch(format!("a_bar needs {} entries", cfg.n)));
    }
    let n = cfg.n;
    let two_r = 2.0 * cfg.radius;
    let tol = cfg.gap_tol();
    let u = cfg.free_velocity(a_bar);
    let mut x = cfg.x0.clone();
    let mut touching: Vec<bool> = (0..n - 1).map(|i| cfg.initially_touching(i)).collect();
    let mut contact_times: Vec<Option<f64>> = touching.iter().map(|&c| c.then_some(0.0)).collect();
    let mut segments = Vec::new();
    let mut t = 0.0;
    for _ in 0..4 * n * n + 8 {
        let (v, eta) = project_velocity(&u, &touching);
        // pairs pulled apart by the projection leave the contact set
        let mut changed = false;
        for i in 0..n - 1 {
            if touching[i] && v[i + 1] > v[i] + tol {
                touching[i] = false;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        let mut dt = cfg.horizon - t;
        let mut hits = Vec::new();
        for i in 0..n - 1 {
            let closing = v[i] - v[i + 1];
            if touching[i] || closing <= 0.0 {
                continue;
            }
            let d = ((x[i + 1] - x[i] - two_r) / closing).max(0.0);
            if d < dt - tol {
                dt = d;
                hits.clear();
                hits.push(i);
            } else if (d - dt).abs() <= tol {
                hits.push(i);
            }
        }
        let t1 = t + dt;
        segments.push(Segment { t0: t, t1, x: x.clone(), slopes: v.clone(), eta });
        for i in 0..n {
            x[i] += dt * v[i];
        }
        t = t1;
        if hits.is_empty() || t >= cfg.horizon {
            // hits landing exactly at T still count as contacts
            for &i in &hits {
                contact_times[i].get_or_insert(t);
            }
            return Ok(CrowdTrajectory { segments, contact_times });
        }
        for &i in &hits {
            touching[i] = true;
            contact_times[i].get_or_insert(t);
            // remove rounding drift so the gap is exactly 2R
            let excess = x[i + 1] - x[i] - two_r;
            if excess.abs() <= 10.0 * tol {
                x[i + 1] -= excess;
            }
        }
    }
    Err(Error::NumericalFailure("crowd event loop did not terminate".into()))
}

/// First time pair `i` (participants `i`, `i + 1`) reaches distance `2R`,
/// solving the gap equation segment by segment along a force history.
pub fn contact_time(i: usize, cfg: &CrowdConfig, a_bar: &[f64], history: &[Segment]) -> Option<f64> {
    if i + 1 >= cfg.n {
        return None;
    }
    if cfg.initially_touching(i) {
        return Some(0.0);
    }
    let sa = |j: usize| cfg.speeds[j] * a_bar[j];
    let eta = |seg: &Segment, j: isize| if j < 0 || j as usize >= cfg.n - 1 { 0.0 } else { seg.eta[j as usize] };
    let mut gap = cfg.x0[i + 1] - cfg.x0[i];
    let two_r = 2.0 * cfg.radius;
    for seg in history {
        let den = eta(seg, i as isize + 1) + eta(seg, i as isize - 1) + sa(i + 1) - sa(i);
        if den > 0.0 {
            let t = seg.t0 + (gap - two_r) / den;
            if t <= seg.t1 + cfg.gap_tol() && t <= cfg.horizon + cfg.gap_tol() {
                return Some(t.max(seg.t0));
            }
        }
        gap -= den * (seg.t1 - seg.t0);
    }
    None
}

/// Force of a single pair at its contact time from equal post-contact
/// velocities, `2η_i = η_{i+1} + η_{i−1} + s_{i+1}ā_{i+1} − s_iā_i`.
pub fn velocity_match(eta_prev: f64, eta_next: f64, s_i: f64, a_i: f64, s_next: f64, a_next: f64) -> f64 {
    0.5 * (eta_next + eta_prev + s_next * a_next - s_i * a_i)
}

/// Forces of a whole chain of touching pairs `first..=last`, solving the
/// coupled velocity matching equations with zero force outside the chain.
pub fn velocity_match_chain(cfg: &CrowdConfig, a_bar: &[f64], first: usize, last: usize) -> Vec<f64> {
    let m = last - first + 1;
    let mut k = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for r in 0..m {
        let i = first + r;
        k[(r, r)] = 2.0;
        if r > 0 {
            k[(r, r - 1)] = -1.0;
        }
        if r + 1 < m {
            k[(r, r + 1)] = -1.0;
        }
        b[r] = cfg.speeds[i + 1] * a_bar[i + 1] - cfg.speeds[i] * a_bar[i];
    }
    let sol = k.lu().solve(&b).expect("chain matrix is positive definite");
    sol.iter().copied().collect()
}

/// One linear relation `Σ c_j ā_j = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub coefficients: Vec<f64>,
    pub reason: String,
}

/// `s_{i+1}ā_i = s_iā_{i+1}` for every pair carrying a positive force.
pub fn proportionality_relations(cfg: &CrowdConfig, positive_pairs: &[usize]) -> Vec<Relation> {
    positive_pairs
        .iter()
        .map(|&i| {
            let mut c = vec![0.0; cfg.n];
            c[i] = cfg.speeds[i + 1];
            c[i + 1] = -cfg.speeds[i];
            Relation { coefficients: c, reason: format!("positive force on pair {}", i + 1) }
        })
        .collect()
}

/// Zero force on an initially touching pair: the sub-chains on either side
/// move with equal mean spontaneous velocity.
fn zero_force_relation(cfg: &CrowdConfig, i: usize, split: &[bool]) -> Relation {
    let mut lo = i;
    while lo > 0 && cfg.initially_touching(lo - 1) && !split[lo - 1] {
        lo -= 1;
    }
    let mut hi = i + 1;
    while hi + 1 < cfg.n && cfg.initially_touching(hi) && !split[hi] {
        hi += 1;
    }
    let mut c = vec![0.0; cfg.n];
    let nl = (i + 1 - lo) as f64;
    let nr = (hi - i) as f64;
    for (j, cj) in c.iter_mut().enumerate().take(i + 1).skip(lo) {
        *cj = -cfg.speeds[j] / nl;
    }
    for (j, cj) in c.iter_mut().enumerate().take(hi + 1).skip(i + 1) {
        *cj = cfg.speeds[j] / nr;
    }
    Relation { coefficients: c, reason: format!("zero force on pair {} at t = 0", i + 1) }
}

/// Outcome of one contact pattern and force sign branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    /// Pairs (1-based) touching at the final time.
    pub pattern: Vec<usize>,
    /// Pairs (1-based) in contact throughout with no force at `t = 0`.
    pub zero_force: Vec<usize>,
    /// Pairs (1-based) that touch only at the final time.
    #[serde(default)]
    pub grazing: Vec<usize>,
    pub cost: Option<f64>,
    pub pruned: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdSolution {
    pub a_bar: Vec<f64>,
    pub cost: f64,
    pub trajectory: CrowdTrajectory,
    /// Pairs (1-based) touching at the final time.
    pub pattern: Vec<usize>,
    pub relations: Vec<Relation>,
    pub branches: Vec<BranchReport>,
    /// Cost decrease gained by the local search after the pattern solve.
    pub refine_gain: f64,
}

struct Candidate {
    a: Vec<f64>,
    cost: f64,
    traj: CrowdTrajectory,
    pattern: Vec<usize>,
    relations: Vec<Relation>,
}

/// Minimize the cost over constant controls with the blocks moving together
/// fixed by `merged`, `ā` restricted to the null space of `relations` and
/// the `grazing` pairs at distance exactly `2R` at the final time.
/// Inside a block the centre moves with the mean spontaneous velocity, so
/// `x(T)` is affine in `ā` and the cost is quadratic.
fn pattern_minimum(cfg: &CrowdConfig, merged: &[bool], grazing: &[usize], relations: &[Relation]) -> Option<Vec<f64>> {
    let n = cfg.n;
    let t = cfg.horizon;
    let mut c = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    let mut start = 0;
    for i in 0..n {
        if i + 1 == n || !merged[i] {
            let len = (i + 1 - start) as f64;
            let mean_x0: f64 = cfg.x0[start..=i].iter().sum::<f64>() / len;
            for p in start..=i {
                c[p] = mean_x0 + 2.0 * cfg.radius * ((p - start) as f64 - 0.5 * (len - 1.0));
                for q in start..=i {
                    a[(p, q)] = -t * cfg.speeds[q] / len;
                }
            }
            start = i + 1;
        }
    }
    let rel = DMatrix::from_fn(relations.len(), n, |r, j| relations[r].coefficients[j]);
    let basis = null_space(&rel, n);
    if basis.ncols() == 0 {
        return None;
    }
    let an = &a * &basis;
    let h = an.transpose() * &an + basis.transpose() * &basis * t;
    let g = an.transpose() * &c;
    if grazing.is_empty() {
        let y = h.cholesky()?.solve(&(-g));
        return Some((basis * y).iter().copied().collect());
    }
    // equality constrained: solve the KKT system
    let (p, m) = (basis.ncols(), grazing.len());
    let mut kkt = DMatrix::zeros(p + m, p + m);
    let mut rhs = DVector::zeros(p + m);
    kkt.view_mut((0, 0), (p, p)).copy_from(&h);
    rhs.rows_mut(0, p).copy_from(&(-g));
    for (r, &i) in grazing.iter().enumerate() {
        let row = an.row(i + 1) - an.row(i);
        kkt.view_mut((p + r, 0), (1, p)).copy_from(&row);
        kkt.view_mut((0, p + r), (p, 1)).copy_from(&row.transpose());
        rhs[p + r] = 2.0 * cfg.radius - (c[i + 1] - c[i]);
    }
    let sol = kkt.clone().lu().solve(&rhs)?;
    if (&kkt * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
        return None;
    }
    Some((basis * sol.rows(0, p)).iter().copied().collect())
}

/// Check a simulated candidate against the branch it was derived from.
fn validate(cfg: &CrowdConfig, traj: &CrowdTrajectory, pattern: &[bool], zero: &[bool], graze: &[bool], relations: &[Relation], a: &[f64]) -> std::result::Result<(), String> {
    let n = cfg.n;
    let contacts = traj.final_contacts(cfg);
    let want: Vec<usize> = (0..n - 1).filter(|&i| pattern[i]).collect();
    if contacts != want {
        return Err(format!(
            "simulated final contacts {:?} differ from the pattern {:?}",
            contacts.iter().map(|i| i + 1).collect::<Vec<_>>(),
            want.iter().map(|i| i + 1).collect::<Vec<_>>()
        ));
    }
    let ftol = 1e-7 * (1.0 + a.iter().zip(&cfg.speeds).map(|(a, s)| (a * s).abs()).fold(0.0, f64::max));
    for i in 0..n - 1 {
        let Some(ti) = traj.final_episode(cfg, i) else { continue };
        if zero[i] && ti > 0.0 {
            return Err(format!("pair {} is not in contact throughout", i + 1));
        }
        if graze[i] && ti < cfg.horizon - 1e-9 * cfg.horizon {
            return Err(format!("pair {} touches before the final time", i + 1));
        }
        let at_contact = traj.eta_at(ti)[i];
        if zero[i] && at_contact > ftol {
            return Err(format!("force on pair {} is {:.4} at contact, not zero", i + 1, at_contact));
        }
        if pattern[i] && !zero[i] && !graze[i] && at_contact <= ftol && ti < cfg.horizon {
            return Err(format!("force on pair {} vanishes at contact", i + 1));
        }
        // a force acting over a stretch of time forces proportional controls
        let pushes = traj.segments.iter().any(|s| s.t1 - s.t0 > cfg.gap_tol() && s.eta[i] > ftol);
        let prop = (cfg.speeds[i + 1] * a[i] - cfg.speeds[i] * a[i + 1]).abs();
        if pushes && prop > 1e-7 * (1.0 + a[i].abs() + a[i + 1].abs()) * cfg.speeds[i].max(cfg.speeds[i + 1]) {
            return Err(format!("force on pair {} after contact without proportional controls", i + 1));
        }
    }
    for r in relations {
        let v: f64 = r.coefficients.iter().zip(a).map(|(c, a)| c * a).sum();
        if v.abs() > 1e-8 * (1.0 + a.iter().map(|x| x.abs()).sum::<f64>()) {
            return Err(format!("relation violated: {}", r.reason));
        }
    }
    Ok(())
}

fn evaluate(cfg: &CrowdConfig, a: &[f64]) -> Option<(f64, CrowdTrajectory)> {
    let traj = simulate_crowd(cfg, a).ok()?;
    Some((cfg.cost(&traj.end(), a), traj))
}

/// Compass search on the simulated cost, keeping the branch relations.
fn refine(cfg: &CrowdConfig, start: &Candidate) -> Candidate {
    let n = cfg.n;
    let rel = DMatrix::from_fn(start.relations.len(), n, |r, j| start.relations[r].coefficients[j]);
    let basis = null_space(&rel, n);
    let mut a = DVector::from_column_slice(&start.a);
    let mut best = start.cost;
    let mut traj = start.traj.clone();
    let mut step = 0.25;
    while step > 1e-10 && basis.ncols() > 0 {
        let mut moved = false;
        for c in 0..basis.ncols() {
            for sgn in [1.0, -1.0] {
                let trial = &a + basis.column(c) * (sgn * step);
                if let Some((cost, tr)) = evaluate(cfg, trial.as_slice()) {
                    if cost < best - 1e-12 * (1.0 + best.abs()) {
                        best = cost;
                        a = trial;
                        traj = tr;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Candidate { a: a.iter().copied().collect(), cost: best, traj, pattern: start.pattern.clone(), relations: start.relations.clone() }
}

fn branch_candidate(cfg: &CrowdConfig, pattern: &[bool], zero: &[bool], graze: &[bool]) -> (BranchReport, Option<Candidate>) {
    let n = cfg.n;
    let one_based = |f: &[bool]| (0..n - 1).filter(|&i| f[i]).map(|i| i + 1).collect::<Vec<_>>();
    let mut report =
        BranchReport { pattern: one_based(pattern), zero_force: one_based(zero), grazing: one_based(graze), cost: None, pruned: None };
    if let Some(i) = (0..n - 1).find(|&i| zero[i] && !cfg.initially_touching(i)) {
        report.pruned = Some(format!("pair {} closes its gap at positive speed, so its force at contact is positive", i + 1));
        return (report, None);
    }
    let positive: Vec<usize> = (0..n - 1).filter(|&i| pattern[i] && !zero[i] && !graze[i]).collect();
    let mut relations = proportionality_relations(cfg, &positive);
    for i in (0..n - 1).filter(|&i| zero[i]) {
        relations.push(zero_force_relation(cfg, i, zero));
    }
    let merged: Vec<bool> = (0..n - 1).map(|i| pattern[i] && !graze[i]).collect();
    let grazing: Vec<usize> = (0..n - 1).filter(|&i| graze[i]).collect();
    let a = match pattern_minimum(cfg, &merged, &grazing, &relations) {
        Some(a) => a,
        None => {
            report.pruned = Some("relations and grazing conditions are inconsistent".into());
            return (report, None);
        }
    };
    if a.iter().all(|x| x.abs() < 1e-12) && pattern.iter().any(|&p| p) {
        report.pruned = Some("relations force a_bar = 0".into());
        return (report, None);
    }
    let Some((cost, traj)) = evaluate(cfg, &a) else {
        report.pruned = Some("simulation failed".into());
        return (report, None);
    };
    if let Err(why) = validate(cfg, &traj, pattern, zero, graze, &relations, &a) {
        report.pruned = Some(why);
        return (report, None);
    }
    report.cost = Some(cost);
    let pattern = one_based(pattern);
    (report, Some(Candidate { a, cost, traj, pattern, relations }))
}

/// Enumerate final contact patterns and force sign branches, solve each
/// reduced quadratic, keep the cheapest candidate that its own simulation
/// confirms, then polish it by a local search on the exact cost.
pub fn solve_crowd(cfg: &CrowdConfig) -> Result<CrowdSolution> {
    cfg.validate()?;
    let n = cfg.n;
    let pairs = n - 1;
    if pairs > 9 {
        return Err(Error::Config("pattern enumeration supports at most 10 participants".into()));
    }
    let mut jobs = Vec::new();
    for mask in 0u32..(1 << pairs) {
        let pattern: Vec<bool> = (0..pairs).map(|i| mask >> i & 1 == 1).collect();
        let members: Vec<usize> = (0..pairs).filter(|&i| pattern[i]).collect();
        // each touching pair carries a positive force, a force vanishing
        // at contact, or touches only at the final time
        for code in 0..3usize.pow(members.len() as u32) {
            let mut zero = vec![false; pairs];
            let mut graze = vec![false; pairs];
            let mut c = code;
            for &i in &members {
                zero[i] = c % 3 == 1;
                graze[i] = c % 3 == 2;
                c /= 3;
            }
            jobs.push((pattern.clone(), zero, graze));
        }
    }
    let results: Vec<(BranchReport, Option<Candidate>)> =
        jobs.par_iter().map(|(p, z, g)| branch_candidate(cfg, p, z, g)).collect();
    let mut branches = Vec::with_capacity(results.len());
    let mut best: Option<Candidate> = None;
    for (rep, cand) in results {
        branches.push(rep);
        if let Some(c) = cand {
            if best.as_ref().is_none_or(|b| c.cost < b.cost - 1e-12 * (1.0 + b.cost.abs())) {
                best = Some(c);
            }
        }
    }
    let best = best.ok_or(Error::NoFeasiblePattern)?;
    let polished = refine(cfg, &best);
    Ok(CrowdSolution {
        refine_gain: best.cost - polished.cost,
        a_bar: polished.a,
        cost: polished.cost,
        trajectory: polished.traj,
        pattern: polished.pattern,
        relations: polished.relations,
        branches,
    })
}

/// The crowd model as a sweeping process with `C = {⟨e_i − e_{i+1}, y⟩ ≤ 0}`,
/// `f(x, a) = s ∘ a` and the constant shift `ū_i = α + 2R(i − 1)`.
pub fn embed(cfg: &CrowdConfig, alpha: f64) -> Result<SweepingProblem> {
    cfg.validate()?;
    let n = cfg.n;
    if n < 2 {
        return Err(Error::Config("embedding needs at least two participants".into()));
    }
    let gens = (0..n - 1)
        .map(|i| {
            let mut g = DVector::zeros(n);
            g[i] = 1.0;
            g[i + 1] = -1.0;
            g
        })
        .collect();
    let u = DVector::from_fn(n, |i, _| alpha + 2.0 * cfg.radius * i as f64);
    let mut ell = RunningCost::zero(n, n);
    ell.a_weight = 1.0;
    let p = SweepingProblem {
        n,
        d: n,
        horizon: cfg.horizon,
        x0: DVector::from_column_slice(&cfg.x0),
        polyhedron: Polyhedron::new(gens)?,
        r: u.norm(),
        tau: 0.0,
        f: Perturbation::DiagSpeeds(DVector::from_column_slice(&cfg.speeds)),
        phi: TerminalCost::new(1.0, DVector::zeros(n)),
        ell,
        u: UControl::Fixed(ControlPath::constant(u)),
        growth: None,
        terminal_on_boundary: false,
    };
    p.validate()?;
    Ok(p)
}

/// Default shift: ten times the largest position plus the chain length, so
/// the shifted disks stay far from every reachable state.
pub fn default_alpha(cfg: &CrowdConfig, traj: &CrowdTrajectory) -> f64 {
    let sup = traj
        .segments
        .iter()
        .flat_map(|s| {
            let dt = s.t1 - s.t0;
            s.x.iter().zip(&s.slopes).flat_map(move |(x, v)| [x.abs(), (x + dt * v).abs()])
        })
        .fold(0.0, f64::max);
    cfg.alpha.unwrap_or(10.0 * (sup + 2.0 * cfg.radius * cfg.n as f64))
}

/// Exact samples of the piecewise-linear motion on a uniform mesh.
pub fn sample(problem: &SweepingProblem, traj: &CrowdTrajectory, a_bar: &[f64], k: usize) -> DiscreteTrajectory {
    let u = problem.u.path().value.clone();
    let a = DVector::from_column_slice(a_bar);
    DiscreteTrajectory::sample(Mesh::new(k, problem.horizon), |t| DVector::from_vec(traj.at(t)), |_| u.clone(), |_| a.clone())
}

/// Dual certificate of a crowd solution with `λ = 1`: `q^x = ā/s` is
/// constant, `p^x` is fixed by transversality and the measure `γ` is a
/// single atom at `T` bridging the two.
pub fn crowd_certificate(problem: &SweepingProblem, traj: &DiscreteTrajectory) -> Result<ContinuousCertificate> {
    let n = problem.n;
    let k = traj.k();
    let Perturbation::DiagSpeeds(s) = &problem.f else {
        return Err(Error::Config("crowd certificate needs diagonal speeds".into()));
    };
    let a = &traj.a[0];
    let eta = eta_midpoint(problem, traj)?;
    let eta_t = eta_terminal(problem, traj, &eta[k - 1])?;
    let (w, v) = subgradients(problem, traj);
    let px = -problem.phi.gradient(&traj.x[k]) - problem.polyhedron.combine(&eta_t);
    let qx = a.component_div(s);
    let mut gamma_atoms = vec![DVector::zeros(n); k + 1];
    gamma_atoms[k] = &px - &qx;
    let mut cert = ContinuousCertificate {
        lambda: 1.0,
        mesh: traj.mesh,
        px: vec![px; k + 1],
        pu: vec![DVector::zeros(n); k + 1],
        pa: vec![DVector::zeros(n); k + 1],
        q: Vec::new(),
        eta,
        eta_terminal: eta_t,
        gamma_atoms,
        gamma_density: vec![DVector::zeros(n); k],
        xi_atoms: vec![0.0; k + 1],
        xi_density: vec![0.0; k],
        w,
        v,
        detected_atoms: Vec::new(),
    };
    cert.refresh_q(traj);
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::check_continuous;

    fn ex51() -> CrowdConfig {
        CrowdConfig::new(2, 3.0, 6.0, vec![6.0, 3.0], vec![-60.0, -48.0]).unwrap()
    }

    fn ex52() -> CrowdConfig {
        CrowdConfig::new(3, 3.0, 6.0, vec![6.0, 3.0, 2.0], vec![-60.0, -48.0, -42.0]).unwrap()
    }

    #[test]
    fn pava_pools_violators() {
        assert_eq!(pava(&[3.0, 1.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(pava(&[1.0, 3.0, 2.0]), vec![1.0, 2.5, 2.5]);
        assert_eq!(pava(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn two_participants_closed_form() {
        // the reduced cost m² + 9 + 3(a₁² + a₂²), m = −54 − 18a₁ − 9a₂,
        // is minimized at a₁ = 6m, a₂ = 3m
        let m = -54.0 / (1.0 + 18.0 * 6.0 + 9.0 * 3.0);
        let sol = solve_crowd(&ex51()).unwrap();
        assert!((sol.a_bar[1] - 3.0 * m).abs() < 1e-9, "{:?}", sol.a_bar);
        assert!((sol.a_bar[0] - 2.0 * sol.a_bar[1]).abs() < 1e-12);
        assert!((sol.cost - (m * m + 9.0 + 3.0 * 45.0 * m * m)).abs() < 1e-8);
        let t1 = sol.trajectory.contact_times[0].unwrap();
        assert!((t1 - 2.0 / (-3.0 * sol.a_bar[1])).abs() < 1e-12);
        assert_eq!(sol.pattern, vec![1]);
        let x = sol.trajectory.end();
        assert!((x[0] - (m - 3.0)).abs() < 1e-9 && (x[1] - (m + 3.0)).abs() < 1e-9);
    }

    #[test]
    fn three_participants_case_split() {
        let sol = solve_crowd(&ex52()).unwrap();
        let y = -7350.0 / 7276.5;
        let want = [3.0 * y, 1.5 * y, y];
        for i in 0..3 {
            assert!((sol.a_bar[i] - want[i]).abs() < 1e-9, "{:?}", sol.a_bar);
        }
        let t1 = sol.trajectory.contact_times[0].unwrap();
        assert!((t1 + 24.0 / (59.0 * y)).abs() < 1e-9);
        assert_eq!(sol.trajectory.contact_times[1], Some(0.0));
        let first = &sol.trajectory.segments[0];
        assert!((first.eta[1] + 1.25 * y).abs() < 1e-9);
        let last = sol.trajectory.segments.last().unwrap();
        assert!((last.eta[0] + 59.0 / 6.0 * y).abs() < 1e-9);
        assert!((last.eta[1] + 37.0 / 6.0 * y).abs() < 1e-9);
        let case2 = sol.branches.iter().find(|b| b.pattern == vec![1, 2] && b.zero_force == vec![2]).unwrap();
        assert!(case2.pruned.is_some());
    }

    #[test]
    fn contact_time_matches_events() {
        let cfg = ex52();
        let a = [-3.0, -1.5, -1.0];
        let tr = simulate_crowd(&cfg, &a).unwrap();
        for i in 0..2 {
            let t = contact_time(i, &cfg, &a, &tr.segments);
            match (t, tr.contact_times[i]) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
        let equal = CrowdConfig::new(2, 1.0, 5.0, vec![2.0, 2.0], vec![0.0, 5.0]).unwrap();
        let tr = simulate_crowd(&equal, &[-1.0, -1.0]).unwrap();
        assert_eq!(contact_time(0, &equal, &[-1.0, -1.0], &tr.segments), None);
    }

    #[test]
    fn velocity_matching_single_and_chain() {
        let cfg = ex52();
        let y = -1.0;
        let a = [3.0 * y, 1.5 * y, y];
        // pair 2 alone at t = 0: 2η₂ = s₃a₃ − s₂a₂
        let e2 = velocity_match(0.0, 0.0, 3.0, a[1], 2.0, a[2]);
        assert!((e2 + 1.25 * y).abs() < 1e-12);
        let both = velocity_match_chain(&cfg, &a, 0, 1);
        assert!((both[0] + 59.0 / 6.0 * y).abs() < 1e-12);
        assert!((both[1] + 37.0 / 6.0 * y).abs() < 1e-12);
        assert_eq!(velocity_match(0.0, 0.0, 1.0, 0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn proportionality_for_chains() {
        let r = proportionality_relations(&ex52(), &[0, 1]);
        assert_eq!(r[0].coefficients, vec![3.0, -6.0, 0.0]);
        assert_eq!(r[1].coefficients, vec![0.0, 2.0, -3.0]);
        let eq = CrowdConfig::new(2, 1.0, 1.0, vec![2.0, 2.0], vec![0.0, 5.0]).unwrap();
        assert_eq!(proportionality_relations(&eq, &[0])[0].coefficients, vec![2.0, -2.0]);
    }

    #[test]
    fn zero_controls_stay_put() {
        let tr = simulate_crowd(&ex52(), &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tr.end(), vec![-60.0, -48.0, -42.0]);
    }

    #[test]
    fn no_contact_reduces_to_decoupled_quadratic() {
        // min ½(x0 − Ts a)² + ½Ta² per participant
        let cfg = CrowdConfig::new(2, 0.5, 0.1, vec![1.0, 2.0], vec![-10.0, 10.0]).unwrap();
        let sol = solve_crowd(&cfg).unwrap();
        for i in 0..2 {
            let (s, x0, t) = (cfg.speeds[i], cfg.x0[i], cfg.horizon);
            let a = x0 * s / (t * s * s + 1.0);
            assert!((sol.a_bar[i] - a).abs() < 1e-10);
        }
        assert!(sol.pattern.is_empty());
        let single = CrowdConfig::new(1, 1.0, 2.0, vec![3.0], vec![-4.0]).unwrap();
        let sol = solve_crowd(&single).unwrap();
        assert!((sol.a_bar[0] - (-12.0 / 19.0)).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(CrowdConfig::new(2, 3.0, 6.0, vec![6.0, 3.0], vec![-60.0, -57.0]).is_err());
        assert!(CrowdConfig::new(2, 3.0, 6.0, vec![6.0, -3.0], vec![-60.0, -48.0]).is_err());
        assert!(CrowdConfig::new(2, 3.0, 0.0, vec![6.0, 3.0], vec![-60.0, -48.0]).is_err());
    }

    #[test]
    fn certificate_of_two_participant_optimum() {
        let cfg = ex51();
        let sol = solve_crowd(&cfg).unwrap();
        let p = embed(&cfg, default_alpha(&cfg, &sol.trajectory)).unwrap();
        let tr = sample(&p, &sol.trajectory, &sol.a_bar, 600);
        let cert = crowd_certificate(&p, &tr).unwrap();
        let rep = check_continuous(&p, &tr, &cert, 1e-6);
        assert!(rep.verdict, "{:?}", rep.entries.iter().filter(|e| !e.passed).collect::<Vec<_>>());
        let atom = &cert.gamma_atoms[600];
        assert!((atom[0] + 1.56).abs() < 0.02, "{atom}");
        assert!((atom[1] - 3.16).abs() < 0.02, "{atom}");
        let t1 = sol.trajectory.contact_times[0].unwrap();
        assert!(cert.gamma_mass(0.0, t1 - 0.01) <= 1e-8);
    }

    #[test]
    fn certificate_of_three_participant_optimum() {
        let cfg = ex52();
        let sol = solve_crowd(&cfg).unwrap();
        let p = embed(&cfg, default_alpha(&cfg, &sol.trajectory)).unwrap();
        let tr = sample(&p, &sol.trajectory, &sol.a_bar, 800);
        let cert = crowd_certificate(&p, &tr).unwrap();
        let rep = check_continuous(&p, &tr, &cert, 1e-6);
        assert!(rep.verdict, "{:?}", rep.entries.iter().filter(|e| !e.passed).collect::<Vec<_>>());
    }

    #[test]
    fn agrees_with_catching_up() {
        let cfg = ex52();
        let sol = solve_crowd(&cfg).unwrap();
        let p = embed(&cfg, default_alpha(&cfg, &sol.trajectory)).unwrap();
        let k = 10_000;
        let u = p.u.path().value.clone();
        let a = DVector::from_column_slice(&sol.a_bar);
        let num = crate::dynamics::catching_up(&p, |_| u.clone(), |_| a.clone(), k).unwrap();
        let vmax = sol.trajectory.segments.iter().flat_map(|s| s.slopes.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = 5.0 * cfg.horizon / k as f64 * vmax;
        for j in 0..=k {
            let exact = sol.trajectory.at(num.mesh.t(j));
            for i in 0..3 {
                assert!((num.x[j][i] - exact[i]).abs() <= bound);
            }
        }
    }
}
