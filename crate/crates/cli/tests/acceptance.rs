//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use moreau::certificates::{build_discrete_certificate, check_continuous, check_discrete, limit_certificate, synthesize_continuous};
use moreau::config::ProblemConfig;
use moreau::crowd::{self, simulate_crowd, solve_crowd, CrowdConfig};
use moreau::dynamics::{apriori_bounds, catching_up, ControlPath, DiscreteTrajectory, Perturbation, SweepingProblem, UControl};
use moreau::geometry::{project, Polyhedron};
use moreau::optimizer::{solve_discrete, DiscreteSolution, SolveOptions, SolveStatus};
use moreau::transcription::{assemble_cost, DecisionVector, DiscreteProblem};
use moreau::{cost::RunningCost, cost::TerminalCost};
use moreau_cli::table::read_trajectory;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sweeping(name: &str) -> SweepingProblem {
    match ProblemConfig::load(&configs().join(name)).unwrap() {
        ProblemConfig::Sweeping(s) => s.build().unwrap(),
        ProblemConfig::Crowd(_) => panic!("{name} is a crowd config"),
    }
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(v: f64, lo: f64, hi: f64, what: &str) -> Result<(), String> {
    ensure(v >= lo && v <= hi, format!("{what} = {v} outside [{lo}, {hi}]"))
}

fn solve(p: &SweepingProblem, k: usize, multistart: usize) -> Result<(DiscreteProblem, DiscreteSolution), String> {
    let dp = DiscreteProblem::new(p.clone(), k).map_err(|e| e.to_string())?;
    let sol = solve_discrete(&dp, &SolveOptions { multistart, ..Default::default() }).map_err(|e| e.to_string())?;
    Ok((dp, sol))
}

fn run_crowd_cli(name: &str) -> Result<(Value, Duration), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("solution.json");
    let start = Instant::now();
    let code = moreau_cli::cmd_crowd(&configs().join(name), &out, 600, 1e-6, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(code == 0, format!("exit code {code}"))?;
    let v = serde_json::from_str(&std::fs::read_to_string(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok((v, took))
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn crowd_two() -> Outcome {
    let (s, took) = run_crowd_cli("crowd_two.json")?;
    let (a1, a2) = (f(&s["a_bar"][0]), f(&s["a_bar"][1]));
    within(a2, -1.1922, -1.1902, "a_2")?;
    ensure(a1 == 2.0 * a2, format!("a_1 = {a1} is not 2 a_2 = {}", 2.0 * a2))?;
    let t1 = f(&s["contact_times"][0]);
    within(t1, 0.5587, 0.5607, "t_1")?;
    ensure(took < Duration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!("a = ({a1:.5}, {a2:.5}), t1 = {t1:.4}, {took:.2?}"))
}

fn crowd_three() -> Outcome {
    let (s, took) = run_crowd_cli("crowd_three.json")?;
    let want = [-3.03, -1.52, -1.01];
    for (i, w) in want.iter().enumerate() {
        within(f(&s["a_bar"][i]), w - 0.01, w + 0.01, &format!("a_{}", i + 1))?;
    }
    let t1 = f(&s["contact_times"][0]);
    within(t1, 0.402, 0.404, "t_1")?;
    let segs = s["segments"].as_array().ok_or("no segments")?;
    let first = &segs[0]["slopes"];
    for (i, w) in [18.18, 3.28, 3.28].iter().enumerate() {
        within(f(&first[i]), w - 0.01, w + 0.01, &format!("pre-contact slope {}", i + 1))?;
    }
    let last = &segs[segs.len() - 1]["slopes"];
    for i in 0..3 {
        within(f(&last[i]), 8.24, 8.26, &format!("post-contact slope {}", i + 1))?;
    }
    // zero force on pair 2 at t = 0 while pair 1 makes contact before T
    let zero2: Vec<&Value> = s["branches"]
        .as_array()
        .ok_or("no branches")?
        .iter()
        .filter(|b| b["zero_force"].as_array().is_some_and(|z| z.iter().any(|p| p == 2)))
        .filter(|b| b["grazing"].as_array().is_some_and(|g| g.is_empty()))
        .collect();
    ensure(!zero2.is_empty() && zero2.iter().all(|b| !b["pruned"].is_null()), "zero initial force branch on pair 2 not pruned")?;
    ensure(took < Duration::from_secs(5), format!("took {took:?}"))?;
    Ok(format!(
        "a = ({:.4}, {:.4}, {:.4}), t1 = {t1:.4}, {} zero-force branches pruned, {took:.2?}",
        f(&s["a_bar"][0]),
        f(&s["a_bar"][1]),
        f(&s["a_bar"][2]),
        zero2.len()
    ))
}

fn measure_reconstruction() -> Outcome {
    // closed form of the two-participant optimum: a = (6m, 3m), contact
    // block centre m at T, pair force (U1 − U2)/2 once in contact
    let m = -54.0 / 136.0;
    let a = [6.0 * m, 3.0 * m];
    let s = [6.0, 3.0];
    let x_t = [m - 3.0, m + 3.0];
    let eta_t = (-s[0] * a[0] + s[1] * a[1]) / 2.0;
    let px = [-x_t[0] - eta_t, -x_t[1] + eta_t];
    let oracle = [px[0] - a[0] / s[0], px[1] - a[1] / s[1]];

    let cfg = CrowdConfig::new(2, 3.0, 6.0, s.to_vec(), vec![-60.0, -48.0]).map_err(|e| e.to_string())?;
    let sol = solve_crowd(&cfg).map_err(|e| e.to_string())?;
    let k = 600;
    let p = crowd::embed(&cfg, crowd::default_alpha(&cfg, &sol.trajectory)).map_err(|e| e.to_string())?;
    let tr = crowd::sample(&p, &sol.trajectory, &sol.a_bar, k);
    let cert = crowd::crowd_certificate(&p, &tr).map_err(|e| e.to_string())?;
    let t1 = sol.trajectory.contact_times[0].ok_or("no contact")?;
    let g = cert.gamma_tail_at(t1);
    within(g[0], -1.56 - 0.02, -1.56 + 0.02, "gamma_1([t1, T])")?;
    within(g[1], oracle[1] - 0.02, oracle[1] + 0.02, "gamma_2([t1, T])")?;
    within(oracle[1], 3.15, 3.16, "oracle gamma_2")?;
    let early = cert.gamma_mass(0.0, t1 - 0.01);
    ensure(early <= 1e-8, format!("gamma mass {early:e} before contact"))?;
    let rep = check_continuous(&p, &tr, &cert, 1e-6);
    ensure(rep.verdict, format!("certificate fails {:?}", rep.failing()))?;
    Ok(format!(
        "gamma([t1, T]) = ({:.4}, {:.4}), oracle ({:.4}, {:.4}); published second component 3.76 differs by {:.3}, recorded",
        g[0],
        g[1],
        oracle[0],
        oracle[1],
        3.76 - g[1]
    ))
}

fn wall_end_to_end() -> Outcome {
    let p = sweeping("wall_fixed_u.json");
    let mut levels = Vec::new();
    for k in [100, 200] {
        let (dp, sol) = solve(&p, k, 4)?;
        let cert = build_discrete_certificate(&dp, &sol, 1e-6).map_err(|e| e.to_string())?;
        levels.push((sol, cert));
    }
    let sol = &levels[1].0;
    let a_err = sol.traj.a.iter().map(|a| (a[0] + 0.5).abs()).fold(0.0, f64::max);
    ensure(a_err <= 0.01, format!("max |a + 1/2| = {a_err}"))?;
    let x_err = (0..=200).map(|j| (sol.traj.x[j][0] - sol.traj.mesh.t(j) / 2.0).abs()).fold(0.0, f64::max);
    ensure(x_err <= 0.01, format!("max |x - t/2| = {x_err}"))?;
    within(sol.cost, 0.245, 0.255, "cost")?;
    let seq: Vec<(DiscreteTrajectory, _)> = levels.iter().map(|(s, c)| (s.traj.clone(), c.clone())).collect();
    let cert = limit_certificate(&p, &seq, 1e-6).map_err(|e| e.to_string())?;
    let rep = check_continuous(&p, &sol.traj, &cert, 1e-6);
    ensure(rep.verdict, format!("certificate fails {:?}", rep.failing()))?;
    Ok(format!("cost {:.6}, max |a + 1/2| {a_err:.1e}, max |x - t/2| {x_err:.1e}, certificate passes", sol.cost))
}

fn candidate(name: &str) -> Result<(SweepingProblem, DiscreteTrajectory), String> {
    let p = sweeping(&format!("{name}.json"));
    let tr = read_trajectory(&configs().join(format!("{name}.csv")), p.n, p.d, p.m(), p.horizon).map_err(|e| e.to_string())?;
    Ok((p, tr))
}

fn dichotomy() -> Outcome {
    let (good, tr) = candidate("quadratic_candidate_r1")?;
    let cert = synthesize_continuous(&good, &tr, 1e-8).map_err(|e| e.to_string())?;
    let rep = check_continuous(&good, &tr, &cert, 1e-8);
    ensure(rep.verdict, format!("r = 1 rejected: {:?}", rep.failing()))?;
    let lambda = rep.lambda;
    let (bad, tr) = candidate("quadratic_candidate_r2")?;
    let cert = synthesize_continuous(&bad, &tr, 1e-8).map_err(|e| e.to_string())?;
    let rep = check_continuous(&bad, &tr, &cert, 1e-8);
    ensure(!rep.verdict, "r = 2 accepted")?;
    let failing = rep.failing();
    ensure(failing.contains(&"nontriviality"), format!("r = 2 fails {failing:?} but not nontriviality"))?;
    Ok(format!("r = 1 accepted with lambda {lambda:.3}; r = 2 rejected by {failing:?}"))
}

fn corner() -> Outcome {
    let p = sweeping("corner_2d.json");
    let (_, sol) = solve(&p, 200, 8)?;
    within(sol.cost, 0.99, 1.01, "cost")?;
    let err = |target: &dyn Fn(f64) -> [f64; 2]| {
        (0..=200)
            .map(|j| {
                let t = sol.traj.mesh.t(j);
                let w = target(t);
                (sol.traj.x[j][0] - w[0]).abs().max((sol.traj.x[j][1] - w[1]).abs())
            })
            .fold(0.0, f64::max)
    };
    let e1 = err(&|t| [t, -1.0]);
    let e2 = err(&|t| [0.0, t - 1.0]);
    ensure(e1.min(e2) <= 0.02, format!("node errors {e1} and {e2} against the two solutions"))?;
    let which = if e1 <= e2 { "(t, -1)" } else { "(0, t - 1)" };
    Ok(format!("cost {:.5}, matches {which} with max node error {:.1e}", sol.cost, e1.min(e2)))
}

fn random_polyhedron(rng: &mut ChaCha8Rng, n: usize) -> Option<Polyhedron> {
    let m = rng.gen_range(1..=n);
    let gens = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
    Polyhedron::new(gens).ok()
}

fn property_geometry(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut count = 0;
    while count < 200 {
        let n = rng.gen_range(1..=4);
        let Some(c) = random_polyhedron(rng, n) else { continue };
        let shift = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let z = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let p = project(&z, &c, &shift).map_err(|e| e.to_string())?;
        let again = project(&p, &c, &shift).map_err(|e| e.to_string())?;
        ensure((&again - &p).amax() <= 1e-10 * (1.0 + p.amax()), "projection is not idempotent")?;
        ensure(c.values(&(&p - &shift)).max() <= 1e-9 * (1.0 + z.amax()), "projection is infeasible")?;
        for _ in 0..5 {
            let y = project(&DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0)), &c, &shift).map_err(|e| e.to_string())?;
            let vi = (&z - &p).dot(&(&y - &p));
            ensure(vi <= 1e-9 * (1.0 + z.norm_squared()), format!("variational inequality violated by {vi:e}"))?;
        }
        count += 1;
    }
    Ok(count)
}

fn property_gradient(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut p = sweeping("corner_2d.json");
    p.f = Perturbation::Affine {
        a: DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, 0.0]),
        b: DMatrix::identity(2, 2),
        c: DVector::from_row_slice(&[0.05, 0.0]),
    };
    p.phi = TerminalCost::new(1.5, DVector::from_row_slice(&[1.0, 0.0]));
    p.ell.x_weight = 0.3;
    p.ell.udot_weight = 0.6;
    p.ell.adot_weight = 0.2;
    p.ell.abs_weight = 0.1;
    p.ell.abs_shift = DVector::from_row_slice(&[0.3, -0.2]);
    p.terminal_on_boundary = false;
    let dp = DiscreteProblem::new(p, 5).map_err(|e| e.to_string())?;
    let k = dp.k();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut rv = |n: usize| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let z = DecisionVector {
            x: (0..=k).map(|j| if j == 0 { dp.problem.x0.clone() } else { rv(2) }).collect(),
            u: (0..=k).map(|_| rv(2)).collect(),
            a: (0..=k).map(|_| rv(2)).collect(),
        };
        let (_, g) = assemble_cost(&dp, &z);
        let pinned = dp.pinned();
        let flat = z.flatten(pinned);
        let gflat = DecisionVector { x: g.x, u: g.u, a: g.a }.flatten(pinned);
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut zp = flat.clone();
            zp[i] += h;
            let mut zm = flat.clone();
            zm[i] -= h;
            let fp = assemble_cost(&dp, &DecisionVector::unflatten(&zp, &z, pinned).map_err(|e| e.to_string())?).0;
            let fm = assemble_cost(&dp, &DecisionVector::unflatten(&zm, &z, pinned).map_err(|e| e.to_string())?).0;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - gflat[i]).abs() / (1.0 + fd.abs()));
        }
    }
    ensure(worst <= 1e-5, format!("gradient relative error {worst:e}"))?;
    Ok(worst)
}

/// Random affine problems with a bounded constant control; `u` is fixed,
/// so the bound reduces to `‖x0‖ + e^{2MT} 2MT (1 + ‖x0‖)`.
fn property_apriori(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut done = 0;
    let mut tightest: f64 = 0.0;
    while done < 50 {
        let n = rng.gen_range(1..=3);
        let Some(c) = random_polyhedron(rng, n) else { continue };
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = project(&DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)), &c, &u).map_err(|e| e.to_string())?;
        let a_sup = rng.gen_range(0.1..2.0);
        let a_dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = a_dir.normalize() * a_sup;
        let f = Perturbation::Affine {
            a: DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5)),
            b: DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)),
            c: DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5)),
        };
        let p = SweepingProblem {
            n,
            d: n,
            horizon: rng.gen_range(0.2..1.5),
            x0,
            polyhedron: c,
            r: u.norm().max(1e-3),
            tau: 0.0,
            f,
            phi: TerminalCost::new(0.0, DVector::zeros(n)),
            ell: RunningCost::zero(n, n),
            u: UControl::Fixed(ControlPath::constant(u.clone())),
            growth: None,
            terminal_on_boundary: false,
        };
        if p.validate().is_err() {
            continue;
        }
        let bound = apriori_bounds(&p, p.growth_for(a_sup), 0.0);
        let tr = catching_up(&p, |_| u.clone(), |_| a.clone(), 200).map_err(|e| e.to_string())?;
        let sup = tr.x.iter().map(|x| x.norm()).fold(0.0, f64::max);
        ensure(sup <= bound.l, format!("sup |x| = {sup} exceeds l = {}", bound.l))?;
        tightest = tightest.max(sup / bound.l);
        done += 1;
    }
    Ok(tightest)
}

fn crowd_search(cfg: &CrowdConfig, lo: f64, hi: f64, step: f64) -> f64 {
    let n = cfg.n;
    let cost = |a: &[f64]| {
        let tr = simulate_crowd(cfg, a).unwrap();
        cfg.cost(&tr.end(), a)
    };
    let m = ((hi - lo) / step).round() as usize + 1;
    let mut pts: Vec<(f64, Vec<f64>)> = (0..m.pow(n as u32))
        .map(|mut code| {
            let a: Vec<f64> = (0..n)
                .map(|_| {
                    let i = code % m;
                    code /= m;
                    lo + step * i as f64
                })
                .collect();
            (cost(&a), a)
        })
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    // pattern search with random directions on top of the axes, which
    // keeps moving along the kinks where contacts switch
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut best = f64::INFINITY;
    for (c0, a0) in pts.into_iter().take(4) {
        let (mut c, mut a, mut h) = (c0, a0, step);
        while h > 1e-9 {
            let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            for _ in 0..8 * n {
                let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                dirs.push(d.iter().map(|x| x / norm).collect());
            }
            let mut moved = false;
            for d in &dirs {
                for s in [h, -h] {
                    let t: Vec<f64> = a.iter().zip(d).map(|(x, y)| x + s * y).collect();
                    let ct = cost(&t);
                    if ct < c {
                        (c, a, moved) = (ct, t, true);
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        best = best.min(c);
    }
    best
}

fn property_crowd(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let n = 2 + trial % 2;
        let r = rng.gen_range(0.5..2.0);
        let mut x0 = vec![rng.gen_range(-30.0..-10.0)];
        for i in 1..n {
            let gap = if rng.gen_bool(0.3) { 2.0 * r } else { 2.0 * r + rng.gen_range(0.5..8.0) };
            x0.push(x0[i - 1] + gap);
        }
        let speeds = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let cfg = CrowdConfig::new(n, r, rng.gen_range(1.0..5.0), speeds, x0).map_err(|e| e.to_string())?;
        let sol = solve_crowd(&cfg).map_err(|e| e.to_string())?;
        let brute = crowd_search(&cfg, -12.0, 2.0, if n == 2 { 0.25 } else { 0.5 });
        ensure(sol.cost <= brute + 1e-9 * (1.0 + brute), format!("enumeration {} beaten by search {brute}", sol.cost))?;
        ensure(sol.cost - brute >= -1e-3, format!("enumeration {} far below search {brute}", sol.cost))?;
        worst = worst.max((sol.cost - brute).abs());
    }
    Ok(worst)
}

fn property_round_trip() -> Result<usize, String> {
    let mut checked = 0;
    for (name, ks) in [("wall_fixed_u.json", vec![50, 100]), ("corner_2d.json", vec![50])] {
        let p = sweeping(name);
        for k in ks {
            let (dp, sol) = solve(&p, k, 4)?;
            if sol.status != SolveStatus::Converged {
                continue;
            }
            let cert = build_discrete_certificate(&dp, &sol, 1e-6).map_err(|e| format!("{name} k = {k}: {e}"))?;
            let rep = check_discrete(&dp, &sol.traj, &cert, 1e-6);
            ensure(rep.verdict, format!("{name} k = {k}: certificate fails {:?}", rep.failing()))?;
            checked += 1;
        }
    }
    ensure(checked > 0, "no converged solve")?;
    Ok(checked)
}

fn properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let g = property_geometry(&mut rng)?;
    let fd = property_gradient(&mut rng)?;
    let ap = property_apriori(&mut rng)?;
    let cr = property_crowd(&mut rng)?;
    let rt = property_round_trip()?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!(
        "{g} projections, gradient error {fd:.1e}, a-priori ratio {ap:.3} on 50 problems, crowd gap {cr:.1e}, {rt} certificates, {took:.1?}"
    ))
}

fn convergence() -> Outcome {
    let p = sweeping("wall_fixed_u.json");
    let mut errs = Vec::new();
    for k in [50, 100, 200, 400] {
        let (_, sol) = solve(&p, k, 2)?;
        let h = sol.traj.mesh.h();
        let e = ((0..k).map(|j| (sol.traj.xdot(j)[0] - 0.5).powi(2)).sum::<f64>() * h).sqrt();
        errs.push(e);
    }
    for w in errs.windows(2) {
        ensure(w[1] <= w[0] + 1e-6, format!("errors not decreasing: {errs:?}"))?;
    }
    Ok(format!("velocity errors {:?}", errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("crowd with two participants", crowd_two),
        ("crowd with three participants", crowd_three),
        ("measure reconstruction", measure_reconstruction),
        ("wall problem end to end", wall_end_to_end),
        ("candidate dichotomy", dichotomy),
        ("corner problem", corner),
        ("property suite", properties),
        ("convergence trend", convergence),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
