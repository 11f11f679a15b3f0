use moreau::crowd::{simulate_crowd, solve_crowd, CrowdConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cost(cfg: &CrowdConfig, a: &[f64]) -> f64 {
    let tr = simulate_crowd(cfg, a).unwrap();
    cfg.cost(&tr.end(), a)
}

/// Grid scan followed by a pattern search from the best few grid points.
/// Random directions join the axes so the search can follow the kinks
/// where the contact set changes.
fn brute_force(cfg: &CrowdConfig, lo: f64, hi: f64, step: f64) -> (Vec<f64>, f64) {
    let n = cfg.n;
    let m = ((hi - lo) / step).round() as usize + 1;
    let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let a: Vec<f64> = idx.iter().map(|&i| lo + step * i as f64).collect();
        pts.push((cost(cfg, &a), a));
        let mut d = 0;
        while d < n {
            idx[d] += 1;
            if idx[d] < m {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == n {
            break;
        }
    }
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut best = (f64::INFINITY, vec![]);
    for (c0, a0) in pts.into_iter().take(5) {
        let (mut c, mut a) = (c0, a0);
        let mut h = step;
        while h > 1e-9 {
            let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
            for _ in 0..8 * n {
                let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                dirs.push(d.iter().map(|x| x / norm).collect());
            }
            let mut moved = false;
            for d in &dirs {
                for s in [h, -h] {
                    let t: Vec<f64> = a.iter().zip(d).map(|(x, y)| x + s * y).collect();
                    let ct = cost(cfg, &t);
                    if ct < c {
                        c = ct;
                        a = t;
                        moved = true;
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        if c < best.0 {
            best = (c, a);
        }
    }
    (best.1, best.0)
}

#[test]
fn enumeration_matches_search_on_worked_examples() {
    let two = CrowdConfig::new(2, 3.0, 6.0, vec![6.0, 3.0], vec![-60.0, -48.0]).unwrap();
    let three = CrowdConfig::new(3, 3.0, 6.0, vec![6.0, 3.0, 2.0], vec![-60.0, -48.0, -42.0]).unwrap();
    for cfg in [two, three] {
        let sol = solve_crowd(&cfg).unwrap();
        let (a, c) = brute_force(&cfg, -6.0, 1.0, 0.25);
        assert!(sol.cost <= c + 1e-9, "enumeration {} vs search {}", sol.cost, c);
        assert!((sol.cost - c).abs() < 1e-6);
        for i in 0..cfg.n {
            assert!((sol.a_bar[i] - a[i]).abs() < 1e-3, "{:?} vs {:?}", sol.a_bar, a);
        }
    }
}

#[test]
fn enumeration_is_never_beaten_on_random_crowds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..60 {
        let n = 2 + trial % 2;
        let r = rng.gen_range(0.5..2.0);
        let mut x0 = vec![rng.gen_range(-30.0..-10.0)];
        for i in 1..n {
            // about a third of the pairs start in contact
            let gap = if rng.gen_bool(0.3) { 2.0 * r } else { 2.0 * r + rng.gen_range(0.5..8.0) };
            x0.push(x0[i - 1] + gap);
        }
        let speeds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let t = rng.gen_range(1.0..5.0);
        let cfg = CrowdConfig::new(n, r, t, speeds, x0).unwrap();
        let sol = solve_crowd(&cfg).unwrap_or_else(|e| panic!("{e:?} {cfg:?}"));
        let (_, c) = brute_force(&cfg, -12.0, 2.0, if n == 2 { 0.25 } else { 0.5 });
        assert!(sol.cost <= c + 1e-6 * (1.0 + c), "trial {trial}: {} vs {} for {:?}", sol.cost, c, cfg);
        assert!(c - sol.cost <= 1e-3, "trial {trial}: search {c} far above {}", sol.cost);
    }
}
