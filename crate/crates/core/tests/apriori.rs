use moreau::cost::{RunningCost, TerminalCost};
use moreau::dynamics::{apriori_bounds, catching_up, ControlPath, Perturbation, SweepingProblem, UControl};
use moreau::geometry::{project, Polyhedron};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random affine perturbations with a moving `u(t) = u0 + t w`; the bound
/// then carries the `∫‖u̇‖ = T‖w‖` term as well.
#[test]
fn catching_up_respects_the_apriori_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut done = 0;
    while done < 50 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=n);
        let gens = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let Ok(c) = Polyhedron::new(gens) else { continue };
        let u0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let w = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = project(&DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)), &c, &u0).unwrap();
        let a_sup = rng.gen_range(0.1..2.0);
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).normalize() * a_sup;
        let p = SweepingProblem {
            n,
            d: n,
            horizon: rng.gen_range(0.2..1.5),
            x0,
            polyhedron: c,
            r: 1.0,
            tau: 0.0,
            f: Perturbation::Affine {
                a: DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5)),
                b: DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)),
                c: DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5)),
            },
            phi: TerminalCost::new(0.0, DVector::zeros(n)),
            ell: RunningCost::zero(n, n),
            u: UControl::Fixed(ControlPath { value: u0.clone(), slope: w.clone() }),
            growth: None,
            terminal_on_boundary: false,
        };
        let bound = apriori_bounds(&p, p.growth_for(a_sup), p.horizon * w.norm());
        let path = p.u.path().clone();
        let tr = catching_up(&p, |t| path.at(t), |_| a.clone(), 300).unwrap();
        let sup = tr.x.iter().map(|x| x.norm()).fold(0.0, f64::max);
        assert!(sup <= bound.l, "sup {sup} > l {}", bound.l);
        done += 1;
    }
}
