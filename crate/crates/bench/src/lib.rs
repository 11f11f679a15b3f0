//! Fixtures shared by the criterion benches.

use moreau::cost::{RunningCost, TerminalCost};
use moreau::crowd::CrowdConfig;
use moreau::dynamics::{ControlPath, Perturbation, SweepingProblem, UControl};
use moreau::geometry::Polyhedron;
use nalgebra::DVector;

pub fn crowd_three() -> CrowdConfig {
    CrowdConfig::new(3, 3.0, 6.0, vec![6.0, 3.0, 2.0], vec![-60.0, -48.0, -42.0]).expect("valid crowd")
}

/// A cone in `R^n` cut by `n` generators, the shift placed at the origin.
pub fn cone(n: usize) -> Polyhedron {
    let gens = (0..n)
        .map(|i| DVector::from_fn(n, |j, _| if j == i { 1.0 } else if j == (i + 1) % n { -0.3 } else { 0.0 }))
        .collect();
    Polyhedron::new(gens).expect("independent generators")
}

/// A wall problem in one dimension with a fixed shift.
pub fn wall() -> SweepingProblem {
    let mut ell = RunningCost::zero(1, 1);
    ell.a_weight = 1.0;
    SweepingProblem {
        n: 1,
        d: 1,
        horizon: 1.0,
        x0: DVector::from_element(1, 0.0),
        polyhedron: Polyhedron::new(vec![DVector::from_element(1, 1.0)]).expect("one generator"),
        r: 0.5,
        tau: 0.0,
        f: Perturbation::Identity,
        phi: TerminalCost::new(1.0, DVector::from_element(1, 1.0)),
        ell,
        u: UControl::Fixed(ControlPath::constant(DVector::from_element(1, 0.5))),
        growth: None,
        terminal_on_boundary: false,
    }
}
