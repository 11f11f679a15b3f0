//! Terminal and running costs. The running cost is separable:
//!
//! * `ℓ₁(t, x, a, ẋ) = ½wₓ‖x − x̂‖² + ½wₐ‖a + c₀ + c₁t‖² + ½w_ẋ‖ẋ‖²`
//! * `ℓ₂(u̇) = ½w_u̇‖u̇‖²`
//! * `ℓ₃(t, ȧ) = ½w_ȧ‖ȧ‖² + α Σᵢ |ȧᵢ + b₀ᵢ + b₁ᵢ t|`
//!
//! The absolute-value term is the only nonsmooth piece; everything that
//! needs a subgradient picks `sign(·)` with `sign(0) = 0`, and the checkers
//! ask for the full interval through [`RunningCost::adot_interval`].

use nalgebra::DVector;

/// Arguments below this are treated as sitting on a kink of `|·|`.
pub const KINK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub weight: f64,
    pub target: DVector<f64>,
}

impl TerminalCost {
    pub fn new(weight: f64, target: DVector<f64>) -> Self {
        TerminalCost { weight, target }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.weight * (x - &self.target).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.weight * (x - &self.target)
    }
}

/// Gradient blocks of the running cost at one node: `w` collects the
/// derivatives in `(x, u, a)`, `v` those in the velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPartials {
    pub wx: DVector<f64>,
    pub wu: DVector<f64>,
    pub wa: DVector<f64>,
    pub vx: DVector<f64>,
    pub vu: DVector<f64>,
    pub va: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningCost {
    pub x_weight: f64,
    pub x_target: DVector<f64>,
    pub a_weight: f64,
    pub a_shift: DVector<f64>,
    pub a_shift_rate: DVector<f64>,
    pub xdot_weight: f64,
    pub udot_weight: f64,
    pub adot_weight: f64,
    pub abs_weight: f64,
    pub abs_shift: DVector<f64>,
    pub abs_shift_rate: DVector<f64>,
}

impl RunningCost {
    /// All weights zero.
    pub fn zero(n: usize, d: usize) -> Self {
        RunningCost {
            x_weight: 0.0,
            x_target: DVector::zeros(n),
            a_weight: 0.0,
            a_shift: DVector::zeros(d),
            a_shift_rate: DVector::zeros(d),
            xdot_weight: 0.0,
            udot_weight: 0.0,
            adot_weight: 0.0,
            abs_weight: 0.0,
            abs_shift: DVector::zeros(d),
            abs_shift_rate: DVector::zeros(d),
        }
    }

    fn a_arg(&self, t: f64, a: &DVector<f64>) -> DVector<f64> {
        a + &self.a_shift + t * &self.a_shift_rate
    }

    fn abs_arg(&self, t: f64, ad: &DVector<f64>) -> DVector<f64> {
        ad + &self.abs_shift + t * &self.abs_shift_rate
    }

    /// True when `ℓ₃` is identically zero, so the last control node has no
    /// influence on the cost.
    pub fn ignores_adot(&self) -> bool {
        self.adot_weight == 0.0 && self.abs_weight == 0.0
    }

    pub fn ignores_udot(&self) -> bool {
        self.udot_weight == 0.0
    }

    #[allow(clippy::too_many_arguments)]
    pub fn value(
        &self,
        t: f64,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        a: &DVector<f64>,
        xd: &DVector<f64>,
        ud: &DVector<f64>,
        ad: &DVector<f64>,
    ) -> f64 {
        let mut v = 0.0;
        if self.x_weight != 0.0 {
            v += 0.5 * self.x_weight * (x - &self.x_target).norm_squared();
        }
        if self.a_weight != 0.0 {
            v += 0.5 * self.a_weight * self.a_arg(t, a).norm_squared();
        }
        v += 0.5 * self.xdot_weight * xd.norm_squared();
        v += 0.5 * self.udot_weight * ud.norm_squared();
        v += 0.5 * self.adot_weight * ad.norm_squared();
        if self.abs_weight != 0.0 {
            v += self.abs_weight * self.abs_arg(t, ad).iter().map(|z| z.abs()).sum::<f64>();
        }
        v
    }

    #[allow(clippy::too_many_arguments)]
    pub fn partials(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        a: &DVector<f64>,
        xd: &DVector<f64>,
        ud: &DVector<f64>,
        ad: &DVector<f64>,
    ) -> CostPartials {
        let sgn = self.abs_arg(t, ad).map(|z| if z > 0.0 { 1.0 } else if z < 0.0 { -1.0 } else { 0.0 });
        CostPartials {
            wx: self.x_weight * (x - &self.x_target),
            wu: DVector::zeros(u.len()),
            wa: self.a_weight * self.a_arg(t, a),
            vx: self.xdot_weight * xd,
            vu: self.udot_weight * ud,
            va: self.adot_weight * ad + self.abs_weight * sgn,
        }
    }

    /// Componentwise subdifferential of `ℓ₃` in `ȧ` as closed intervals.
    pub fn adot_interval(&self, t: f64, ad: &DVector<f64>) -> Vec<(f64, f64)> {
        let arg = self.abs_arg(t, ad);
        (0..ad.len())
            .map(|i| {
                let base = self.adot_weight * ad[i];
                let al = self.abs_weight;
                if al == 0.0 {
                    (base, base)
                } else if arg[i] > KINK_TOL {
                    (base + al, base + al)
                } else if arg[i] < -KINK_TOL {
                    (base - al, base - al)
                } else {
                    (base - al, base + al)
                }
            })
            .collect()
    }
}

/// Distance of a scalar to an interval.
pub fn dist_to_interval(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn shifted_control_term() {
        // ½·2·(a + 2t)² at a = −2t vanishes
        let mut l = RunningCost::zero(1, 1);
        l.a_weight = 2.0;
        l.a_shift_rate = v(&[2.0]);
        let z = v(&[0.0]);
        assert_eq!(l.value(0.3, &z, &z, &v(&[-0.6]), &z, &z, &z), 0.0);
        assert!((l.value(0.5, &z, &z, &v(&[0.0]), &z, &z, &z) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kink_interval() {
        let mut l = RunningCost::zero(1, 1);
        l.abs_weight = 0.5;
        l.abs_shift = v(&[-1.0]);
        l.abs_shift_rate = v(&[4.0]);
        // at t = 1/4 and ȧ = 0 the argument vanishes
        assert_eq!(l.adot_interval(0.25, &v(&[0.0])), vec![(-0.5, 0.5)]);
        assert_eq!(l.adot_interval(0.5, &v(&[0.0])), vec![(0.5, 0.5)]);
        assert!(dist_to_interval(0.7, -0.5, 0.5) > 0.19);
    }
}
