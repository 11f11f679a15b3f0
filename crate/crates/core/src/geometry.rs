//! Polyhedral cones `C = {x : ⟨x*_i, x⟩ ≤ 0}` and the normal-cone calculus
//! the rest of the crate leans on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Singular value cutoff for independence tests.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Multipliers above this count as strictly positive.
pub const STRICT_MULTIPLIER: f64 = 1e-8;

/// The default activity tolerance `1e-8 (1 + ‖x‖)`.
pub fn default_tol(x: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + x.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    /// One generator per row.
    gens: DMatrix<f64>,
    gram: Vec<f64>,
}

impl Polyhedron {
    pub fn new(generators: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = generators.first() else {
            return Err(Error::DimensionMismatch("polyhedron needs at least one generator".into()));
        };
        let n = first.len();
        if n == 0 || generators.iter().any(|g| g.len() != n) {
            return Err(Error::DimensionMismatch("generators must share a positive dimension".into()));
        }
        if generators.iter().any(|g| g.norm() == 0.0 || !g.iter().all(|v| v.is_finite())) {
            return Err(Error::DimensionMismatch("generators must be finite and nonzero".into()));
        }
        let m = generators.len();
        let gens = DMatrix::from_fn(m, n, |i, j| generators[i][j]);
        Ok(Self::from_matrix(gens))
    }

    fn from_matrix(gens: DMatrix<f64>) -> Self {
        let h = &gens * gens.transpose();
        let m = gens.nrows();
        let gram = (0..m * m).map(|k| h[(k / m, k % m)]).collect();
        Polyhedron { gens, gram }
    }

    pub fn dim(&self) -> usize {
        self.gens.ncols()
    }

    pub fn len(&self) -> usize {
        self.gens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gens.nrows() == 0
    }

    pub fn generator(&self, i: usize) -> DVector<f64> {
        self.gens.row(i).transpose()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gens
    }

    /// `⟨x*_i, x⟩` for every generator.
    pub fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gens * x
    }

    /// `Σ_i w_i x*_i`.
    pub fn combine(&self, w: &DVector<f64>) -> DVector<f64> {
        self.gens.tr_mul(w)
    }

    /// Sum over a sparse list of multipliers.
    pub fn combine_sparse(&self, w: &[(usize, f64)]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for &(i, l) in w {
            out += l * self.gens.row(i).transpose();
        }
        out
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.values(x).iter().all(|&v| v <= tol)
    }

    /// True when the listed generators are linearly independent.
    pub fn independent(&self, idx: &[usize]) -> bool {
        if idx.is_empty() {
            return true;
        }
        let sub = self.gens.select_rows(idx);
        linalg::rank(&sub, RANK_CUTOFF) == idx.len()
    }
}

/// Indices with `|⟨x*_i, x⟩| ≤ tol`. Fails if `x` leaves `C` by more than `tol`.
pub fn active_set(x: &DVector<f64>, c: &Polyhedron, tol: f64) -> Result<Vec<usize>> {
    check_dim(x, c)?;
    let vals = c.values(x);
    let mut out = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        if v > tol {
            return Err(Error::InfeasiblePoint { index: i, violation: v });
        }
        if v >= -tol {
            out.push(i);
        }
    }
    Ok(out)
}

/// Split an active set by the sign of `⟨x*_i, v⟩`: the first list holds the
/// indices where it vanishes (within `tol`), the second those where it is
/// positive.
pub fn featured_sets(v: &DVector<f64>, active: &[usize], c: &Polyhedron, tol: f64) -> (Vec<usize>, Vec<usize>) {
    let vals = c.values(v);
    let mut zero = Vec::new();
    let mut pos = Vec::new();
    for &i in active {
        if vals[i].abs() <= tol {
            zero.push(i);
        } else if vals[i] > tol {
            pos.push(i);
        }
    }
    (zero, pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeDecomposition {
    /// `(index, λ_i)` over the active set, `λ_i ≥ 0`.
    pub multipliers: Vec<(usize, f64)>,
    pub residual: f64,
}

impl ConeDecomposition {
    pub fn get(&self, i: usize) -> f64 {
        self.multipliers.iter().find(|(k, _)| *k == i).map_or(0.0, |(_, l)| *l)
    }

    pub fn dense(&self, m: usize) -> DVector<f64> {
        let mut out = DVector::zeros(m);
        for &(i, l) in &self.multipliers {
            out[i] = l;
        }
        out
    }
}

/// Nonnegative fit of `v` by the given generators.
pub fn fit_cone(v: &DVector<f64>, idx: &[usize], c: &Polyhedron) -> Result<ConeDecomposition> {
    if idx.is_empty() {
        return Ok(ConeDecomposition { multipliers: vec![], residual: v.norm() });
    }
    let a = c.gens.select_rows(idx).transpose();
    let lam = linalg::nnls(&a, v, 100 * idx.len().max(1))?;
    let residual = (&a * &lam - v).norm();
    Ok(ConeDecomposition {
        multipliers: idx.iter().zip(lam.iter()).map(|(&i, &l)| (i, l)).collect(),
        residual,
    })
}

/// Write `v ∈ N(x; C)` as `Σ λ_i x*_i` over the active set at `x`.
pub fn decompose_normal(v: &DVector<f64>, x: &DVector<f64>, c: &Polyhedron, tol: f64) -> Result<ConeDecomposition> {
    check_dim(v, c)?;
    let active = active_set(x, c, tol)?;
    let dec = fit_cone(v, &active, c)?;
    if dec.residual > tol * (1.0 + v.norm()) {
        return Err(Error::NotInCone { residual: dec.residual });
    }
    Ok(dec)
}

/// Euclidean projection onto `shift + C`, returning the multipliers of the
/// dual problem as well: `z − P(z) = Σ λ_i x*_i`.
pub fn project_with_multipliers(z: &DVector<f64>, c: &Polyhedron, shift: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>)> {
    check_dim(z, c)?;
    check_dim(shift, c)?;
    let y = z - shift;
    let cy = c.values(&y);
    let m = c.len();
    if cy.iter().all(|&v| v <= 0.0) {
        return Ok((z.clone(), vec![0.0; m]));
    }
    let lam = linalg::nnqp(&c.gram, cy.as_slice(), 100 * m)?;
    let mut out = z.clone();
    for (i, &l) in lam.iter().enumerate() {
        if l != 0.0 {
            out -= l * c.gens.row(i).transpose();
        }
    }
    Ok((out, lam))
}

pub fn project(z: &DVector<f64>, c: &Polyhedron, shift: &DVector<f64>) -> Result<DVector<f64>> {
    project_with_multipliers(z, c, shift).map(|(p, _)| p)
}

/// Generators describing `D*N(x; C)` in a direction `u`: the coderivative is
/// `span{x*_i : i ∈ I₀(u)} + cone{x*_i : i ∈ I_>(u)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderivativeGenerators {
    pub span: Vec<usize>,
    pub cone: Vec<usize>,
}

pub fn coderivative_generators(
    x: &DVector<f64>,
    y: &DVector<f64>,
    u: &DVector<f64>,
    c: &Polyhedron,
    tol: f64,
) -> Result<CoderivativeGenerators> {
    check_dim(u, c)?;
    let dec = decompose_normal(y, x, c, tol)?;
    let vals = c.values(u);
    for &(i, l) in &dec.multipliers {
        if l > STRICT_MULTIPLIER && vals[i].abs() > tol {
            return Err(Error::DomainViolation { index: i, value: vals[i] });
        }
    }
    let active = active_set(x, c, tol)?;
    let (span, cone) = featured_sets(u, &active, c, tol);
    Ok(CoderivativeGenerators { span, cone })
}

fn check_dim(x: &DVector<f64>, c: &Polyhedron) -> Result<()> {
    if x.len() != c.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} against polyhedron in R^{}",
            x.len(),
            c.dim()
        )));
    }
    Ok(())
}
