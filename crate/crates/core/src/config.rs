//! JSON problem files. Every file names its `kind` and `schema_version`;
//! unknown keys are rejected so typos fail loudly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{RunningCost, TerminalCost};
use crate::crowd::CrowdConfig;
use crate::dynamics::{ControlPath, Perturbation, SweepingProblem, UControl};
use crate::error::{Error, Result};
use crate::geometry::Polyhedron;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemConfig {
    Sweeping(SweepingConfig),
    Crowd(CrowdFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepingConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// Rows `x*_i` of `C = {y : ⟨x*_i, y⟩ ≤ 0}`.
    pub generators: Vec<Vec<f64>>,
    /// Radius of the sphere carrying a free `u`; defaults to `‖u(0)‖`.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub tau: f64,
    pub perturbation: PerturbationSpec,
    pub terminal_cost: TerminalSpec,
    #[serde(default)]
    pub running_cost: RunningSpec,
    pub u: USpec,
    /// Control used by plain simulation; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<PathSpec>,
    #[serde(default)]
    pub growth: Option<f64>,
    #[serde(default)]
    pub terminal_on_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    Identity,
    DiagSpeeds { speeds: Vec<f64> },
    /// `A x + B a + c`, matrices given row by row.
    Affine { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    pub weight: f64,
    #[serde(default)]
    pub target: Option<Vec<f64>>,
}

/// Weights of the built-in running cost; vectors default to zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunningSpec {
    pub x_weight: f64,
    pub x_target: Option<Vec<f64>>,
    pub a_weight: f64,
    pub a_shift: Option<Vec<f64>>,
    pub a_shift_rate: Option<Vec<f64>>,
    pub xdot_weight: f64,
    pub udot_weight: f64,
    pub adot_weight: f64,
    pub abs_weight: f64,
    pub abs_shift: Option<Vec<f64>>,
    pub abs_shift_rate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct USpec {
    pub mode: UMode,
    pub value: Vec<f64>,
    #[serde(default)]
    pub slope: Option<Vec<f64>>,
}

/// `value + slope · t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub value: Vec<f64>,
    #[serde(default)]
    pub slope: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UMode {
    Fixed,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub speeds: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Externally reported terminal atom of `γ`, compared in the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_gamma_atom: Option<Vec<f64>>,
}

fn vec_or_zero(v: &Option<Vec<f64>>, len: usize, key: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Config(format!("`{key}` has {} entries, expected {len}", v.len()))),
    }
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, key: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("`{key}` must be {r} x {c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_version(v: u32) -> Result<()> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Config(format!("`schema_version` {v} is not supported, expected {SCHEMA_VERSION}")))
    }
}

impl SweepingConfig {
    pub fn build(&self) -> Result<SweepingProblem> {
        check_version(self.schema_version)?;
        let (n, d) = (self.n, self.d);
        let x0 = vec_or_zero(&Some(self.x0.clone()), n, "x0")?;
        let gens = self
            .generators
            .iter()
            .map(|g| vec_or_zero(&Some(g.clone()), n, "generators"))
            .collect::<Result<Vec<_>>>()?;
        let f = match &self.perturbation {
            PerturbationSpec::Identity => Perturbation::Identity,
            PerturbationSpec::DiagSpeeds { speeds } => {
                Perturbation::DiagSpeeds(vec_or_zero(&Some(speeds.clone()), n, "speeds")?)
            }
            PerturbationSpec::Affine { a, b, c } => Perturbation::Affine {
                a: matrix(a, n, n, "a")?,
                b: matrix(b, n, d, "b")?,
                c: vec_or_zero(&Some(c.clone()), n, "c")?,
            },
        };
        let phi = TerminalCost::new(self.terminal_cost.weight, vec_or_zero(&self.terminal_cost.target, n, "target")?);
        let rc = &self.running_cost;
        let ell = RunningCost {
            x_weight: rc.x_weight,
            x_target: vec_or_zero(&rc.x_target, n, "x_target")?,
            a_weight: rc.a_weight,
            a_shift: vec_or_zero(&rc.a_shift, d, "a_shift")?,
            a_shift_rate: vec_or_zero(&rc.a_shift_rate, d, "a_shift_rate")?,
            xdot_weight: rc.xdot_weight,
            udot_weight: rc.udot_weight,
            adot_weight: rc.adot_weight,
            abs_weight: rc.abs_weight,
            abs_shift: vec_or_zero(&rc.abs_shift, d, "abs_shift")?,
            abs_shift_rate: vec_or_zero(&rc.abs_shift_rate, d, "abs_shift_rate")?,
        };
        let path = ControlPath {
            value: vec_or_zero(&Some(self.u.value.clone()), n, "u.value")?,
            slope: vec_or_zero(&self.u.slope, n, "u.slope")?,
        };
        let r = self.r.unwrap_or_else(|| path.value.norm());
        let u = match self.u.mode {
            UMode::Fixed => UControl::Fixed(path),
            UMode::Free => UControl::Free(path),
        };
        let p = SweepingProblem {
            n,
            d,
            horizon: self.horizon,
            x0,
            polyhedron: Polyhedron::new(gens)?,
            r,
            tau: self.tau,
            f,
            phi,
            ell,
            u,
            growth: self.growth,
            terminal_on_boundary: self.terminal_on_boundary,
        };
        p.validate()?;
        Ok(p)
    }

    /// The simulation control `a(t)`.
    pub fn a_path(&self) -> Result<ControlPath> {
        match &self.a {
            None => Ok(ControlPath::constant(DVector::zeros(self.d))),
            Some(p) => Ok(ControlPath {
                value: vec_or_zero(&Some(p.value.clone()), self.d, "a.value")?,
                slope: vec_or_zero(&p.slope, self.d, "a.slope")?,
            }),
        }
    }
}

impl CrowdFile {
    pub fn build(&self) -> Result<CrowdConfig> {
        check_version(self.schema_version)?;
        let mut c = CrowdConfig::new(self.n, self.radius, self.horizon, self.speeds.clone(), self.x0.clone())?;
        c.alpha = self.alpha;
        Ok(c)
    }
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProblemConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Build the typed problem once to surface every semantic error.
    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemConfig::Sweeping(s) => s.build().and_then(|_| s.a_path()).map(|_| ()),
            ProblemConfig::Crowd(c) => c.build().map(|_| ()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EX41: &str = r#"{
        "schema_version": 1, "kind": "sweeping", "n": 1, "d": 1, "T": 1.0,
        "x0": [0.0], "generators": [[1.0]],
        "perturbation": {"name": "identity"},
        "terminal_cost": {"weight": 1.0, "target": [1.0]},
        "running_cost": {"a_weight": 1.0},
        "u": {"mode": "fixed", "value": [0.5]}
    }"#;

    #[test]
    fn sweeping_round_trip() {
        let cfg = ProblemConfig::from_json(EX41).unwrap();
        let ProblemConfig::Sweeping(s) = &cfg else { panic!() };
        let p = s.build().unwrap();
        assert_eq!(p.r, 0.5);
        assert_eq!(p.ell.a_weight, 1.0);
        let back = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ProblemConfig::from_json(&back).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = EX41.replace("\"tau\"", "x").replace("\"x0\"", "\"x_0\"");
        let err = ProblemConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("x_0"), "{err}");
        let bad = EX41.replace("\"a_weight\"", "\"a_wieght\"");
        let err = ProblemConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("a_wieght"), "{err}");
    }

    #[test]
    fn semantic_errors() {
        let bad = EX41.replace("\"value\": [0.5]", "\"value\": [-0.5]");
        assert!(matches!(ProblemConfig::from_json(&bad), Err(Error::InfeasibleStart(_))));
        let bad = EX41.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(ProblemConfig::from_json(&bad).unwrap_err().to_string().contains("schema_version"));
        let bad = EX41.replace("\"target\": [1.0]", "\"target\": [1.0, 2.0]");
        assert!(ProblemConfig::from_json(&bad).unwrap_err().to_string().contains("target"));
    }

    #[test]
    fn crowd_file() {
        let text = r#"{"schema_version": 1, "kind": "crowd", "n": 2, "R": 3, "T": 6,
                       "speeds": [6, 3], "x0": [-60, -48]}"#;
        let ProblemConfig::Crowd(c) = ProblemConfig::from_json(text).unwrap() else { panic!() };
        assert_eq!(c.build().unwrap().speeds, vec![6.0, 3.0]);
        let bad = text.replace("\"R\"", "\"radius\"");
        assert!(ProblemConfig::from_json(&bad).unwrap_err().to_string().contains("radius"));
    }
}
