//! Trajectory CSV files and long-format plot data.

use std::path::Path;

use moreau::dynamics::{DiscreteTrajectory, Mesh};
use nalgebra::DVector;

use crate::CliError;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn header(n: usize, d: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for (name, len) in [("x", n), ("u", n), ("a", d), ("eta", m)] {
        h.extend((1..=len).map(|i| format!("{name}_{i}")));
    }
    h
}

/// One row per node. `eta` on row `j < k` is the force on `[t_j, t_{j+1})`;
/// the last row carries the terminal force.
pub fn write_trajectory(path: &Path, traj: &DiscreteTrajectory, eta: &[DVector<f64>], eta_end: &DVector<f64>) -> Result<(), CliError> {
    let (n, d, m) = (traj.x[0].len(), traj.a[0].len(), eta_end.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header(n, d, m)).map_err(|e| CliError::io(path, e))?;
    for j in 0..=traj.k() {
        let e = if j < traj.k() { &eta[j] } else { eta_end };
        let row = std::iter::once(traj.mesh.t(j))
            .chain(traj.x[j].iter().copied())
            .chain(traj.u[j].iter().copied())
            .chain(traj.a[j].iter().copied())
            .chain(e.iter().copied())
            .map(fmt);
        w.write_record(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Read a trajectory written by `write_trajectory`; the `eta` columns are
/// ignored since checks recompute them.
pub fn read_trajectory(path: &Path, n: usize, d: usize, m: usize, horizon: f64) -> Result<DiscreteTrajectory, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let want = header(n, d, m);
    let got: Vec<String> = r.headers().map_err(|e| CliError::io(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    if got != want {
        return Err(CliError::Usage(format!("{}: header {:?} does not match the config, expected {:?}", path.display(), got, want)));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(CliError::Usage(format!("{}: need at least two nodes", path.display())));
    }
    let k = rows.len() - 1;
    let mesh = Mesh::new(k, horizon);
    for (j, row) in rows.iter().enumerate() {
        if (row[0] - mesh.t(j)).abs() > 1e-9 * (1.0 + horizon) {
            return Err(CliError::Usage(format!(
                "{}: node {j} has t = {}, expected a uniform mesh on [0, {horizon}] ({})",
                path.display(),
                row[0],
                mesh.t(j)
            )));
        }
    }
    let col = |j: usize, lo: usize, len: usize| DVector::from_column_slice(&rows[j][lo..lo + len]);
    Ok(DiscreteTrajectory {
        mesh,
        x: (0..=k).map(|j| col(j, 1, n)).collect(),
        u: (0..=k).map(|j| col(j, 1 + n, n)).collect(),
        a: (0..=k).map(|j| col(j, 1 + 2 * n, d)).collect(),
    })
}

/// Long format `series,index,t,value`, one row per sample.
#[derive(Default)]
pub struct PlotData {
    rows: Vec<(String, usize, f64, f64)>,
}

impl PlotData {
    pub fn push(&mut self, series: &str, index: usize, t: f64, value: f64) {
        self.rows.push((series.to_string(), index, t, value));
    }

    pub fn push_trajectory(&mut self, traj: &DiscreteTrajectory) {
        for j in 0..=traj.k() {
            let t = traj.mesh.t(j);
            for (name, v) in [("x", &traj.x[j]), ("u", &traj.u[j]), ("a", &traj.a[j])] {
                for (i, &val) in v.iter().enumerate() {
                    self.push(name, i + 1, t, val);
                }
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
        w.write_record(["series", "index", "t", "value"]).map_err(|e| CliError::io(path, e))?;
        for (s, i, t, v) in &self.rows {
            w.write_record([s.clone(), i.to_string(), fmt(*t), fmt(*v)]).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}
