use serde::{Deserialize, Serialize};

use super::finite_or_inf;

/// One checked condition. Lower-bound conditions are encoded as residuals
/// too (`max(0, bound − value)` with tolerance zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub id: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    /// Time at which the residual peaks.
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub verdict: bool,
    /// Multiplier of the cost after normalization.
    pub lambda: f64,
    /// Nontrivial only through atoms at the endpoints.
    pub degenerate: bool,
    pub entries: Vec<CheckEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl CheckReport {
    pub(crate) fn new(lambda: f64) -> Self {
        CheckReport { verdict: false, lambda, degenerate: false, entries: Vec::new(), notes: Vec::new() }
    }

    pub(crate) fn record(&mut self, id: &str, residual: f64, tolerance: f64, t: Option<f64>) {
        let residual = finite_or_inf(residual);
        // JSON has no infinity
        let stored = if residual.is_finite() { residual } else { f64::MAX };
        self.entries.push(CheckEntry {
            id: id.to_string(),
            passed: residual <= tolerance,
            residual: stored,
            tolerance,
            t,
            note: None,
        });
    }

    pub(crate) fn record_max(&mut self, id: &str, m: Peak, tolerance: f64) {
        self.record(id, m.value, tolerance, m.t);
    }

    pub(crate) fn skip(&mut self, id: &str, why: &str) {
        self.entries.push(CheckEntry {
            id: id.to_string(),
            passed: true,
            residual: 0.0,
            tolerance: 0.0,
            t: None,
            note: Some(why.to_string()),
        });
    }

    pub(crate) fn annotate(&mut self, id: &str, note: &str) {
        if let Some(e) = self.entries.iter_mut().rev().find(|e| e.id == id) {
            e.note = Some(note.to_string());
        }
    }

    pub(crate) fn finish(mut self) -> Self {
        self.verdict = self.entries.iter().all(|e| e.passed);
        self
    }

    pub fn entry(&self, id: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.id.as_str()).collect()
    }
}

/// Running maximum of a residual and where it happened.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Peak {
    pub value: f64,
    pub t: Option<f64>,
}

impl Peak {
    pub fn see(&mut self, v: f64, t: f64) {
        let v = finite_or_inf(v);
        if v > self.value || (self.t.is_none() && v >= self.value) {
            self.value = v;
            self.t = Some(t);
        }
    }
}
