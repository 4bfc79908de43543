//! System data for the switched affine loop `x+ = A x + B Delta s(K x + d)`.
//!
//! `A` drives the open loop, `K x + d` feeds the componentwise step, and
//! each active step component injects a column of `B` scaled by the
//! diagonal of `Delta`. Validation is all-or-nothing: every downstream
//! builder requires a passing report.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kkt;
use crate::{Error, Result};

/// Plant, gain, and offset data of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemData {
    /// State matrix, `n_p x n_p`.
    pub a: DMatrix<f64>,
    /// Input matrix, `n_p x n_u`.
    pub b: DMatrix<f64>,
    /// Feedback gain, `n_u x n_p`.
    pub k: DMatrix<f64>,
    /// Diagonal input scaling, `n_u x n_u`.
    pub delta: DMatrix<f64>,
    /// Feedback offset, length `n_u`.
    pub d: DVector<f64>,
}

/// Outcome of validating candidate system data. Empty means pass.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.pass() {
            Ok(())
        } else {
            Err(Error::InvalidSystem(self.violations.join("; ")))
        }
    }
}

fn check_finite(report: &mut ValidationReport, name: &str, it: impl Iterator<Item = f64>) {
    for (i, v) in it.enumerate() {
        if !v.is_finite() {
            report
                .violations
                .push(format!("{name} has non-finite entry {v} at flat index {i}"));
            return;
        }
    }
}

impl SystemData {
    /// Validating constructor: rejects data that any downstream builder
    /// would choke on.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        k: DMatrix<f64>,
        delta: DMatrix<f64>,
        d: DVector<f64>,
    ) -> Result<Self> {
        let sys = SystemData { a, b, k, delta, d };
        sys.validate().into_result()?;
        Ok(sys)
    }

    /// State dimension.
    pub fn n_p(&self) -> usize {
        self.a.nrows()
    }

    /// Number of step components.
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    /// Checks shape compatibility, finiteness, and diagonality of `Delta`.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n_p = self.a.nrows();
        let n_u = self.b.ncols();
        if n_p == 0 {
            report.violations.push("state dimension is zero".into());
        }
        if n_u == 0 {
            report.violations.push("input dimension is zero".into());
        }
        if self.a.ncols() != n_p {
            report.violations.push(format!(
                "A must be square, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            ));
        }
        if self.b.nrows() != n_p {
            report.violations.push(format!(
                "B must have {} rows, got {}",
                n_p,
                self.b.nrows()
            ));
        }
        if self.k.shape() != (n_u, n_p) {
            report.violations.push(format!(
                "K must be {}x{}, got {}x{}",
                n_u,
                n_p,
                self.k.nrows(),
                self.k.ncols()
            ));
        }
        if self.delta.shape() != (n_u, n_u) {
            report.violations.push(format!(
                "Delta must be {}x{}, got {}x{}",
                n_u,
                n_u,
                self.delta.nrows(),
                self.delta.ncols()
            ));
        } else {
            for i in 0..n_u {
                for j in 0..n_u {
                    if i != j && self.delta[(i, j)] != 0.0 {
                        report.violations.push(format!(
                            "Delta must be diagonal, entry ({i}, {j}) = {}",
                            self.delta[(i, j)]
                        ));
                    }
                }
            }
        }
        if self.d.len() != n_u {
            report.violations.push(format!(
                "d must have length {}, got {}",
                n_u,
                self.d.len()
            ));
        }
        check_finite(&mut report, "A", self.a.iter().copied());
        check_finite(&mut report, "B", self.b.iter().copied());
        check_finite(&mut report, "K", self.k.iter().copied());
        check_finite(&mut report, "Delta", self.delta.iter().copied());
        check_finite(&mut report, "d", self.d.iter().copied());
        report
    }

    /// Step input `u = K x + d`.
    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * x + &self.d
    }

    /// Successor state `A x + B Delta s` for a given selection.
    pub fn successor(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * (&self.delta * s)
    }

    /// One step of the single-valued loop, resolving the step strictly.
    pub fn step_successor(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = kkt::step(&self.input(x));
        self.successor(x, &s)
    }
}

/// Embeds a single-input plant with a ternary (three-level) quantizer into
/// the binary step form: the signal `sign-like q(K' x)` with dead zone
/// becomes two step components, `B = [B', -B']`, `K = [K'; -K']`,
/// `d = -1`, `Delta = I`.
pub fn ternary_embed(
    a: DMatrix<f64>,
    b_col: DMatrix<f64>,
    k_row: DMatrix<f64>,
) -> Result<SystemData> {
    let n_p = a.nrows();
    if b_col.shape() != (n_p, 1) {
        return Err(Error::DimensionMismatch(format!(
            "ternary embedding needs a single input column, got {}x{}",
            b_col.nrows(),
            b_col.ncols()
        )));
    }
    if k_row.shape() != (1, n_p) {
        return Err(Error::DimensionMismatch(format!(
            "ternary embedding needs a single gain row, got {}x{}",
            k_row.nrows(),
            k_row.ncols()
        )));
    }
    let mut b = DMatrix::zeros(n_p, 2);
    b.column_mut(0).copy_from(&b_col.column(0));
    b.column_mut(1).copy_from(&(-b_col.column(0)));
    let mut k = DMatrix::zeros(2, n_p);
    k.row_mut(0).copy_from(&k_row.row(0));
    k.row_mut(1).copy_from(&(-k_row.row(0)));
    SystemData::new(
        a,
        b,
        k,
        DMatrix::identity(2, 2),
        DVector::from_element(2, -1.0),
    )
}

/// Splits a two-channel opposite-sign embedding back into its single-input
/// components `(B', K')`, when the system has exactly that shape. Returns
/// `None` for anything else; the match is exact, with no tolerance, because
/// the embedding is built by negation.
pub fn ternary_components(sys: &SystemData) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    if sys.n_u() != 2
        || sys.delta != DMatrix::identity(2, 2)
        || sys.d != DVector::from_element(2, -1.0)
    {
        return None;
    }
    if sys.b.column(1) != -sys.b.column(0) || sys.k.row(1) != -sys.k.row(0) {
        return None;
    }
    Some((
        DMatrix::from_column_slice(sys.n_p(), 1, sys.b.column(0).as_slice()),
        DMatrix::from_fn(1, sys.n_p(), |_, c| sys.k[(0, c)]),
    ))
}

/// Per-solve overrides carried by a config file. Everything is optional;
/// unset fields fall back to the library defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub eps: Option<f64>,
    pub margin: Option<f64>,
    pub tol: Option<f64>,
    pub time_limit_s: Option<f64>,
    pub rank_tol: Option<f64>,
}

/// JSON description of a system: dense row-major matrices plus the
/// diagonal of `Delta`. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "Delta_diag")]
    pub delta_diag: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{name} has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Config(format!("{name} has empty rows")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "{name} is ragged: row 0 has {ncols} entries, row {bad} has {}",
            rows[bad].len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl SystemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::from_json(&text)
    }

    /// Builds and validates the system the config describes.
    pub fn to_system(&self) -> Result<SystemData> {
        let a = rows_to_matrix("A", &self.a)?;
        let b = rows_to_matrix("B", &self.b)?;
        let k = rows_to_matrix("K", &self.k)?;
        if self.delta_diag.is_empty() {
            return Err(Error::Config("Delta_diag is empty".into()));
        }
        let delta = DMatrix::from_diagonal(&DVector::from_row_slice(&self.delta_diag));
        let d = DVector::from_row_slice(&self.d);
        SystemData::new(a, b, k, delta, d)
    }
}
