//! Solver-agnostic cone program form and its interior point lowering.
//!
//! A [`ConeProblem`] collects linear matrix inequalities
//! `constant + sum_i v_i coeff_i <= 0` (in the semidefinite order),
//! scalar inequalities `a' v >= lower`, and a convex objective. The
//! Clarabel lowering rewrites each matrix inequality as a slack in the
//! scaled-triangle PSD cone and each scalar inequality as a nonnegative
//! slack.

use std::f64::consts::SQRT_2;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::{Error, Result};

/// One matrix coefficient of one scalar variable inside a PSD block.
#[derive(Debug, Clone)]
pub struct MatrixTerm {
    pub var: usize,
    pub coeff: DMatrix<f64>,
}

/// `constant + sum terms[j].coeff * v[terms[j].var]` must be negative
/// semidefinite. All matrices are `dim x dim` and treated as symmetric
/// (the lowering averages any asymmetry away).
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    pub terms: Vec<MatrixTerm>,
}

/// `sum terms[j].1 * v[terms[j].0] >= lower`.
#[derive(Debug, Clone)]
pub struct LinIneq {
    pub terms: Vec<(usize, f64)>,
    pub lower: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConeProblem {
    pub num_vars: usize,
    pub psd_blocks: Vec<PsdBlock>,
    pub lin_ineqs: Vec<LinIneq>,
    /// Weight on `|v|^2`; a small positive value pulls the interior point
    /// method toward a well-scaled certificate instead of an arbitrary
    /// feasible one.
    pub quad_objective: f64,
    pub linear_objective: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub enum BackendStatus {
    /// Converged to full accuracy.
    Solved(Vec<f64>),
    /// Converged to reduced accuracy; the point still deserves residual
    /// checks but is not trusted on its own.
    AlmostSolved(Vec<f64>),
    /// The solver produced an infeasibility certificate.
    Infeasible(String),
    /// Ran out of iterations or progress without a determination. The
    /// last iterate is attached when it is a candidate point rather than
    /// a ray; its exact residuals decide whether it is still usable.
    Inconclusive {
        reason: String,
        point: Option<Vec<f64>>,
    },
}

pub trait ConeBackend {
    fn solve(&self, prob: &ConeProblem, time_limit_s: f64) -> Result<BackendStatus>;
}

/// Scaled upper triangle of the symmetric part of `m`, column by column,
/// matching the PSD triangle cone convention.
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut v = Vec::with_capacity(d * (d + 1) / 2);
    for c in 0..d {
        for r in 0..=c {
            let sym = 0.5 * (m[(r, c)] + m[(c, r)]);
            v.push(if r == c { sym } else { sym * SQRT_2 });
        }
    }
    v
}

#[derive(Debug, Clone, Default)]
pub struct ClarabelBackend {
    pub verbose: bool,
}

impl ConeBackend for ClarabelBackend {
    fn solve(&self, prob: &ConeProblem, time_limit_s: f64) -> Result<BackendStatus> {
        if prob.num_vars == 0 {
            return Err(Error::EmptyProblem("no variables".into()));
        }
        if prob.psd_blocks.is_empty() && prob.lin_ineqs.is_empty() {
            return Err(Error::EmptyProblem("no constraints".into()));
        }
        for (k, block) in prob.psd_blocks.iter().enumerate() {
            if block.constant.shape() != (block.dim, block.dim)
                || block.terms.iter().any(|t| {
                    t.coeff.shape() != (block.dim, block.dim) || t.var >= prob.num_vars
                })
            {
                return Err(Error::DimensionMismatch(format!(
                    "PSD block {k} has inconsistent dimensions"
                )));
            }
        }

        let mut rows_i = Vec::new();
        let mut cols_j = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // Scalar inequalities first: a' v >= lo becomes -lo + a' v >= 0,
        // so the slack row is b - A v with A = -a, b = -lo.
        if !prob.lin_ineqs.is_empty() {
            for ineq in &prob.lin_ineqs {
                let row = b.len();
                for &(var, coeff) in &ineq.terms {
                    if var >= prob.num_vars {
                        return Err(Error::DimensionMismatch(format!(
                            "inequality references variable {var} of {}",
                            prob.num_vars
                        )));
                    }
                    rows_i.push(row);
                    cols_j.push(var);
                    vals.push(-coeff);
                }
                b.push(-ineq.lower);
            }
            cones.push(SupportedConeT::NonnegativeConeT(prob.lin_ineqs.len()));
        }

        // Matrix inequalities: the slack svec(-constant - sum v_i C_i)
        // lands in the PSD triangle cone, so b = svec(-constant) and the
        // column of v_i is svec(C_i).
        for block in &prob.psd_blocks {
            let base = b.len();
            b.extend(svec(&(-&block.constant)));
            for term in &block.terms {
                for (off, val) in svec(&term.coeff).into_iter().enumerate() {
                    if val != 0.0 {
                        rows_i.push(base + off);
                        cols_j.push(term.var);
                        vals.push(val);
                    }
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(block.dim));
        }

        let a = CscMatrix::new_from_triplets(b.len(), prob.num_vars, rows_i, cols_j, vals);

        // Clarabel minimizes v' P v / 2 + q' v.
        let p = if prob.quad_objective != 0.0 {
            let idx: Vec<usize> = (0..prob.num_vars).collect();
            CscMatrix::new_from_triplets(
                prob.num_vars,
                prob.num_vars,
                idx.clone(),
                idx,
                vec![2.0 * prob.quad_objective; prob.num_vars],
            )
        } else {
            CscMatrix::zeros((prob.num_vars, prob.num_vars))
        };
        let mut q = vec![0.0; prob.num_vars];
        for &(var, coeff) in &prob.linear_objective {
            if var >= prob.num_vars {
                return Err(Error::DimensionMismatch(format!(
                    "objective references variable {var} of {}",
                    prob.num_vars
                )));
            }
            q[var] += coeff;
        }

        let settings = DefaultSettings {
            verbose: self.verbose,
            time_limit: if time_limit_s > 0.0 {
                time_limit_s
            } else {
                f64::INFINITY
            },
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure(format!("solver setup failed: {e:?}")))?;
        solver.solve();

        let status = solver.solution.status;
        let x = solver.solution.x.clone();
        match status {
            SolverStatus::Solved => Ok(BackendStatus::Solved(x)),
            SolverStatus::AlmostSolved => Ok(BackendStatus::AlmostSolved(x)),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(BackendStatus::Infeasible(format!("{status:?}")))
            }
            SolverStatus::MaxTime => Err(Error::SolverTimeout(time_limit_s)),
            // On dual infeasibility x is a ray, not a candidate point.
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Ok(BackendStatus::Inconclusive {
                    reason: format!("{status:?}"),
                    point: None,
                })
            }
            other => Ok(BackendStatus::Inconclusive {
                reason: format!("{other:?}"),
                point: Some(x),
            }),
        }
    }
}
