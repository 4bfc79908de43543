//! Semidefinite feasibility encoding, solving, and verification.
//!
//! The certificate search is a feasibility program in the joint variables
//! `(P, M_1..3, G_1..3, c_1..3)`: three projected matrix inequalities, all
//! linear in the variables, plus entrywise sign constraints on the `M_i`
//! and normalization floors on the rates `c`. [`encode`] assembles the
//! per-variable coefficient matrices, [`solve`] hands them to the interior
//! point backend behind a small margin ladder, and [`verify`] recomputes
//! every inequality from the certificate alone, through the evaluation
//! path rather than the coefficient path, so the two routes check each
//! other.

pub mod backend;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::lmi::{build_objective_blocks, matrix_rows, psi_of_diag, LmiData};
use crate::model::SystemData;
use crate::{Error, Result};

use backend::{BackendStatus, ClarabelBackend, ConeBackend, ConeProblem, LinIneq, MatrixTerm, PsdBlock};

/// Largest matrix inequality eigenvalue [`solve`] accepts from the
/// interior point before it gives up on a returned point.
const ACCEPT_TOL: f64 = 1e-8;

/// Negative multiplier entries above this magnitude are rounding debris
/// from the solver and get clamped to zero.
const CLAMP_TOL: f64 = 1e-9;

/// Flat packing of the decision variables. Symmetric matrices store their
/// upper triangle column by column; the diagonal multiplier pairs and the
/// rates follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableLayout {
    /// Side of `P`.
    pub z_dim: usize,
    /// Side of each `M_i`.
    pub f_dim: usize,
    /// Entries per `G_i`, two diagonals per coupling form.
    pub g_len: usize,
    /// Whether `P` is part of the vector or held fixed outside it.
    pub with_p: bool,
}

/// The variables of one packed vector in matrix form.
#[derive(Debug, Clone)]
pub struct PackedVars {
    pub p: Option<DMatrix<f64>>,
    pub m: [DMatrix<f64>; 3],
    pub g: [DVector<f64>; 3],
    pub c: [f64; 3],
}

fn tri(d: usize) -> usize {
    d * (d + 1) / 2
}

fn tri_index(r: usize, c: usize) -> usize {
    let (r, c) = if r <= c { (r, c) } else { (c, r) };
    c * (c + 1) / 2 + r
}

impl VariableLayout {
    pub fn new(n_p: usize, n_u: usize, with_p: bool) -> Self {
        VariableLayout {
            z_dim: n_p + 3 * n_u,
            f_dim: 8 * n_u + 1,
            g_len: 4 * n_u,
            with_p,
        }
    }

    fn p_len(&self) -> usize {
        if self.with_p {
            tri(self.z_dim)
        } else {
            0
        }
    }

    fn m_offset(&self) -> usize {
        self.p_len()
    }

    fn g_offset(&self) -> usize {
        self.m_offset() + 3 * tri(self.f_dim)
    }

    fn c_offset(&self) -> usize {
        self.g_offset() + 3 * self.g_len
    }

    pub fn num_vars(&self) -> usize {
        self.c_offset() + 3
    }

    /// Index of `P[(r, c)]`; symmetric partners share one variable.
    pub fn p_index(&self, r: usize, c: usize) -> usize {
        assert!(self.with_p, "layout holds P fixed");
        assert!(r < self.z_dim && c < self.z_dim);
        tri_index(r, c)
    }

    pub fn m_index(&self, i: usize, r: usize, c: usize) -> usize {
        assert!(i < 3 && r < self.f_dim && c < self.f_dim);
        self.m_offset() + i * tri(self.f_dim) + tri_index(r, c)
    }

    pub fn g_index(&self, i: usize, j: usize) -> usize {
        assert!(i < 3 && j < self.g_len);
        self.g_offset() + i * self.g_len + j
    }

    pub fn c_index(&self, k: usize) -> usize {
        assert!(k < 3);
        self.c_offset() + k
    }

    fn unpack_sym(&self, v: &[f64], mut index: impl FnMut(usize, usize) -> usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |r, c| v[index(r, c)])
    }

    pub fn unpack(&self, v: &[f64]) -> Result<PackedVars> {
        if v.len() != self.num_vars() {
            return Err(Error::DimensionMismatch(format!(
                "packed vector has {} entries, layout needs {}",
                v.len(),
                self.num_vars()
            )));
        }
        let p = self
            .with_p
            .then(|| self.unpack_sym(v, |r, c| self.p_index(r, c), self.z_dim));
        let m = std::array::from_fn(|i| {
            self.unpack_sym(v, |r, c| self.m_index(i, r, c), self.f_dim)
        });
        let g = std::array::from_fn(|i| {
            DVector::from_fn(self.g_len, |j, _| v[self.g_index(i, j)])
        });
        let c = std::array::from_fn(|k| v[self.c_index(k)]);
        Ok(PackedVars { p, m, g, c })
    }

    /// Inverse of [`unpack`]; reads the upper triangles of the symmetric
    /// matrices.
    pub fn pack(&self, vars: &PackedVars) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.num_vars()];
        match (&vars.p, self.with_p) {
            (Some(p), true) => {
                if p.shape() != (self.z_dim, self.z_dim) {
                    return Err(Error::DimensionMismatch(format!(
                        "P is {}x{}, layout needs {}",
                        p.nrows(),
                        p.ncols(),
                        self.z_dim
                    )));
                }
                for c in 0..self.z_dim {
                    for r in 0..=c {
                        v[self.p_index(r, c)] = p[(r, c)];
                    }
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::DimensionMismatch(
                    "layout holds P fixed but the variables carry one".into(),
                ))
            }
            (None, true) => {
                return Err(Error::DimensionMismatch(
                    "layout expects P among the variables".into(),
                ))
            }
        }
        for i in 0..3 {
            if vars.m[i].shape() != (self.f_dim, self.f_dim) {
                return Err(Error::DimensionMismatch(format!(
                    "M{} is {}x{}, layout needs {}",
                    i + 1,
                    vars.m[i].nrows(),
                    vars.m[i].ncols(),
                    self.f_dim
                )));
            }
            if vars.g[i].len() != self.g_len {
                return Err(Error::DimensionMismatch(format!(
                    "G{} has {} entries, layout needs {}",
                    i + 1,
                    vars.g[i].len(),
                    self.g_len
                )));
            }
            for c in 0..self.f_dim {
                for r in 0..=c {
                    v[self.m_index(i, r, c)] = vars.m[i][(r, c)];
                }
            }
            for j in 0..self.g_len {
                v[self.g_index(i, j)] = vars.g[i][j];
            }
        }
        for k in 0..3 {
            v[self.c_index(k)] = vars.c[k];
        }
        Ok(v)
    }
}

/// One projected matrix inequality, affine in the packed variables:
/// `constant + sum coeffs[j].1 * v[coeffs[j].0]` must be negative
/// semidefinite.
#[derive(Debug, Clone)]
pub struct PsdConstraint {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

/// The assembled feasibility program. Block order: upper sandwich, lower
/// sandwich, decrease.
#[derive(Debug, Clone)]
pub struct FeasibilityProblem {
    pub layout: VariableLayout,
    pub blocks: [PsdConstraint; 3],
    pub sign_constraints: Vec<LinIneq>,
    /// Caller's floor under `c_1`, `c_3`, and `c_2 - c_1`. The encoded
    /// rows may pin a larger normalization (see `encode`); any returned
    /// certificate dominates this floor either way.
    pub eps: f64,
    /// Set when the layout excludes `P`.
    pub fixed_p: Option<DMatrix<f64>>,
}

/// `rows' E rows` for the packed symmetric entry `(r, c)`: symmetric
/// partners share a variable, so off-diagonal entries carry both outer
/// products.
fn sym_pair(rows: &DMatrix<f64>, r: usize, c: usize) -> DMatrix<f64> {
    let outer = rows.row(r).transpose() * rows.row(c);
    if r == c {
        outer
    } else {
        &outer + outer.transpose()
    }
}

/// Coefficient of one diagonal multiplier entry inside the projected
/// complementarity form; mirrors the entry placement of `psi_of_diag`.
fn psi_coeff(tw: &DMatrix<f64>, n_u: usize, j: usize) -> DMatrix<f64> {
    let two_nu = 2 * n_u;
    let block = 5 * n_u;
    let (base, k) = if j < two_nu {
        (0, j)
    } else {
        (block, j - two_nu)
    };
    let ra = tw.row(base + k);
    let rb = tw.row(base + two_nu + k);
    ra.transpose() * rb + rb.transpose() * ra
}

/// Assembles the feasibility program with `P` among the variables.
pub fn encode(sys: &SystemData, lmi: &LmiData, eps: f64) -> Result<FeasibilityProblem> {
    encode_inner(sys, lmi, eps, None)
}

/// Assembles the multiplier-only program for a fixed `P`: the `P`
/// dependent parts move into the constant blocks and only
/// `(M, G, c)` remain to be found.
pub fn encode_with_p(
    sys: &SystemData,
    lmi: &LmiData,
    p: &DMatrix<f64>,
    eps: f64,
) -> Result<FeasibilityProblem> {
    encode_inner(sys, lmi, eps, Some(p))
}

fn encode_inner(
    sys: &SystemData,
    lmi: &LmiData,
    eps: f64,
    fixed_p: Option<&DMatrix<f64>>,
) -> Result<FeasibilityProblem> {
    sys.validate().into_result()?;
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "normalization floor must be positive, got {eps:e}"
        )));
    }
    if lmi.kernel.is_degenerate() {
        return Err(Error::DegenerateKernel);
    }
    let layout = VariableLayout::new(lmi.n_p, lmi.n_u, fixed_p.is_none());
    let k = lmi.w_perp.ncols();

    let a1 = (&lmi.v_plus * &lmi.pi1) * &lmi.w_perp;
    let a2 = &lmi.pi2 * &lmi.w_perp;
    let fw = &lmi.f * &lmi.w_perp;
    let tw = &lmi.t * &lmi.w_perp;
    let xw = lmi.w_perp.transpose() * &lmi.x_quad * &lmi.w_perp;

    let mut blocks: [PsdConstraint; 3] = std::array::from_fn(|_| PsdConstraint {
        dim: k,
        constant: DMatrix::zeros(k, k),
        coeffs: Vec::new(),
    });

    match fixed_p {
        None => {
            for c in 0..layout.z_dim {
                for r in 0..=c {
                    let idx = layout.p_index(r, c);
                    let hold = sym_pair(&a2, r, c);
                    let lift = sym_pair(&a1, r, c);
                    blocks[0].coeffs.push((idx, hold.clone()));
                    blocks[1].coeffs.push((idx, -&hold));
                    blocks[2].coeffs.push((idx, &lift - &hold));
                }
            }
        }
        Some(p) => {
            if p.shape() != (layout.z_dim, layout.z_dim) {
                return Err(Error::DimensionMismatch(format!(
                    "P must be {0}x{0}, got {1}x{2}",
                    layout.z_dim,
                    p.nrows(),
                    p.ncols()
                )));
            }
            let asym = (p - p.transpose()).amax();
            if asym > 1e-12 {
                return Err(Error::NotSymmetric {
                    name: "P".into(),
                    asymmetry: asym,
                });
            }
            let p = (p + p.transpose()) * 0.5;
            let hold = a2.transpose() * &p * &a2;
            let lift = a1.transpose() * &p * &a1;
            blocks[0].constant = hold.clone();
            blocks[1].constant = -&hold;
            blocks[2].constant = &lift - &hold;
        }
    }

    blocks[0].coeffs.push((layout.c_index(1), -&xw));
    blocks[1].coeffs.push((layout.c_index(0), xw.clone()));
    blocks[2].coeffs.push((layout.c_index(2), xw.clone()));

    for (i, block) in blocks.iter_mut().enumerate() {
        for c in 0..layout.f_dim {
            for r in 0..=c {
                block
                    .coeffs
                    .push((layout.m_index(i, r, c), sym_pair(&fw, r, c)));
            }
        }
        for j in 0..layout.g_len {
            block
                .coeffs
                .push((layout.g_index(i, j), psi_coeff(&tw, lmi.n_u, j)));
        }
    }

    // With P among the variables the whole program is homogeneous, so the
    // rate floor is a pure normalization: feasibility at any positive
    // floor is equivalent, and certificates scale between floors. Pinning
    // the solve-time floor at 1 keeps an infeasible program O(1) far from
    // feasible, which the interior point can certify; at `eps` itself the
    // violation shrinks to the solver's noise floor. A fixed P breaks the
    // homogeneity, so that encoding keeps the caller's floor.
    let floor = if fixed_p.is_none() { 1.0 } else { eps };
    let mut sign_constraints = Vec::new();
    for i in 0..3 {
        for c in 0..layout.f_dim {
            for r in 0..=c {
                sign_constraints.push(LinIneq {
                    terms: vec![(layout.m_index(i, r, c), 1.0)],
                    lower: 0.0,
                });
            }
        }
    }
    sign_constraints.push(LinIneq {
        terms: vec![(layout.c_index(0), 1.0)],
        lower: floor,
    });
    sign_constraints.push(LinIneq {
        terms: vec![(layout.c_index(1), 1.0), (layout.c_index(0), -1.0)],
        lower: floor,
    });
    sign_constraints.push(LinIneq {
        terms: vec![(layout.c_index(2), 1.0)],
        lower: floor,
    });

    Ok(FeasibilityProblem {
        layout,
        blocks,
        sign_constraints,
        eps,
        fixed_p: fixed_p.map(|p| (p + p.transpose()) * 0.5),
    })
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

impl FeasibilityProblem {
    /// Evaluates block `i` at the packed point.
    pub fn matrix_at(&self, i: usize, v: &[f64]) -> DMatrix<f64> {
        let block = &self.blocks[i];
        let mut out = block.constant.clone();
        for (var, coeff) in &block.coeffs {
            let w = v[*var];
            if w != 0.0 {
                out += coeff * w;
            }
        }
        out
    }

    /// Largest eigenvalue of each block at the packed point; all must be
    /// nonpositive for the point to be feasible.
    pub fn residuals_at(&self, v: &[f64]) -> [f64; 3] {
        std::array::from_fn(|i| max_eig(&self.matrix_at(i, v)))
    }

    /// Lowers to the backend form, shifting each matrix inequality inward
    /// by `margin`.
    pub fn to_cone(
        &self,
        margin: f64,
        quad_objective: f64,
        linear_objective: &[(usize, f64)],
    ) -> ConeProblem {
        let psd_blocks = self
            .blocks
            .iter()
            .map(|b| PsdBlock {
                dim: b.dim,
                constant: &b.constant + DMatrix::identity(b.dim, b.dim) * margin,
                terms: b
                    .coeffs
                    .iter()
                    .map(|(var, coeff)| MatrixTerm {
                        var: *var,
                        coeff: coeff.clone(),
                    })
                    .collect(),
            })
            .collect();
        ConeProblem {
            num_vars: self.layout.num_vars(),
            psd_blocks,
            lin_ineqs: self.sign_constraints.clone(),
            quad_objective,
            linear_objective: linear_objective.to_vec(),
        }
    }

    /// Turns a solver point into a certificate: renormalizes, clamps
    /// multiplier debris, then records the exact residuals of the result.
    fn certificate_from(&self, x: &[f64]) -> Result<Certificate> {
        let mut v = x.to_vec();
        // The free-P program is homogeneous, so the point can be scaled
        // at will. The solver works at rate floor 1 and reaches relative
        // accuracy; shrinking the certificate to the caller's floor
        // shrinks its absolute defect by the same factor.
        if self.layout.with_p {
            let c1 = v[self.layout.c_index(0)];
            let c2 = v[self.layout.c_index(1)];
            let c3 = v[self.layout.c_index(2)];
            let narrowest = c1.min(c2 - c1).min(c3);
            if narrowest > 0.0 {
                let alpha = self.eps / narrowest;
                for entry in &mut v {
                    *entry *= alpha;
                }
            }
        }
        let m_lo = self.layout.m_offset();
        let m_hi = self.layout.g_offset();
        for entry in &mut v[m_lo..m_hi] {
            if *entry < 0.0 && *entry >= -CLAMP_TOL {
                *entry = 0.0;
            }
        }
        let vars = self.layout.unpack(&v)?;
        let p = match (&vars.p, &self.fixed_p) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => p.clone(),
            (None, None) => {
                return Err(Error::Config(
                    "problem carries neither variable nor fixed P".into(),
                ))
            }
        };
        let residuals = self.residuals_at(&v);
        Ok(Certificate {
            p: matrix_rows(&p),
            m: vars.m.iter().map(matrix_rows).collect(),
            g: vars.g.iter().map(|g| g.iter().copied().collect()).collect(),
            c: vars.c,
            residuals,
        })
    }
}

/// Everything needed to certify the system: the quadratic certificate
/// matrix, the inequality multipliers, the complementarity multipliers,
/// and the sandwich and decrease rates. Matrices are stored row by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub p: Vec<Vec<f64>>,
    pub m: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<f64>>,
    pub c: [f64; 3],
    /// Largest eigenvalue of each matrix inequality at this point,
    /// recorded by the solver route; negative means strictly inside.
    pub residuals: [f64; 3],
}

/// Rebuilds a matrix stored row by row, rejecting ragged input.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 {
        return Err(Error::DimensionMismatch("empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl Certificate {
    pub fn p_matrix(&self) -> Result<DMatrix<f64>> {
        rows_to_matrix(&self.p)
    }

    pub fn m_matrix(&self, i: usize) -> Result<DMatrix<f64>> {
        let rows = self
            .m
            .get(i)
            .ok_or_else(|| Error::DimensionMismatch(format!("certificate lacks M{}", i + 1)))?;
        rows_to_matrix(rows)
    }

    /// The two stacked multiplier diagonals of coupling form `i`.
    pub fn g_pair(&self, i: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let g = self
            .g
            .get(i)
            .ok_or_else(|| Error::DimensionMismatch(format!("certificate lacks G{}", i + 1)))?;
        if g.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "G{} has odd length {}",
                i + 1,
                g.len()
            )));
        }
        let half = g.len() / 2;
        Ok((
            DVector::from_row_slice(&g[..half]),
            DVector::from_row_slice(&g[half..]),
        ))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_path<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }
}

/// Knobs for the interior point run.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Initial inward shift of the matrix inequalities. The solver
    /// retries at `margin / 100` and then at the exact boundary before
    /// giving up, so a too-ambitious margin costs time, not answers.
    pub margin: f64,
    pub time_limit_s: f64,
    /// Weight on `|v|^2`.
    pub quad_objective: f64,
    pub linear_objective: Vec<(usize, f64)>,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            margin: 1e-5,
            time_limit_s: 60.0,
            quad_objective: 1.0,
            linear_objective: Vec::new(),
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Feasible(Box<Certificate>),
    /// The boundary problem itself is infeasible; no certificate of this
    /// form exists at the configured normalization floor.
    Infeasible { diagnostic: String },
    /// The solver ran out of progress without a determination.
    Inconclusive { diagnostic: String },
}

/// Runs the margin ladder: each rung shifts the inequalities inward,
/// solves, and accepts the first point whose exact residuals pass. Only
/// infeasibility at the boundary itself counts as a negative answer.
pub fn solve(prob: &FeasibilityProblem, opts: &SolveOptions) -> Result<SolveOutcome> {
    if !opts.margin.is_finite() || opts.margin < 0.0 {
        return Err(Error::Config(format!(
            "margin must be finite and nonnegative, got {:e}",
            opts.margin
        )));
    }
    let backend = ClarabelBackend {
        verbose: opts.verbose,
    };
    let mut margins = vec![opts.margin];
    if opts.margin > 0.0 {
        margins.push(opts.margin / 100.0);
        margins.push(0.0);
    }
    let mut diagnostic = String::new();
    for margin in margins {
        let cone = prob.to_cone(margin, opts.quad_objective, &opts.linear_objective);
        // A returned point is accepted on its exact residuals alone, not
        // on the solver's self-reported status: a limit-hit iterate that
        // checks out is as good a certificate as a converged one.
        let (candidate, note) = match backend.solve(&cone, opts.time_limit_s)? {
            BackendStatus::Solved(x) => (Some(x), String::new()),
            BackendStatus::AlmostSolved(x) => (Some(x), "reduced accuracy".into()),
            BackendStatus::Infeasible(msg) => {
                if margin == 0.0 {
                    return Ok(SolveOutcome::Infeasible { diagnostic: msg });
                }
                diagnostic = format!("infeasible at margin {margin:e} ({msg})");
                continue;
            }
            BackendStatus::Inconclusive { reason, point } => (point, reason),
        };
        match candidate {
            Some(x) => {
                let cert = prob.certificate_from(&x)?;
                let worst = cert.residuals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                if worst <= ACCEPT_TOL {
                    return Ok(SolveOutcome::Feasible(Box::new(cert)));
                }
                diagnostic = format!(
                    "point at margin {margin:e} leaves residual {worst:e} ({note})"
                );
            }
            None => {
                diagnostic = format!("no candidate at margin {margin:e} ({note})");
            }
        }
    }
    Ok(SolveOutcome::Inconclusive { diagnostic })
}

/// Independent recomputation of every certified inequality, built from
/// the evaluation-path constructors instead of the encoder's coefficient
/// matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Largest eigenvalue of each projected matrix inequality.
    pub lmi_max_eig: [f64; 3],
    /// Smallest entry of each inequality multiplier.
    pub m_min_entry: [f64; 3],
    /// `c_1`, `c_2 - c_1`, and `c_3`; all must be positive.
    pub c_margins: [f64; 3],
    pub tol: f64,
    pub pass: bool,
}

pub fn verify(
    cert: &Certificate,
    sys: &SystemData,
    lmi: &LmiData,
    tol: f64,
) -> Result<VerificationReport> {
    sys.validate().into_result()?;
    if !tol.is_finite() || tol < 0.0 {
        return Err(Error::Config(format!(
            "verification tolerance must be nonnegative, got {tol:e}"
        )));
    }
    let p = cert.p_matrix()?;
    let (xi, v_l, v_u) = build_objective_blocks(lmi, &p, cert.c)?;
    let bases = [v_u, v_l, xi];
    let layout = VariableLayout::new(lmi.n_p, lmi.n_u, true);

    let mut lmi_max_eig = [0.0; 3];
    let mut m_min_entry = [0.0; 3];
    for i in 0..3 {
        let m = cert.m_matrix(i)?;
        if m.shape() != (layout.f_dim, layout.f_dim) {
            return Err(Error::DimensionMismatch(format!(
                "M{} is {}x{}, system needs {}",
                i + 1,
                m.nrows(),
                m.ncols(),
                layout.f_dim
            )));
        }
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::NotSymmetric {
                name: format!("M{}", i + 1),
                asymmetry: asym,
            });
        }
        let (g1, g2) = cert.g_pair(i)?;
        if g1.len() != 2 * lmi.n_u {
            return Err(Error::DimensionMismatch(format!(
                "G{} diagonal has {} entries, system needs {}",
                i + 1,
                g1.len(),
                2 * lmi.n_u
            )));
        }
        let psi = psi_of_diag(&g1, &g2)?;
        let full = &bases[i]
            + lmi.t.transpose() * &psi * &lmi.t
            + lmi.f.transpose() * &m * &lmi.f;
        lmi_max_eig[i] = max_eig(&lmi.project(&full));
        m_min_entry[i] = m.min();
    }

    let c_margins = [cert.c[0], cert.c[1] - cert.c[0], cert.c[2]];
    let pass = lmi_max_eig.iter().all(|&e| e <= tol)
        && m_min_entry.iter().all(|&e| e >= -tol)
        && c_margins.iter().all(|&e| e > 0.0)
        && cert.c.iter().all(|ci| ci.is_finite());
    Ok(VerificationReport {
        lmi_max_eig,
        m_min_entry,
        c_margins,
        tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ternary_embed;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sys_ternary() -> SystemData {
        ternary_embed(
            DMatrix::from_row_slice(2, 2, &[0.9464, 0.0957, -0.9568, 0.9033]),
            DMatrix::from_row_slice(2, 1, &[0.0049, 0.0959]),
            DMatrix::from_row_slice(1, 2, &[9.9, 0.495]),
        )
        .unwrap()
    }

    /// Decoupled loop: the input never reaches the state, so stability is
    /// exactly stability of `A`.
    fn sys_decoupled(a_diag: f64) -> SystemData {
        SystemData::new(
            DMatrix::identity(2, 2) * a_diag,
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(1, 1),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap()
    }

    fn random_point(layout: &VariableLayout, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layout.num_vars())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn layout_indices_partition_the_vector() {
        let layout = VariableLayout::new(2, 2, true);
        assert_eq!(layout.z_dim, 8);
        assert_eq!(layout.f_dim, 17);
        assert_eq!(layout.num_vars(), 36 + 3 * 153 + 3 * 8 + 3);
        let mut seen = vec![false; layout.num_vars()];
        for c in 0..8 {
            for r in 0..=c {
                seen[layout.p_index(r, c)] = true;
                assert_eq!(layout.p_index(r, c), layout.p_index(c, r));
            }
        }
        for i in 0..3 {
            for c in 0..17 {
                for r in 0..=c {
                    seen[layout.m_index(i, r, c)] = true;
                }
            }
            for j in 0..8 {
                seen[layout.g_index(i, j)] = true;
            }
            seen[layout.c_index(i)] = true;
        }
        assert!(seen.iter().all(|&s| s), "every slot is owned by an index");
    }

    #[test]
    fn pack_inverts_unpack() {
        for with_p in [true, false] {
            let layout = VariableLayout::new(2, 2, with_p);
            let mut v = random_point(&layout, 7);
            // Make symmetric slots consistent by a round trip first.
            let vars = layout.unpack(&v).unwrap();
            v = layout.pack(&vars).unwrap();
            let vars = layout.unpack(&v).unwrap();
            assert_eq!(layout.pack(&vars).unwrap(), v);
            assert_eq!(vars.p.is_some(), with_p);
        }
    }

    #[test]
    fn pack_rejects_mismatched_shapes() {
        let layout = VariableLayout::new(2, 2, true);
        let v = random_point(&layout, 3);
        let mut vars = layout.unpack(&v).unwrap();
        vars.m[1] = DMatrix::zeros(4, 4);
        assert!(matches!(
            layout.pack(&vars),
            Err(Error::DimensionMismatch(_))
        ));
        let mut vars = layout.unpack(&v).unwrap();
        vars.p = None;
        assert!(layout.pack(&vars).is_err());
    }

    #[test]
    fn encoded_blocks_are_linear_with_zero_constant() {
        let sys = sys_ternary();
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let layout = prob.layout;
        let va = random_point(&layout, 1);
        let vb = random_point(&layout, 2);
        let sum: Vec<f64> = va.iter().zip(&vb).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = va.iter().map(|a| 2.5 * a).collect();
        for i in 0..3 {
            assert_eq!(prob.matrix_at(i, &vec![0.0; layout.num_vars()]).amax(), 0.0);
            let lin = prob.matrix_at(i, &sum) - prob.matrix_at(i, &va) - prob.matrix_at(i, &vb);
            assert!(lin.amax() <= 1e-12, "block {i} is not additive");
            let hom = prob.matrix_at(i, &scaled) - prob.matrix_at(i, &va) * 2.5;
            assert!(hom.amax() <= 1e-12, "block {i} is not homogeneous");
        }
    }

    /// The encoder assembles per-variable coefficients; the verifier
    /// evaluates the same inequalities from the matrix constructors. Both
    /// routes must agree at random points.
    #[test]
    fn coefficient_and_evaluation_routes_agree() {
        let sys = sys_ternary();
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let layout = prob.layout;
        for seed in 0..5 {
            let v = random_point(&layout, seed);
            let vars = layout.unpack(&v).unwrap();
            // Symmetrize matrix slots the way pack/unpack shares them.
            let v = layout.pack(&vars).unwrap();
            let vars = layout.unpack(&v).unwrap();
            let p = vars.p.unwrap();
            let (xi, v_l, v_u) = build_objective_blocks(&lmi, &p, vars.c).unwrap();
            let bases = [v_u, v_l, xi];
            for (i, base) in bases.iter().enumerate() {
                let (g1, g2) = (
                    vars.g[i].rows(0, 4).into_owned(),
                    vars.g[i].rows(4, 4).into_owned(),
                );
                let psi = psi_of_diag(&g1, &g2).unwrap();
                let full = base
                    + lmi.t.transpose() * &psi * &lmi.t
                    + lmi.f.transpose() * &vars.m[i] * &lmi.f;
                let direct = lmi.project(&full);
                let encoded = prob.matrix_at(i, &v);
                let scale = direct.amax().max(1.0);
                assert!(
                    (&direct - &encoded).amax() <= 1e-9 * scale,
                    "routes disagree on block {i} at seed {seed}"
                );
            }
        }
    }

    #[test]
    fn fixed_p_encoding_matches_the_free_encoding() {
        let sys = sys_ternary();
        let lmi = LmiData::build(&sys).unwrap();
        let free = encode(&sys, &lmi, 1e-6).unwrap();
        let v = {
            let raw = random_point(&free.layout, 11);
            let vars = free.layout.unpack(&raw).unwrap();
            free.layout.pack(&vars).unwrap()
        };
        let vars = free.layout.unpack(&v).unwrap();
        let p = vars.p.clone().unwrap();
        let p_sym = (&p + p.transpose()) * 0.5;
        let fixed = encode_with_p(&sys, &lmi, &p_sym, 1e-6).unwrap();
        let v_mult = fixed
            .layout
            .pack(&PackedVars {
                p: None,
                m: vars.m.clone(),
                g: vars.g.clone(),
                c: vars.c,
            })
            .unwrap();
        for i in 0..3 {
            let a = free.matrix_at(i, &v);
            let b = fixed.matrix_at(i, &v_mult);
            assert!(
                (&a - &b).amax() <= 1e-10 * a.amax().max(1.0),
                "fixed-P block {i} diverges from the free encoding"
            );
        }
    }

    #[test]
    fn stable_decoupled_loop_is_certified() {
        let sys = sys_decoupled(0.5);
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let outcome = solve(&prob, &SolveOptions::default()).unwrap();
        let cert = match outcome {
            SolveOutcome::Feasible(cert) => cert,
            other => panic!("expected a certificate, got {other:?}"),
        };
        assert!(cert.residuals.iter().all(|&r| r <= ACCEPT_TOL));
        let report = verify(&cert, &sys, &lmi, 1e-7).unwrap();
        assert!(report.pass, "verification failed: {report:?}");
    }

    #[test]
    fn unstable_decoupled_loop_is_refused() {
        let sys = sys_decoupled(2.0);
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        match solve(&prob, &SolveOptions::default()).unwrap() {
            SolveOutcome::Infeasible { .. } => {}
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn verify_rejects_a_corrupted_certificate() {
        let sys = sys_decoupled(0.5);
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let cert = match solve(&prob, &SolveOptions::default()).unwrap() {
            SolveOutcome::Feasible(cert) => cert,
            other => panic!("expected a certificate, got {other:?}"),
        };
        let mut bad = (*cert).clone();
        bad.p[0][0] += 10.0;
        // Inflating P breaks the upper sandwich: report must not pass.
        let report = verify(&bad, &sys, &lmi, 1e-7).unwrap();
        assert!(!report.pass);
        let mut bad = (*cert).clone();
        bad.c[2] = -1.0;
        let report = verify(&bad, &sys, &lmi, 1e-7).unwrap();
        assert!(!report.pass);
        let mut bad = (*cert).clone();
        bad.m[0][0][1] += 1.0;
        assert!(matches!(
            verify(&bad, &sys, &lmi, 1e-7),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn certificates_round_trip_through_json() {
        let sys = sys_decoupled(0.5);
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let cert = match solve(&prob, &SolveOptions::default()).unwrap() {
            SolveOutcome::Feasible(cert) => cert,
            other => panic!("expected a certificate, got {other:?}"),
        };
        let text = cert.to_json_string().unwrap();
        let back = Certificate::from_json_str(&text).unwrap();
        assert_eq!(back.p, cert.p);
        assert_eq!(back.m, cert.m);
        assert_eq!(back.g, cert.g);
        assert_eq!(back.c, cert.c);
        let report = verify(&back, &sys, &lmi, 1e-7).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn encode_rejects_bad_floors_and_dimensions() {
        let sys = sys_ternary();
        let lmi = LmiData::build(&sys).unwrap();
        assert!(matches!(
            encode(&sys, &lmi, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            encode(&sys, &lmi, f64::NAN),
            Err(Error::Config(_))
        ));
        let p_bad = DMatrix::identity(3, 3);
        assert!(matches!(
            encode_with_p(&sys, &lmi, &p_bad, 1e-6),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
