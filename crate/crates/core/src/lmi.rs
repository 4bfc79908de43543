//! Lifted relation matrices for the stability conditions.
//!
//! For a state `x`, a selection `s` of the step set at `u = K x + d`, and a
//! selection `s_psi` at the successor input, the lifted vector
//!
//! ```text
//! theta = (x, chi(u, s), chi(u_psi, s_psi), 1)
//! ```
//!
//! collects state, selections, multipliers, and an affine coordinate. Every
//! valid theta satisfies exact linear relations `W theta = 0` (feedback
//! structure and KKT stationarity at both times), componentwise
//! inequalities `F theta >= 0` (multiplier and interval signs), and
//! complementarity products that vanish on `T theta`. The stability
//! conditions are then three matrix inequalities on the kernel of `W`,
//! assembled here from selector blocks and an orthonormal kernel basis.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::kkt;
use crate::model::SystemData;
use crate::{Error, Result};

/// Relative rank threshold used when separating the kernel of `W` from its
/// row space: singular values at or below `max(m, n) * sigma_max * tol`
/// count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Orthonormal kernel basis of a matrix together with the rank decision
/// that produced it.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    /// Columns form an orthonormal basis of the kernel; `n x k`.
    pub basis: DMatrix<f64>,
    /// Numerical rank of the input.
    pub rank: usize,
    /// Largest singular value of the input.
    pub sigma_max: f64,
    /// Absolute threshold below which singular values counted as zero.
    pub threshold: f64,
}

impl KernelBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// A trivial kernel makes the projected conditions vacuous.
    pub fn is_degenerate(&self) -> bool {
        self.basis.ncols() == 0
    }
}

/// All constant matrices of the lifted stability conditions for one system.
#[derive(Debug, Clone)]
pub struct LmiData {
    pub n_p: usize,
    pub n_u: usize,
    /// Lifted dimension `n_p + 10 n_u + 1`.
    pub n_theta: usize,
    /// Maps `pi1 theta` to the successor certificate coordinates
    /// `(A x + B Delta s, s_psi, lambda(u_psi))`.
    pub v_plus: DMatrix<f64>,
    /// Selects `(x, s, s_psi, lambda(u), lambda(u_psi))` from theta.
    pub pi1: DMatrix<f64>,
    /// Selects the certificate coordinates `(x, s, lambda(u))` from theta.
    pub pi2: DMatrix<f64>,
    /// Componentwise nonnegative functional of theta, `(8 n_u + 1) x n_theta`.
    pub f: DMatrix<f64>,
    /// Quadratic selector with `theta' x_quad theta = |x|^2`.
    pub x_quad: DMatrix<f64>,
    /// Selects the stacked `(chi, chi_psi)` block from theta.
    pub t: DMatrix<f64>,
    /// Affine feedback and interval relations; `r theta = 0` on valid theta.
    pub r: DMatrix<f64>,
    /// KKT stationarity selector on one chi block.
    pub l: DMatrix<f64>,
    /// Stacked exact relations `[r; (I_2 Kron l) t]`; `w theta = 0`.
    pub w: DMatrix<f64>,
    /// Orthonormal basis of the kernel of `w`, `n_theta x k`.
    pub w_perp: DMatrix<f64>,
    /// Rank decision behind `w_perp`.
    pub kernel: KernelBasis,
}

fn set_block(m: &mut DMatrix<f64>, r0: usize, c0: usize, block: &DMatrix<f64>) {
    m.view_mut((r0, c0), block.shape()).copy_from(block);
}

/// Selector `[0 0 I 0 0]` picking `s` out of one chi block.
pub fn h_selector(n_u: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n_u, 5 * n_u);
    set_block(&mut h, 0, 2 * n_u, &DMatrix::identity(n_u, n_u));
    h
}

/// Selector `[0 0 0 0 I]` picking `u` out of one chi block.
pub fn z_selector(n_u: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n_u, 5 * n_u);
    set_block(&mut z, 0, 4 * n_u, &DMatrix::identity(n_u, n_u));
    z
}

/// Selector `[0 0 I I 0]` summing `s` and its complement; equals one on
/// every valid chi block.
pub fn e_selector(n_u: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n_u, 5 * n_u);
    set_block(&mut e, 0, 2 * n_u, &DMatrix::identity(n_u, n_u));
    set_block(&mut e, 0, 3 * n_u, &DMatrix::identity(n_u, n_u));
    e
}

fn build_v_plus(sys: &SystemData) -> DMatrix<f64> {
    let (n_p, n_u) = (sys.n_p(), sys.n_u());
    // Column blocks (x, s, s_psi, lambda(u), lambda(u_psi)); row blocks
    // (successor state, s_psi, lambda(u_psi)).
    let mut v = DMatrix::zeros(n_p + 3 * n_u, n_p + 6 * n_u);
    set_block(&mut v, 0, 0, &sys.a);
    set_block(&mut v, 0, n_p, &(&sys.b * &sys.delta));
    set_block(&mut v, n_p, n_p + n_u, &DMatrix::identity(n_u, n_u));
    set_block(
        &mut v,
        n_p + n_u,
        n_p + 4 * n_u,
        &DMatrix::identity(2 * n_u, 2 * n_u),
    );
    v
}

fn build_pi1(n_p: usize, n_u: usize) -> DMatrix<f64> {
    let n_theta = n_p + 10 * n_u + 1;
    let h = h_selector(n_u);
    let mut pi1 = DMatrix::zeros(n_p + 6 * n_u, n_theta);
    // x
    set_block(&mut pi1, 0, 0, &DMatrix::identity(n_p, n_p));
    // s from chi, s_psi from chi_psi
    set_block(&mut pi1, n_p, n_p, &h);
    set_block(&mut pi1, n_p + n_u, n_p + 5 * n_u, &h);
    // multipliers lead both chi blocks
    set_block(
        &mut pi1,
        n_p + 2 * n_u,
        n_p,
        &DMatrix::identity(2 * n_u, 2 * n_u),
    );
    set_block(
        &mut pi1,
        n_p + 4 * n_u,
        n_p + 5 * n_u,
        &DMatrix::identity(2 * n_u, 2 * n_u),
    );
    pi1
}

fn build_pi2(n_p: usize, n_u: usize, pi1: &DMatrix<f64>) -> DMatrix<f64> {
    // Drop s_psi and lambda(u_psi) from (x, s, s_psi, lambda(u), lambda(u_psi)).
    let mut s2 = DMatrix::zeros(n_p + 3 * n_u, n_p + 6 * n_u);
    set_block(&mut s2, 0, 0, &DMatrix::identity(n_p + n_u, n_p + n_u));
    set_block(
        &mut s2,
        n_p + n_u,
        n_p + 2 * n_u,
        &DMatrix::identity(2 * n_u, 2 * n_u),
    );
    s2 * pi1
}

fn build_f(n_p: usize, n_u: usize) -> DMatrix<f64> {
    let n_theta = n_p + 10 * n_u + 1;
    let mut f = DMatrix::zeros(8 * n_u + 1, n_theta);
    // Multipliers and interval bounds of both chi blocks, then the affine one.
    set_block(&mut f, 0, n_p, &DMatrix::identity(4 * n_u, 4 * n_u));
    set_block(
        &mut f,
        4 * n_u,
        n_p + 5 * n_u,
        &DMatrix::identity(4 * n_u, 4 * n_u),
    );
    f[(8 * n_u, n_theta - 1)] = 1.0;
    f
}

fn build_x_quad(n_p: usize, n_theta: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n_theta, n_theta);
    set_block(&mut x, 0, 0, &DMatrix::identity(n_p, n_p));
    x
}

fn build_t(n_p: usize, n_u: usize) -> DMatrix<f64> {
    let n_theta = n_p + 10 * n_u + 1;
    let mut t = DMatrix::zeros(10 * n_u, n_theta);
    set_block(&mut t, 0, n_p, &DMatrix::identity(10 * n_u, 10 * n_u));
    t
}

fn build_r(sys: &SystemData) -> DMatrix<f64> {
    let (n_p, n_u) = (sys.n_p(), sys.n_u());
    let n_theta = n_p + 10 * n_u + 1;
    let z = z_selector(n_u);
    let e = e_selector(n_u);
    let mut r = DMatrix::zeros(4 * n_u, n_theta);
    // u - (K x + d) = 0 read as K x - Z chi + d = 0.
    set_block(&mut r, 0, 0, &sys.k);
    set_block(&mut r, 0, n_p, &(-&z));
    set_block(&mut r, 0, n_theta - 1, &DMatrix::from_column_slice(n_u, 1, sys.d.as_slice()));
    // u_psi - (K (A x + B Delta s) + d) = 0.
    set_block(&mut r, n_u, 0, &(&sys.k * &sys.a));
    set_block(
        &mut r,
        n_u,
        n_p,
        &(&sys.k * &sys.b * &sys.delta * h_selector(n_u)),
    );
    set_block(&mut r, n_u, n_p + 5 * n_u, &(-&z));
    set_block(
        &mut r,
        n_u,
        n_theta - 1,
        &DMatrix::from_column_slice(n_u, 1, sys.d.as_slice()),
    );
    // s + (1 - s) = 1 in both chi blocks.
    set_block(&mut r, 2 * n_u, n_p, &e);
    set_block(
        &mut r,
        2 * n_u,
        n_theta - 1,
        &DMatrix::from_element(n_u, 1, -1.0),
    );
    set_block(&mut r, 3 * n_u, n_p + 5 * n_u, &e);
    set_block(
        &mut r,
        3 * n_u,
        n_theta - 1,
        &DMatrix::from_element(n_u, 1, -1.0),
    );
    r
}

/// Orthonormal kernel basis with the default rank threshold.
pub fn kernel_basis(w: &DMatrix<f64>) -> KernelBasis {
    kernel_basis_with_tol(w, DEFAULT_RANK_TOL)
}

/// Orthonormal kernel basis: rank from singular values, basis from a full
/// column-pivoted Householder QR of the transpose. The QR route keeps
/// `|w * basis|` at working precision, which a Gram-matrix eigenbasis
/// does not.
pub fn kernel_basis_with_tol(w: &DMatrix<f64>, rel_tol: f64) -> KernelBasis {
    let (m, n) = w.shape();
    let svals = w.clone().svd(false, false).singular_values;
    let sigma_max = svals.iter().copied().fold(0.0_f64, f64::max);
    let threshold = m.max(n) as f64 * sigma_max * rel_tol;
    let rank = svals.iter().filter(|&&s| s > threshold).count();
    let kdim = n - rank;
    if kdim == 0 {
        return KernelBasis {
            basis: DMatrix::zeros(n, 0),
            rank,
            sigma_max,
            threshold,
        };
    }
    let (q, _, _) = pivoted_qr_full(&w.transpose());
    KernelBasis {
        basis: q.columns(rank, kdim).into_owned(),
        rank,
        sigma_max,
        threshold,
    }
}

/// Column-pivoted Householder QR with the full square `Q` accumulated, so
/// the trailing columns span the orthogonal complement of the column
/// space. Returns `(q, r, perm)` with `a[:, perm] = q r`.
fn pivoted_qr_full(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let mut q = DMatrix::<f64>::identity(m, m);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..m.min(n) {
        let mut best = k;
        let mut best_norm = 0.0;
        for j in k..n {
            let nj = r.view((k, j), (m - k, 1)).norm();
            if nj > best_norm {
                best_norm = nj;
                best = j;
            }
        }
        if best_norm == 0.0 {
            break;
        }
        if best != k {
            r.swap_columns(k, best);
            perm.swap(k, best);
        }
        let mut v: DVector<f64> = r.view((k, k), (m - k, 1)).into_owned().column(0).into_owned();
        let alpha = -v[0].signum() * v.norm();
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm == 0.0 {
            continue;
        }
        v /= vnorm;
        let sub = r.view((k, k), (m - k, n - k)).into_owned();
        let correction = &v * (v.transpose() * &sub) * 2.0;
        r.view_mut((k, k), (m - k, n - k)).copy_from(&(sub - correction));
        r[(k, k)] = alpha;
        for i in k + 1..m {
            r[(i, k)] = 0.0;
        }
        let qsub = q.view((0, k), (m, m - k)).into_owned();
        let qcorr = (&qsub * &v) * v.transpose() * 2.0;
        q.view_mut((0, k), (m, m - k)).copy_from(&(qsub - qcorr));
    }
    (q, r, perm)
}

impl LmiData {
    /// Builds every relation matrix and the kernel basis with the default
    /// rank threshold.
    pub fn build(sys: &SystemData) -> Result<Self> {
        Self::build_with_rank_tol(sys, DEFAULT_RANK_TOL)
    }

    pub fn build_with_rank_tol(sys: &SystemData, rank_tol: f64) -> Result<Self> {
        sys.validate().into_result()?;
        let (n_p, n_u) = (sys.n_p(), sys.n_u());
        let n_theta = n_p + 10 * n_u + 1;
        let v_plus = build_v_plus(sys);
        let pi1 = build_pi1(n_p, n_u);
        let pi2 = build_pi2(n_p, n_u, &pi1);
        let f = build_f(n_p, n_u);
        let x_quad = build_x_quad(n_p, n_theta);
        let t = build_t(n_p, n_u);
        let r = build_r(sys);
        let l = kkt::build_l(n_u);
        let stationarity = DMatrix::identity(2, 2).kronecker(&l) * &t;
        let mut w = DMatrix::zeros(6 * n_u, n_theta);
        set_block(&mut w, 0, 0, &r);
        set_block(&mut w, 4 * n_u, 0, &stationarity);
        let kernel = kernel_basis_with_tol(&w, rank_tol);
        let w_perp = kernel.basis.clone();
        Ok(LmiData {
            n_p,
            n_u,
            n_theta,
            v_plus,
            pi1,
            pi2,
            f,
            x_quad,
            t,
            r,
            l,
            w,
            w_perp,
            kernel,
        })
    }

    /// Projects a symmetric form onto the kernel of `w`.
    pub fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.w_perp.transpose() * m * &self.w_perp
    }

    /// Dumps every matrix as row-major arrays for cross-implementation
    /// diffing.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "n_p": self.n_p,
            "n_u": self.n_u,
            "n_theta": self.n_theta,
            "V_plus": matrix_rows(&self.v_plus),
            "Pi1": matrix_rows(&self.pi1),
            "Pi2": matrix_rows(&self.pi2),
            "F": matrix_rows(&self.f),
            "X": matrix_rows(&self.x_quad),
            "T": matrix_rows(&self.t),
            "R": matrix_rows(&self.r),
            "L": matrix_rows(&self.l),
            "W": matrix_rows(&self.w),
            "W_perp": matrix_rows(&self.w_perp),
            "rank": self.kernel.rank,
        })
    }

    pub fn dump_json<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Row-major copy of a matrix for JSON output.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Lifted vector `theta = (x, chi(u, s), chi(u_psi, s_psi), 1)`. Both
/// selections are checked for membership in their step sets.
pub fn build_theta(
    sys: &SystemData,
    x: &DVector<f64>,
    s: &DVector<f64>,
    s_psi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n_p, n_u) = (sys.n_p(), sys.n_u());
    if x.len() != n_p {
        return Err(Error::DimensionMismatch(format!(
            "state length {} does not match n_p = {}",
            x.len(),
            n_p
        )));
    }
    let u = sys.input(x);
    let chi = kkt::build_chi(&u, s)?;
    let g = sys.successor(x, s);
    let u_psi = sys.input(&g);
    let chi_psi = kkt::build_chi(&u_psi, s_psi)?;
    let n_theta = n_p + 10 * n_u + 1;
    let mut theta = DVector::zeros(n_theta);
    theta.rows_mut(0, n_p).copy_from(x);
    theta.rows_mut(n_p, 5 * n_u).copy_from(&chi);
    theta.rows_mut(n_p + 5 * n_u, 5 * n_u).copy_from(&chi_psi);
    theta[n_theta - 1] = 1.0;
    Ok(theta)
}

/// Complementarity coupling form on `(chi, chi_psi)` coordinates built
/// from two diagonal multiplier pairs given by their diagonals. The
/// quadratic form `(T theta)' psi (T theta)` vanishes on valid theta.
pub fn psi_of_diag(g1: &DVector<f64>, g2: &DVector<f64>) -> Result<DMatrix<f64>> {
    if g1.len() != g2.len() {
        return Err(Error::DimensionMismatch(format!(
            "multiplier diagonals differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    if !g1.len().is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!(
            "multiplier diagonal length {} is not even",
            g1.len()
        )));
    }
    let two_nu = g1.len();
    let block = 5 * two_nu / 2;
    let mut psi = DMatrix::zeros(2 * block, 2 * block);
    for (j, g) in [g1, g2].into_iter().enumerate() {
        let base = j * block;
        for k in 0..two_nu {
            // Couples multiplier k with its complementary slack s or 1 - s.
            psi[(base + k, base + two_nu + k)] += g[k];
            psi[(base + two_nu + k, base + k)] += g[k];
        }
    }
    Ok(psi)
}

/// Same as [`psi_of_diag`] but takes the multiplier pairs as matrices and
/// rejects non-diagonal input.
pub fn psi_of(g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    for (name, g) in [("G1", g1), ("G2", g2)] {
        if g.nrows() != g.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{name} must be square, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if i != j && g[(i, j)] != 0.0 {
                    return Err(Error::NotDiagonal(name.into()));
                }
            }
        }
    }
    psi_of_diag(&g1.diagonal(), &g2.diagonal())
}

/// The three symmetric forms the multiplier search decorates: the decrease
/// form `xi`, the lower sandwich form `v_l`, and the upper sandwich form
/// `v_u`. `p` must be symmetric to within `1e-12`; `c = (c1, c2, c3)` are
/// the sandwich and decrease rates.
pub fn build_objective_blocks(
    lmi: &LmiData,
    p: &DMatrix<f64>,
    c: [f64; 3],
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let z_dim = lmi.n_p + 3 * lmi.n_u;
    if p.shape() != (z_dim, z_dim) {
        return Err(Error::DimensionMismatch(format!(
            "P must be {z_dim}x{z_dim}, got {}x{}",
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
    if c.iter().any(|ci| !ci.is_finite()) {
        return Err(Error::NonFinite("c rates".into()));
    }
    let p = (p + p.transpose()) * 0.5;
    let vp1 = &lmi.v_plus * &lmi.pi1;
    let lift = vp1.transpose() * &p * &vp1;
    let hold = lmi.pi2.transpose() * &p * &lmi.pi2;
    let xi = &lift - &hold + c[2] * &lmi.x_quad;
    let v_l = -&hold + c[0] * &lmi.x_quad;
    let v_u = &hold - c[1] * &lmi.x_quad;
    Ok((xi, v_l, v_u))
}
