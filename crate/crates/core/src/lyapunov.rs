//! Set-valued Lyapunov function evaluation.
//!
//! A certificate matrix `P` induces the set-valued function
//!
//! ```text
//! V(x) = { z' P z : z = (x, s, lambda(u)),  s in step_set(u),  u = K x + d }
//! ```
//!
//! which is a single quadratic value away from the switching surfaces and a
//! closed interval image on them, where some components of `s` range over
//! `[0, 1]`. The pointwise supremum `W(x) = sup V(x)` is what the sandwich
//! and decrease guarantees bound. Because `z` is affine in the free
//! components of `s`, the supremum is a box-constrained quadratic maximum;
//! it is computed exactly by enumerating the faces of the box, taking
//! interior stationary points where they exist and corners otherwise, with
//! a dense grid and coordinate ascent as numerical backstops.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::kkt;
use crate::model::SystemData;
use crate::{Error, Result};

/// Components with `|u_i|` at or below this tolerance count as being on the
/// switching surface when maximizing; membership tests in `eval_at` stay
/// exact on the sign of `u`.
pub const SURFACE_TOL: f64 = 1e-10;

/// Number of grid points per free component used as a numerical backstop
/// when at most two components are free.
pub const DEFAULT_INTERVAL_GRID: usize = 101;

/// Evaluates one certificate's set-valued Lyapunov function.
#[derive(Debug, Clone)]
pub struct LyapunovEvaluator {
    sys: SystemData,
    p: DMatrix<f64>,
    /// Grid density of the backstop scan; exposed for tests and tooling.
    pub interval_grid: usize,
}

/// Supremum of `V` at a state together with a maximizing selection.
#[derive(Debug, Clone)]
pub struct SupResult {
    pub value: f64,
    pub selection: DVector<f64>,
}

/// Rectangle in the plane for level-set scans.
#[derive(Debug, Clone, Copy)]
pub struct GridBounds {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
}

/// `W` sampled on a rectangular grid, row-major with `x1` varying fastest.
#[derive(Debug, Clone)]
pub struct LevelGrid {
    pub bounds: GridBounds,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            a * (1.0 - t) + b * t
        })
        .collect()
}

impl LyapunovEvaluator {
    /// `p` must be `(n_p + 3 n_u)` square and symmetric to within `1e-12`.
    pub fn new(sys: &SystemData, p: &DMatrix<f64>) -> Result<Self> {
        sys.validate().into_result()?;
        let z_dim = sys.n_p() + 3 * sys.n_u();
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
        Ok(LyapunovEvaluator {
            sys: sys.clone(),
            p: (p + p.transpose()) * 0.5,
            interval_grid: DEFAULT_INTERVAL_GRID,
        })
    }

    pub fn system(&self) -> &SystemData {
        &self.sys
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Certificate coordinates `z = (x, s, lambda(u))` for a valid selection.
    fn z_vector(&self, x: &DVector<f64>, s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (n_p, n_u) = (self.sys.n_p(), self.sys.n_u());
        let (l1, l2) = kkt::lambda_bar(u);
        let mut z = DVector::zeros(n_p + 3 * n_u);
        z.rows_mut(0, n_p).copy_from(x);
        z.rows_mut(n_p, n_u).copy_from(s);
        z.rows_mut(n_p + n_u, n_u).copy_from(&l1);
        z.rows_mut(n_p + 2 * n_u, n_u).copy_from(&l2);
        z
    }

    /// One member of `V(x)`: errors unless `s` is a selection of the step
    /// set at `K x + d` (exact sign test, `1e-12` on the interval bounds).
    pub fn eval_at(&self, x: &DVector<f64>, s: &DVector<f64>) -> Result<f64> {
        if x.len() != self.sys.n_p() {
            return Err(Error::DimensionMismatch(format!(
                "state length {} does not match n_p = {}",
                x.len(),
                self.sys.n_p()
            )));
        }
        let u = self.sys.input(x);
        kkt::build_chi(&u, s)?;
        let z = self.z_vector(x, s, &u);
        Ok(z.dot(&(&self.p * &z)))
    }

    /// `W(x) = sup V(x)` with a maximizing selection. Components within
    /// [`SURFACE_TOL`] of the switching surface are maximized over `[0, 1]`.
    pub fn sup_v(&self, x: &DVector<f64>) -> Result<SupResult> {
        if x.len() != self.sys.n_p() {
            return Err(Error::DimensionMismatch(format!(
                "state length {} does not match n_p = {}",
                x.len(),
                self.sys.n_p()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state".into()));
        }
        let n_u = self.sys.n_u();
        let u = self.sys.input(x);
        let mut s = DVector::zeros(n_u);
        let mut free = Vec::new();
        for i in 0..n_u {
            if u[i].abs() <= SURFACE_TOL {
                free.push(i);
            } else if u[i] > 0.0 {
                s[i] = 1.0;
            }
        }
        if free.is_empty() {
            let z = self.z_vector(x, &s, &u);
            return Ok(SupResult {
                value: z.dot(&(&self.p * &z)),
                selection: s,
            });
        }

        // Quadratic in the free coordinates t: z = z0 + N t with N the
        // 0/1 injection into the s-block, so
        //   q(t) = c0 + 2 b' t + t' H t.
        let m = free.len();
        let n_p = self.sys.n_p();
        let z0 = self.z_vector(x, &s, &u);
        let mut nmat = DMatrix::zeros(z0.len(), m);
        for (j, &i) in free.iter().enumerate() {
            nmat[(n_p + i, j)] = 1.0;
        }
        let h = nmat.transpose() * &self.p * &nmat;
        let b = nmat.transpose() * (&self.p * &z0);
        let c0 = z0.dot(&(&self.p * &z0));
        let q = |t: &DVector<f64>| c0 + 2.0 * b.dot(t) + t.dot(&(&h * t));

        let mut candidates: Vec<DVector<f64>> = Vec::new();
        if m <= 8 {
            face_candidates(&h, &b, m, &mut candidates);
        } else {
            corner_candidates(m, &mut candidates);
        }
        if m <= 2 {
            grid_candidates(m, self.interval_grid.max(2), &mut candidates);
        }

        let mut best_t = candidates[0].clone();
        let mut best = q(&best_t);
        for t in &candidates[1..] {
            let v = q(t);
            if v > best {
                best = v;
                best_t = t.clone();
            }
        }
        coordinate_ascent(&h, &b, &q, &mut best_t, &mut best);

        for (j, &i) in free.iter().enumerate() {
            s[i] = best_t[j];
        }
        Ok(SupResult {
            value: best,
            selection: s,
        })
    }

    /// Samples `W` on a rectangle; planar systems only.
    pub fn level_grid(&self, bounds: &GridBounds, res: (usize, usize)) -> Result<LevelGrid> {
        if self.sys.n_p() != 2 {
            return Err(Error::NonPlanarState(self.sys.n_p()));
        }
        let (nx, ny) = res;
        if nx == 0 || ny == 0 {
            return Err(Error::Config("grid resolution must be at least 1".into()));
        }
        if !(bounds.x1_min <= bounds.x1_max && bounds.x2_min <= bounds.x2_max) {
            return Err(Error::Config("grid bounds must be ordered".into()));
        }
        let xs = linspace(bounds.x1_min, bounds.x1_max, nx);
        let ys = linspace(bounds.x2_min, bounds.x2_max, ny);
        let mut values = Vec::with_capacity(nx * ny);
        for &x2 in &ys {
            for &x1 in &xs {
                let x = DVector::from_row_slice(&[x1, x2]);
                values.push(self.sup_v(&x)?.value);
            }
        }
        Ok(LevelGrid {
            bounds: *bounds,
            nx,
            ny,
            values,
        })
    }
}

/// Stationary points of every face of the unit box, plus all corners.
fn face_candidates(h: &DMatrix<f64>, b: &DVector<f64>, m: usize, out: &mut Vec<DVector<f64>>) {
    let mut code = vec![0u8; m];
    loop {
        let free: Vec<usize> = (0..m).filter(|&i| code[i] == 2).collect();
        let mut t = DVector::zeros(m);
        for i in 0..m {
            if code[i] == 1 {
                t[i] = 1.0;
            }
        }
        if free.is_empty() {
            out.push(t);
        } else {
            // Stationary point of the restriction: h_ff y = -(b_f + h_fc t_c).
            let mf = free.len();
            let mut hff = DMatrix::zeros(mf, mf);
            let mut rhs = DVector::zeros(mf);
            for (a, &i) in free.iter().enumerate() {
                rhs[a] = -b[i];
                for j in 0..m {
                    if code[j] != 2 {
                        rhs[a] -= h[(i, j)] * t[j];
                    }
                }
                for (c, &j) in free.iter().enumerate() {
                    hff[(a, c)] = h[(i, j)];
                }
            }
            if let Some(y) = hff.full_piv_lu().solve(&rhs) {
                if y.iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0) {
                    for (a, &i) in free.iter().enumerate() {
                        t[i] = y[a];
                    }
                    out.push(t);
                }
            }
        }
        // Next ternary code.
        let mut k = 0;
        loop {
            if k == m {
                return;
            }
            code[k] += 1;
            if code[k] <= 2 {
                break;
            }
            code[k] = 0;
            k += 1;
        }
    }
}

fn corner_candidates(m: usize, out: &mut Vec<DVector<f64>>) {
    for mask in 0u64..(1 << m) {
        out.push(DVector::from_fn(m, |i, _| {
            if mask >> i & 1 == 1 {
                1.0
            } else {
                0.0
            }
        }));
    }
}

fn grid_candidates(m: usize, n: usize, out: &mut Vec<DVector<f64>>) {
    let pts = linspace(0.0, 1.0, n);
    match m {
        1 => {
            for &a in &pts {
                out.push(DVector::from_row_slice(&[a]));
            }
        }
        2 => {
            for &a in &pts {
                for &b in &pts {
                    out.push(DVector::from_row_slice(&[a, b]));
                }
            }
        }
        _ => {}
    }
}

/// Exact per-coordinate maximization sweeps; each accepted move strictly
/// increases `q`, so the polish can only improve a candidate.
fn coordinate_ascent(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &dyn Fn(&DVector<f64>) -> f64,
    t: &mut DVector<f64>,
    best: &mut f64,
) {
    let m = t.len();
    for _ in 0..3 {
        let mut improved = false;
        for i in 0..m {
            // Along coordinate i the profile is h_ii t_i^2 + 2 (b_i + cross) t_i
            // with cross = sum_{j != i} h_ij t_j: concave profiles peak at the
            // clamped stationary point, all others at an endpoint.
            let cross = b[i] + h.row(i).transpose().dot(&*t) - h[(i, i)] * t[i];
            let mut cands = vec![0.0, 1.0];
            if h[(i, i)] < 0.0 {
                cands.push((-cross / h[(i, i)]).clamp(0.0, 1.0));
            }
            for cand in cands {
                let old = t[i];
                if cand == old {
                    continue;
                }
                t[i] = cand;
                let v = q(t);
                if v > *best {
                    *best = v;
                    improved = true;
                } else {
                    t[i] = old;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

impl LevelGrid {
    /// CSV with columns `x1, x2, w`, 12 significant digits, `x1` fastest.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x1,x2,w")?;
        let xs = linspace(self.bounds.x1_min, self.bounds.x1_max, self.nx);
        let ys = linspace(self.bounds.x2_min, self.bounds.x2_max, self.ny);
        for (iy, &x2) in ys.iter().enumerate() {
            for (ix, &x1) in xs.iter().enumerate() {
                writeln!(
                    out,
                    "{:.11e},{:.11e},{:.11e}",
                    x1,
                    x2,
                    self.values[iy * self.nx + ix]
                )?;
            }
        }
        Ok(())
    }
}
