//! Simulation of the regularized difference inclusion.
//!
//! Away from the switching surfaces every policy follows the single-valued
//! step dynamics. On a surface the inclusion offers a choice, and the
//! policies differ: `Deterministic` resolves the step strictly (its value
//! is 0 at 0), `UniformRandom` samples free components uniformly, and
//! `WorstCase` picks the extreme selection that maximizes the successor
//! norm, which is the exact worst case because the successor is affine in
//! the selection.

use std::io::Write;

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kkt;
use crate::lyapunov::LyapunovEvaluator;
use crate::model::SystemData;
use crate::{Error, Result};

/// Components with `|u_i|` at or below this tolerance count as free for
/// the set-valued policies; the deterministic policy ignores it.
pub const POLICY_SURFACE_TOL: f64 = 1e-10;

/// How the simulator resolves the step set on the switching surfaces.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionPolicy {
    /// Strict single-valued step.
    Deterministic,
    /// Free components drawn uniformly from `[0, 1]`; the seed makes runs
    /// reproducible bit for bit.
    UniformRandom { seed: u64 },
    /// Extreme selection maximizing the Euclidean norm of the successor;
    /// ties resolve to the first maximizer in lexicographic order.
    WorstCase,
}

/// A simulated run: `states` and `selections` both hold `steps + 1`
/// entries; `selections[j]` is the selection the policy takes at
/// `states[j]` (the final one is recorded but never applied).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub selections: Vec<DVector<f64>>,
    /// `W` along the run, filled in by [`attach_lyapunov`].
    pub lyapunov: Option<Vec<f64>>,
}

fn select(
    sys: &SystemData,
    x: &DVector<f64>,
    policy: &SelectionPolicy,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let u = sys.input(x);
    match policy {
        SelectionPolicy::Deterministic => kkt::step(&u),
        SelectionPolicy::UniformRandom { .. } => DVector::from_fn(u.len(), |i, _| {
            if u[i] > POLICY_SURFACE_TOL {
                1.0
            } else if u[i] < -POLICY_SURFACE_TOL {
                0.0
            } else {
                rng.random::<f64>()
            }
        }),
        SelectionPolicy::WorstCase => worst_case(sys, x, &u),
    }
}

fn worst_case(sys: &SystemData, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(u.len());
    let mut free = Vec::new();
    for i in 0..u.len() {
        if u[i].abs() <= POLICY_SURFACE_TOL {
            free.push(i);
        } else if u[i] > 0.0 {
            s[i] = 1.0;
        }
    }
    if free.is_empty() {
        return s;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_s = s.clone();
    for mask in 0u64..(1 << free.len()) {
        let mut cand = s.clone();
        for (j, &i) in free.iter().enumerate() {
            cand[i] = if mask >> j & 1 == 1 { 1.0 } else { 0.0 };
        }
        let norm = sys.successor(x, &cand).norm_squared();
        if norm > best {
            best = norm;
            best_s = cand;
        }
    }
    best_s
}

/// Runs the inclusion for `steps` steps from `x0` under the given policy.
pub fn simulate(
    sys: &SystemData,
    x0: &DVector<f64>,
    steps: usize,
    policy: &SelectionPolicy,
) -> Result<Trajectory> {
    sys.validate().into_result()?;
    if x0.len() != sys.n_p() {
        return Err(Error::DimensionMismatch(format!(
            "initial state length {} does not match n_p = {}",
            x0.len(),
            sys.n_p()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let seed = match policy {
        SelectionPolicy::UniformRandom { seed } => *seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut selections = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for j in 0..=steps {
        let s = select(sys, &x, policy, &mut rng);
        states.push(x.clone());
        selections.push(s.clone());
        if j < steps {
            x = sys.successor(&x, &s);
        }
    }
    Ok(Trajectory {
        states,
        selections,
        lyapunov: None,
    })
}

/// Evaluates `W` along the trajectory and stores it in place.
pub fn attach_lyapunov(traj: &mut Trajectory, ev: &LyapunovEvaluator) -> Result<()> {
    let mut values = Vec::with_capacity(traj.states.len());
    for x in &traj.states {
        values.push(ev.sup_v(x)?.value);
    }
    traj.lyapunov = Some(values);
    Ok(())
}

/// Least-squares exponential envelope of a trajectory: the fit of
/// `log |x(j)|` against `j` over the prefix with `|x(j)| > 1e-12` gives
/// `|x(j)| <= kappa |x(0)| exp(-lambda j)` up to the reported residual.
#[derive(Debug, Clone, Copy)]
pub struct DecayEstimate {
    pub kappa: f64,
    pub lambda: f64,
    /// Root-mean-square log-domain deviation from the fitted line. Spiral
    /// dynamics oscillate around their envelope, so the peak deviation
    /// stays large no matter how long the sample; the mean square is the
    /// right summary of fit quality.
    pub fit_residual: f64,
    /// Whether the fitted rate certifies contraction (`lambda > 0`).
    pub pass: bool,
}

/// Floor below which samples stop contributing to the decay fit.
pub const DECAY_FLOOR: f64 = 1e-12;

pub fn fit_decay(traj: &Trajectory) -> Result<DecayEstimate> {
    if traj.states.len() < 3 {
        return Err(Error::DegenerateTrajectory(format!(
            "need at least 3 samples, got {}",
            traj.states.len()
        )));
    }
    let norms: Vec<f64> = traj.states.iter().map(|x| x.norm()).collect();
    if norms[0] <= DECAY_FLOOR {
        return Err(Error::DegenerateTrajectory(format!(
            "initial norm {:e} is below the floor",
            norms[0]
        )));
    }
    let prefix: Vec<f64> = norms.iter().copied().take_while(|&n| n > DECAY_FLOOR).collect();
    if prefix.len() < 2 {
        return Err(Error::DegenerateTrajectory(
            "fewer than 2 samples above the floor".into(),
        ));
    }
    let n = prefix.len() as f64;
    let ys: Vec<f64> = prefix.iter().map(|v| v.ln()).collect();
    let sum_j: f64 = (0..prefix.len()).map(|j| j as f64).sum();
    let sum_jj: f64 = (0..prefix.len()).map(|j| (j * j) as f64).sum();
    let sum_y: f64 = ys.iter().sum();
    let sum_jy: f64 = ys.iter().enumerate().map(|(j, y)| j as f64 * y).sum();
    let denom = n * sum_jj - sum_j * sum_j;
    if denom == 0.0 {
        return Err(Error::DegenerateTrajectory(
            "decay fit is underdetermined".into(),
        ));
    }
    let slope = (n * sum_jy - sum_j * sum_y) / denom;
    let intercept = (sum_y - slope * sum_j) / n;
    let fit_residual = (ys
        .iter()
        .enumerate()
        .map(|(j, y)| (y - (intercept + slope * j as f64)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let lambda = -slope;
    let kappa = intercept.exp() / norms[0];
    Ok(DecayEstimate {
        kappa,
        lambda,
        fit_residual,
        pass: lambda > 0.0,
    })
}

impl Trajectory {
    /// CSV with columns `j`, the state, the selection, and `w` when
    /// attached; floats carry 12 significant digits so identical runs
    /// produce identical bytes.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n_p = self.states.first().map_or(0, |x| x.len());
        let n_u = self.selections.first().map_or(0, |s| s.len());
        let mut header = String::from("j");
        for i in 1..=n_p {
            header.push_str(&format!(",x{i}"));
        }
        for i in 1..=n_u {
            header.push_str(&format!(",s{i}"));
        }
        if self.lyapunov.is_some() {
            header.push_str(",w");
        }
        writeln!(out, "{header}")?;
        for j in 0..self.states.len() {
            let mut line = format!("{j}");
            for v in self.states[j].iter() {
                line.push_str(&format!(",{v:.11e}"));
            }
            for v in self.selections[j].iter() {
                line.push_str(&format!(",{v:.11e}"));
            }
            if let Some(w) = &self.lyapunov {
                line.push_str(&format!(",{:.11e}", w[j]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}
