//! KKT characterization of the componentwise set-valued step map.
//!
//! The single-valued step is `s(v) = 1` for `v > 0` and `0` otherwise. Its
//! set-valued regularization fills the jump: on the switching surface
//! `v_i = 0` the i-th component may take any value in `[0, 1]`. A vector
//! `s` is a selection of the step set at `u` exactly when there exist
//! multipliers `l1, l2 >= 0` with
//!
//! ```text
//! -u - l1 + l2 = 0,    l1 .* s = 0,    l2 .* (1 - s) = 0,    0 <= s <= 1,
//! ```
//!
//! and the multipliers have the closed form `l1 = ramp(-u)`, `l2 = ramp(u)`.
//! Stacking `(l1, l2, s, 1 - s, u)` gives the lifted vector `chi` used by
//! the stability conditions; the stationarity row above is `L chi = 0` for
//! the fixed selector `L = [-I  I  0  0  -I]`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::{Error, Result};

/// One component of the step set: forced to a single value away from the
/// switching surface, free on the closed unit interval exactly on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepComponent {
    Fixed(f64),
    Interval,
}

/// Componentwise image of the step set at a given input.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSelection {
    pub components: Vec<StepComponent>,
}

/// Tolerance on the `[0, 1]` bounds when testing membership. The sign of
/// `u` itself is compared exactly: the switching surface is `u_i == 0`.
pub const BOUND_TOL: f64 = 1e-12;

impl StepSelection {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Whether `s` is a selection of this step set. Fixed components must
    /// match to within [`BOUND_TOL`]; interval components must lie in
    /// `[-BOUND_TOL, 1 + BOUND_TOL]`.
    pub fn contains(&self, s: &DVector<f64>) -> bool {
        s.len() == self.len()
            && self.components.iter().zip(s.iter()).all(|(c, &si)| match c {
                StepComponent::Fixed(v) => (si - v).abs() <= BOUND_TOL,
                StepComponent::Interval => (-BOUND_TOL..=1.0 + BOUND_TOL).contains(&si),
            })
    }

    /// The single-valued step as a representative selection: interval
    /// components resolve to 0, matching `step`.
    pub fn representative(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.components.iter().map(|c| match c {
                StepComponent::Fixed(v) => *v,
                StepComponent::Interval => 0.0,
            }),
        )
    }

    /// Draws one selection, sampling interval components uniformly on `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.components.iter().map(|c| match c {
                StepComponent::Fixed(v) => *v,
                StepComponent::Interval => rng.random::<f64>(),
            }),
        )
    }
}

/// Single-valued step, componentwise: 1 for positive entries, 0 otherwise
/// (in particular 0 at the origin).
pub fn step(v: &DVector<f64>) -> DVector<f64> {
    v.map(|vi| if vi > 0.0 { 1.0 } else { 0.0 })
}

/// Set-valued step: each component is `{0}` or `{1}` off the switching
/// surface and the full interval `[0, 1]` exactly on it.
pub fn step_set(v: &DVector<f64>) -> StepSelection {
    StepSelection {
        components: v
            .iter()
            .map(|&vi| {
                if vi == 0.0 {
                    StepComponent::Interval
                } else {
                    StepComponent::Fixed(if vi > 0.0 { 1.0 } else { 0.0 })
                }
            })
            .collect(),
    }
}

/// Componentwise ramp `max(v, 0)`.
pub fn ramp(v: &DVector<f64>) -> DVector<f64> {
    v.map(|vi| vi.max(0.0))
}

/// Closed-form KKT multipliers `(l1, l2) = (ramp(-u), ramp(u))`.
pub fn lambda_bar(u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    (ramp(&(-u)), ramp(u))
}

/// Maximum violation of the KKT system for the step set: stationarity
/// `-u - l1 + l2 = 0`, the two complementarity products, and the sign and
/// interval bounds. Zero exactly when `(s, l1, l2)` certifies `s` as a
/// selection at `u`.
pub fn kkt_residual(
    u: &DVector<f64>,
    s: &DVector<f64>,
    l1: &DVector<f64>,
    l2: &DVector<f64>,
) -> f64 {
    let mut r: f64 = 0.0;
    for i in 0..u.len() {
        r = r.max((-u[i] - l1[i] + l2[i]).abs());
        r = r.max((l1[i] * s[i]).abs());
        r = r.max((l2[i] * (1.0 - s[i])).abs());
        r = r.max(-l1[i]);
        r = r.max(-l2[i]);
        r = r.max(-s[i]);
        r = r.max(s[i] - 1.0);
    }
    r
}

/// Lifted vector `chi = (l1, l2, s, 1 - s, u)` of length `5 n_u`, with the
/// multipliers in closed form. Errors if `s` is not a selection at `u`.
pub fn build_chi(u: &DVector<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != s.len() {
        return Err(Error::DimensionMismatch(format!(
            "chi needs matching lengths, got u: {}, s: {}",
            u.len(),
            s.len()
        )));
    }
    let set = step_set(u);
    if !set.contains(s) {
        let i = (0..u.len())
            .find(|&i| match set.components[i] {
                StepComponent::Fixed(v) => (s[i] - v).abs() > BOUND_TOL,
                StepComponent::Interval => !(-BOUND_TOL..=1.0 + BOUND_TOL).contains(&s[i]),
            })
            .unwrap_or(0);
        return Err(Error::SelectionOutsideStepSet { index: i, u: u[i], s: s[i] });
    }
    let (l1, l2) = lambda_bar(u);
    let n = u.len();
    let mut chi = DVector::zeros(5 * n);
    chi.rows_mut(0, n).copy_from(&l1);
    chi.rows_mut(n, n).copy_from(&l2);
    chi.rows_mut(2 * n, n).copy_from(s);
    chi.rows_mut(3 * n, n).copy_from(&s.map(|si| 1.0 - si));
    chi.rows_mut(4 * n, n).copy_from(u);
    Ok(chi)
}

/// Stationarity selector `L = [-I  I  0  0  -I]` with `L chi = -l1 + l2 - u`.
pub fn build_l(n_u: usize) -> DMatrix<f64> {
    let row = DMatrix::from_row_slice(1, 5, &[-1.0, 1.0, 0.0, 0.0, -1.0]);
    row.kronecker(&DMatrix::identity(n_u, n_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn step_is_strict_at_zero() {
        let s = step(&dv(&[2.0, -3.0, 0.0, 1e-300]));
        assert_eq!(s, dv(&[1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn step_set_frees_only_the_surface() {
        let set = step_set(&dv(&[2.0, -3.0, 0.0]));
        assert_eq!(
            set.components,
            vec![
                StepComponent::Fixed(1.0),
                StepComponent::Fixed(0.0),
                StepComponent::Interval
            ]
        );
        assert!(set.contains(&dv(&[1.0, 0.0, 0.37])));
        assert!(set.contains(&dv(&[1.0, 0.0, 0.0])));
        assert!(set.contains(&dv(&[1.0, 0.0, 1.0])));
        assert!(!set.contains(&dv(&[0.5, 0.0, 0.37])));
        assert!(!set.contains(&dv(&[1.0, 0.0, 1.5])));
    }

    #[test]
    fn negative_zero_counts_as_surface() {
        let set = step_set(&dv(&[-0.0]));
        assert_eq!(set.components, vec![StepComponent::Interval]);
    }

    #[test]
    fn ramp_matches_definition() {
        assert_eq!(ramp(&dv(&[2.0, -3.0, 0.0])), dv(&[2.0, 0.0, 0.0]));
    }

    #[test]
    fn multipliers_have_closed_form() {
        let u = dv(&[2.0, -3.0, 0.0]);
        let (l1, l2) = lambda_bar(&u);
        assert_eq!(l1, dv(&[0.0, 3.0, 0.0]));
        assert_eq!(l2, dv(&[2.0, 0.0, 0.0]));
    }

    #[test]
    fn residual_is_zero_on_valid_triples() {
        let u = dv(&[2.0, -3.0, 0.0]);
        let s = dv(&[1.0, 0.0, 0.37]);
        let (l1, l2) = lambda_bar(&u);
        assert_eq!(kkt_residual(&u, &s, &l1, &l2), 0.0);
    }

    #[test]
    fn residual_detects_each_violation() {
        let u = dv(&[1.0]);
        // Stationarity broken.
        assert!(kkt_residual(&u, &dv(&[1.0]), &dv(&[0.5]), &dv(&[1.0])) >= 0.5);
        // Complementarity broken: l2 > 0 with s < 1.
        assert!(kkt_residual(&u, &dv(&[0.5]), &dv(&[0.0]), &dv(&[1.0])) >= 0.5);
        // Bounds broken.
        assert!(kkt_residual(&u, &dv(&[1.5]), &dv(&[0.0]), &dv(&[1.0])) >= 0.5);
        assert!(kkt_residual(&dv(&[-1.0]), &dv(&[-0.5]), &dv(&[1.0]), &dv(&[0.0])) >= 0.5);
    }

    #[test]
    fn chi_stacks_blocks_in_order() {
        let u = dv(&[2.0, -3.0]);
        let s = dv(&[1.0, 0.0]);
        let chi = build_chi(&u, &s).unwrap();
        assert_eq!(chi, dv(&[0.0, 3.0, 2.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, -3.0]));
    }

    #[test]
    fn chi_rejects_selections_off_the_step_set() {
        let err = build_chi(&dv(&[1.0]), &dv(&[0.5])).unwrap_err();
        match err {
            Error::SelectionOutsideStepSet { index, u, s } => {
                assert_eq!(index, 0);
                assert_eq!(u, 1.0);
                assert_eq!(s, 0.5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn stationarity_selector_annihilates_chi() {
        let u = dv(&[2.0, -3.0, 0.0]);
        let s = dv(&[1.0, 0.0, 0.37]);
        let chi = build_chi(&u, &s).unwrap();
        let l = build_l(3);
        assert_eq!(l.nrows(), 3);
        assert_eq!(l.ncols(), 15);
        let r = &l * &chi;
        assert_eq!(r, dv(&[0.0, 0.0, 0.0]));
    }

    /// Exhaustive scalar grid: for every combination of signs and bound
    /// values, the residual is zero exactly when the KKT system holds.
    #[test]
    fn scalar_grid_matches_membership() {
        let us: [f64; 3] = [-1.0, 0.0, 1.0];
        let ss: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
        let ls: [f64; 3] = [0.0, 0.5, 1.0];
        for &u in &us {
            for &s in &ss {
                for &l1 in &ls {
                    for &l2 in &ls {
                        let holds = (-u - l1 + l2).abs() == 0.0
                            && l1 * s == 0.0
                            && l2 * (1.0 - s) == 0.0;
                        let r = kkt_residual(&dv(&[u]), &dv(&[s]), &dv(&[l1]), &dv(&[l2]));
                        assert_eq!(
                            r == 0.0,
                            holds,
                            "u={u} s={s} l1={l1} l2={l2} gave residual {r}"
                        );
                        if holds {
                            assert!(step_set(&dv(&[u])).contains(&dv(&[s])));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_stays_inside_the_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = dv(&[0.0, 4.0, -0.5, 0.0]);
        let set = step_set(&u);
        for _ in 0..100 {
            let s = set.sample(&mut rng);
            assert!(set.contains(&s));
            let (l1, l2) = lambda_bar(&u);
            assert_eq!(kkt_residual(&u, &s, &l1, &l2), 0.0);
        }
    }

    proptest! {
        /// On arbitrary inputs (with occasional exact zeros) the closed-form
        /// multipliers certify any sampled selection with zero residual.
        #[test]
        fn closed_form_certifies_sampled_selections(
            raw in proptest::collection::vec((-10.0f64..10.0, 0u8..5), 1..6),
            seed in 0u64..1000,
        ) {
            let u = dv(&raw.iter()
                .map(|&(v, z)| if z == 0 { 0.0 } else { v })
                .collect::<Vec<_>>());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = step_set(&u).sample(&mut rng);
            let (l1, l2) = lambda_bar(&u);
            prop_assert_eq!(kkt_residual(&u, &s, &l1, &l2), 0.0);
            let chi = build_chi(&u, &s).unwrap();
            let r = build_l(u.len()) * &chi;
            prop_assert!(r.amax() == 0.0);
        }

        /// The ramp is positively homogeneous, which is what makes the
        /// multipliers scale with the input.
        #[test]
        fn ramp_is_positively_homogeneous(
            v in proptest::collection::vec(-100.0f64..100.0, 1..6),
            alpha in 0.0f64..50.0,
        ) {
            let v = dv(&v);
            let lhs = ramp(&(alpha * &v));
            let rhs = alpha * ramp(&v);
            prop_assert!((lhs - rhs).amax() <= 1e-12 * alpha.max(1.0));
        }
    }
}
