//! Qualitative behavior of the certified Lyapunov function and the
//! pipeline as a whole, beyond the per-module unit tests.

use nalgebra::{DMatrix, DVector};

use stepcert::certify::{certify_ges, CertifyOptions, CertifyOutcome};
use stepcert::lyapunov::{GridBounds, LevelGrid, LyapunovEvaluator};
use stepcert::model::{ternary_embed, SystemData};
use stepcert::sdp::Certificate;

fn plant_a() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.9464, 0.0957, -0.9568, 0.9033])
}

fn gain_b() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 1, &[0.0049, 0.0959])
}

fn gain_k() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 2, &[9.9, 0.495])
}

fn binary_example() -> SystemData {
    SystemData::new(
        plant_a(),
        gain_b(),
        gain_k(),
        DMatrix::identity(1, 1),
        DVector::from_row_slice(&[-1.0]),
    )
    .unwrap()
}

fn certify(sys: &SystemData) -> Certificate {
    match certify_ges(sys, &CertifyOptions::default()).unwrap() {
        CertifyOutcome::Certified(c) => *c,
        CertifyOutcome::NotCertified { diagnostic } => panic!("{diagnostic}"),
    }
}

fn square_grid(sys: &SystemData, cert: &Certificate, half_width: f64, n: usize) -> LevelGrid {
    let ev = LyapunovEvaluator::new(sys, &cert.p_matrix().unwrap()).unwrap();
    ev.level_grid(
        &GridBounds {
            x1_min: -half_width,
            x1_max: half_width,
            x2_min: -half_width,
            x2_max: half_width,
        },
        (n, n),
    )
    .unwrap()
}

#[test]
fn repeated_certification_is_deterministic() {
    let sys = binary_example();
    let first = certify(&sys);
    let second = certify(&sys);
    assert_eq!(first.c, second.c);
    assert_eq!(first.p_matrix().unwrap(), second.p_matrix().unwrap());
    assert_eq!(first.residuals, second.residuals);
}

#[test]
fn asymmetric_step_leaves_an_asymmetric_lyapunov_function() {
    // A single step with offset engages on one side of the switching line
    // only, so the certified function has no reason to be even; the grid
    // witnesses both the asymmetry and nonconvexity that rule out any
    // single quadratic shape.
    let sys = binary_example();
    let cert = certify(&sys);
    let n = 120;
    let grid = square_grid(&sys, &cert, 2.0, n);
    let w = |i: usize, j: usize| grid.values[j * n + i];

    let min_value = grid.values.iter().cloned().fold(f64::MAX, f64::min);
    assert!(min_value >= 0.0, "negative Lyapunov value {min_value:e}");
    assert!(grid.values.iter().all(|v| v.is_finite()));

    // The symmetric grid makes (n-1-i, n-1-j) the mirror point of (i, j)
    // through the origin up to rounding in the grid coordinates.
    let mut asymmetric_points = 0;
    for j in 0..n {
        for i in 0..n {
            let rel = (w(i, j) - w(n - 1 - i, n - 1 - j)).abs() / (1.0 + w(i, j).abs());
            if rel > 1e-3 {
                asymmetric_points += 1;
            }
        }
    }
    assert!(
        asymmetric_points > 100,
        "expected a visibly uneven function, got {asymmetric_points} asymmetric points"
    );

    let mut nonconvex_triples = 0;
    for j in 0..n {
        for i in 1..n - 1 {
            let bulge = w(i, j) - 0.5 * (w(i - 1, j) + w(i + 1, j));
            if bulge / (1.0 + w(i, j).abs()) > 1e-6 {
                nonconvex_triples += 1;
            }
        }
    }
    assert!(
        nonconvex_triples > 10,
        "expected midpoint-convexity violations along grid rows, got {nonconvex_triples}"
    );
}

#[test]
fn odd_nonlinearity_yields_an_even_lyapunov_function() {
    // The two-channel embedding is odd under x -> -x (the channels swap),
    // the feasible set inherits that symmetry, and the regularized solve
    // lands on a symmetric certificate: the sampled function is even to
    // within solver accuracy.
    let sys = ternary_embed(plant_a(), gain_b(), gain_k()).unwrap();
    let cert = certify(&sys);
    let n = 60;
    let grid = square_grid(&sys, &cert, 6.0, n);
    let w = |i: usize, j: usize| grid.values[j * n + i];
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            let rel = (w(i, j) - w(n - 1 - i, n - 1 - j)).abs() / (1.0 + w(i, j).abs());
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-3, "evenness violated at relative size {worst:e}");
}
