use approx::assert_relative_eq;
use proptest::prelude::*;

use frictuner_core::analytic::{asymptotic_variance_quadratic, polynomial_variance_1d, GaussianCase};
use frictuner_core::galerkin::{assemble, build_basis, solve, variance, variance_gradient, QuadratureOptions};
use frictuner_core::linalg::{FrictionMatrix, SymMatrix};
use frictuner_core::observables::Observable;
use frictuner_core::targets::GaussianTarget;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn polynomial_variance_agrees_in_1d(
        coeffs in prop::collection::vec(-1.0f64..1.0, 1..5),
        v0 in 0.5f64..4.0,
        g in 0.2f64..4.0,
    ) {
        let basis = build_basis(&GaussianTarget::isotropic(1, v0).unwrap(), 6, &QuadratureOptions::default()).unwrap();
        let gm = SymMatrix::scaled_identity(1, g);
        let f = Observable::Polynomial1d(coeffs.clone());
        let gen = assemble(&basis, &gm).unwrap();
        let sol = solve(&gen, &basis, &f).unwrap();
        let galerkin = variance(&gen, &sol);
        let exact = polynomial_variance_1d(&coeffs, v0, g).unwrap();
        prop_assert!(galerkin >= -1e-12);
        prop_assert!((galerkin - exact).abs() <= 1e-7 * exact.abs().max(1e-6));
    }

    #[test]
    fn gradient_matches_difference_quotient(v0 in 0.5f64..3.0, g in 0.5f64..3.0) {
        let basis = build_basis(&GaussianTarget::isotropic(1, v0).unwrap(), 6, &QuadratureOptions::default()).unwrap();
        let f = Observable::Polynomial1d(vec![0.0, 0.3, 0.5, 0.1]);
        let at = |x: f64| {
            let gen = assemble(&basis, &SymMatrix::scaled_identity(1, x)).unwrap();
            variance(&gen, &solve(&gen, &basis, &f).unwrap())
        };
        let h = 1e-5;
        let fd = (at(g + h) - at(g - h)) / (2.0 * h);
        let grad = variance_gradient(&basis, &SymMatrix::scaled_identity(1, g), &f).unwrap();
        prop_assert!((grad.get(0, 0) - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
    }
}

#[test]
fn two_dimensional_quadratic_agrees() {
    let prec = SymMatrix::from_diagonal(&[1.0, 2.5]);
    let target = GaussianTarget::new(prec.clone()).unwrap();
    let basis = build_basis(&target, 4, &QuadratureOptions::default()).unwrap();
    for d in [[1.0, 1.0], [0.5, 2.0], [3.0, 0.7]] {
        let gm = SymMatrix::from_diagonal(&d);
        let gen = assemble(&basis, &gm).unwrap();
        let sol = solve(&gen, &basis, &Observable::NormSquared).unwrap();
        let case = GaussianCase::new(
            prec.map_spectrum(|l| 1.0 / l).unwrap(),
            SymMatrix::identity(2),
            vec![0.0, 0.0],
            FrictionMatrix::new(gm, 1e-12).unwrap(),
        )
        .unwrap();
        let exact = asymptotic_variance_quadratic(&case).unwrap();
        assert_relative_eq!(variance(&gen, &sol), exact, max_relative = 1e-8);
    }
}
