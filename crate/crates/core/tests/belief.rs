use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use shockbench::belief::{apply_rotation, EigenGaussian};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Beliefs of dimension 2..=8 with 0..=3 unit-norm generators.
fn belief() -> impl Strategy<Value = EigenGaussian> {
    (2usize..=8).prop_flat_map(|d| {
        (
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(0.05f64..3.0, d),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 0..=3),
        )
            .prop_filter("generators away from zero", |(_, _, hh)| {
                hh.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 0.01)
            })
            .prop_map(|(m, l, hh)| EigenGaussian::new(m, l, hh.into_iter().map(unit).collect()).unwrap())
    })
}

fn rotation_matrix(b: &EigenGaussian) -> DMatrix<f64> {
    let d = b.dim();
    let mut u = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        u.set_column(j, &DVector::from_vec(apply_rotation(&b.hh_vectors, &e, false).unwrap()));
    }
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rotation_is_orthogonal(b in belief()) {
        let u = rotation_matrix(&b);
        let err = (u.transpose() * &u - DMatrix::identity(b.dim(), b.dim())).abs().max();
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn nll_equals_dense_log_density(b in belief(), seed in prop::collection::vec(-4.0f64..4.0, 8)) {
        let d = b.dim();
        let y: Vec<f64> = b.mean.iter().zip(&seed).map(|(m, s)| m + s).collect();
        let cov = DMatrix::from_row_slice(d, d, b.covariance().as_slice().unwrap());
        let chol = cov.cholesky().unwrap();
        let r = DVector::from_iterator(d, y.iter().zip(&b.mean).map(|(a, m)| a - m));
        let logdet: f64 = chol.l().diagonal().iter().map(|x: &f64| 2.0 * x.ln()).sum();
        let dense = 0.5 * (r.dot(&chol.solve(&r)) + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln());
        prop_assert!((b.nll(&y) - dense).abs() < 1e-8 * dense.abs().max(1.0));
    }

    #[test]
    fn covariance_spectrum_is_lambda_squared(b in belief()) {
        let d = b.dim();
        let cov = DMatrix::from_row_slice(d, d, b.covariance().as_slice().unwrap());
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut want: Vec<f64> = b.lambdas.iter().map(|l| l * l).collect();
        eig.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, w) in eig.iter().zip(&want) {
            prop_assert!((a - w).abs() < 1e-8 * w.max(1.0));
        }
    }

    #[test]
    fn w2_to_isotropic_matches_dense_formula(b in belief(), s2 in 0.1f64..4.0) {
        // W2² = |m1 - m2|² + tr Σ + d s² - 2 tr (s² Σ)^{1/2}
        let target = vec![0.0; b.dim()];
        let m2: f64 = b.mean.iter().map(|m| m * m).sum();
        let tr: f64 = b.lambdas.iter().map(|l| l * l).sum();
        let cross: f64 = b.lambdas.iter().map(|l| l * s2.sqrt()).sum();
        let want = m2 + tr + b.dim() as f64 * s2 - 2.0 * cross;
        let got = b.w2_squared_to_isotropic(&target, s2).unwrap();
        prop_assert!((got - want).abs() < 1e-9 * want.max(1.0));
    }
}
