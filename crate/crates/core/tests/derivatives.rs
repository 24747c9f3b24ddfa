mod common;

use common::*;
use memattr::model::{self, empirical_risk_grad, hessian, hvp, mixed_grad_input, Instance, ModelState};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

const CASES: u64 = 120;
const TOL: f64 = 1e-5;

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        for z in &data {
            let g = model::loss(&m, z).unwrap().grad_theta;
            let err = rel_err_vec(&g, &fd_loss_grad(&m, z));
            assert!(err <= TOL, "seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn risk_gradient_matches_finite_differences() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        let err = rel_err_vec(&empirical_risk_grad(&m, &data).unwrap(), &fd_risk_grad(&m, &data));
        assert!(err <= TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn hessian_matches_finite_differences_and_is_pd() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        let h = hessian(&m, &data).unwrap();
        let err = rel_err_mat(&h, &fd_hessian(&m, &data));
        assert!(err <= TOL, "seed {seed}: rel err {err}");
        assert!((&h - h.transpose()).abs().max() <= 1e-12);
        let min = SymmetricEigen::new(h).eigenvalues.min();
        assert!(min >= m.ridge_lambda - 1e-9, "seed {seed}: min eig {min}");
    }
}

#[test]
fn hvp_matches_directional_differences() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        let v = random_vector(seed, m.num_params());
        let err = rel_err_vec(&hvp(&m, &data, &v).unwrap(), &fd_hvp(&m, &data, &v));
        assert!(err <= TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn mixed_gradient_matches_finite_differences() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        let s = random_vector(seed + 7, m.num_params());
        for z in &data {
            let err = rel_err_mat(&mixed_grad_input(&m, z, &s).unwrap(), &fd_mixed(&m, z, &s));
            assert!(err <= TOL, "seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn prob_gradient_matches_finite_differences() {
    for seed in 0..CASES {
        let (m, data) = random_case(seed);
        let z = &data[0];
        let fd = fd_grad(&m, |mm| model::predict_proba(mm, z).unwrap()[z.label]);
        let err = rel_err_vec(&model::prob_grad(&m, z).unwrap(), &fd);
        assert!(err <= TOL, "seed {seed}: rel err {err}");
    }
}

fn small_case() -> impl Strategy<Value = (ModelState, Vec<Instance>)> {
    (2usize..4, 1usize..4, 1usize..4).prop_flat_map(|(c, d, n)| {
        let theta = prop::collection::vec(-2.0f64..2.0, c * d + c);
        let rows = prop::collection::vec((prop::collection::vec(-3.0f64..3.0, d * 3), 0..c, 1usize..4), n);
        (theta, rows, 0.01f64..1.0).prop_map(move |(theta, rows, lambda)| {
            let mut m = ModelState::zeros(c, d, lambda);
            m.theta = DVector::from_vec(theta);
            let data = rows
                .into_iter()
                .map(|(vals, y, tokens)| Instance::new(DMatrix::from_row_slice(tokens, d, &vals[..tokens * d]), y))
                .collect();
            (m, data)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hvp_is_linear((m, data) in small_case(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let u = random_vector(seed, m.num_params());
        let v = random_vector(seed + 1, m.num_params());
        let lhs = hvp(&m, &data, &(&u * a + &v * b)).unwrap();
        let rhs = hvp(&m, &data, &u).unwrap() * a + hvp(&m, &data, &v).unwrap() * b;
        prop_assert!((&lhs - &rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
    }

    #[test]
    fn token_order_does_not_matter((m, data) in small_case(), shift in 0usize..4) {
        let z = &data[0];
        let n = z.num_tokens();
        let perm: Vec<usize> = (0..n).map(|t| (t + shift) % n).collect();
        let permuted = Instance::new(z.features.select_rows(&perm), z.label);
        let a = model::loss(&m, z).unwrap();
        let b = model::loss(&m, &permuted).unwrap();
        prop_assert!((a.loss_value - b.loss_value).abs() <= 1e-12 * (1.0 + a.loss_value.abs()));
        prop_assert!((a.grad_theta - b.grad_theta).norm() <= 1e-12);
    }

    #[test]
    fn hessian_is_positive_definite((m, data) in small_case()) {
        let h = hessian(&m, &data).unwrap();
        let min = SymmetricEigen::new(h).eigenvalues.min();
        prop_assert!(min >= m.ridge_lambda - 1e-9);
    }

    #[test]
    fn loss_is_finite_for_extreme_logits(scale in 1.0f64..1e6, label in 0usize..3) {
        let m = ModelState::zeros(3, 2, 0.1);
        let mut m = m;
        m.theta[0] = scale;
        m.theta[3] = -scale;
        let z = Instance::new(DMatrix::from_row_slice(1, 2, &[scale, 1.0]), label);
        let lc = model::loss(&m, &z).unwrap();
        prop_assert!(lc.loss_value.is_finite() && lc.loss_value >= 0.0);
        prop_assert!(lc.grad_theta.iter().all(|v| v.is_finite()));
    }
}
