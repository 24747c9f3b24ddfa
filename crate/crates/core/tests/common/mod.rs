//! Oracles shared by the integration tests: central finite differences and
//! exact retraining. None of these go through the analytic derivative code.

#![allow(dead_code)]

use memattr::data::{generate_clusters, generate_longtail, ClusterSpec, LongTailCorpus, LongTailSpec};
use memattr::model::{self, empirical_risk, Instance, ModelState};
use memattr::train::TrainConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err_vec(approx: &DVector<f64>, exact: &DVector<f64>) -> f64 {
    (approx - exact).norm() / exact.norm().max(1e-12)
}

pub fn rel_err_mat(approx: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    (approx - exact).norm() / exact.norm().max(1e-12)
}

/// Central differences of a scalar function of `theta`.
pub fn fd_grad(model: &ModelState, f: impl Fn(&ModelState) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(model.num_params());
    for i in 0..model.num_params() {
        let mut plus = model.clone();
        plus.theta[i] += FD_STEP;
        let mut minus = model.clone();
        minus.theta[i] -= FD_STEP;
        g[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    g
}

pub fn fd_loss_grad(model: &ModelState, z: &Instance) -> DVector<f64> {
    fd_grad(model, |m| model::loss(m, z).unwrap().loss_value)
}

pub fn fd_risk_grad(model: &ModelState, data: &[Instance]) -> DVector<f64> {
    fd_grad(model, |m| empirical_risk(m, data).unwrap())
}

/// Central differences of the analytic risk gradient, column by column.
pub fn fd_hessian(model: &ModelState, data: &[Instance]) -> DMatrix<f64> {
    let p = model.num_params();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut plus = model.clone();
        plus.theta[j] += FD_STEP;
        let mut minus = model.clone();
        minus.theta[j] -= FD_STEP;
        let col = (model::empirical_risk_grad(&plus, data).unwrap()
            - model::empirical_risk_grad(&minus, data).unwrap())
            / (2.0 * FD_STEP);
        h.set_column(j, &col);
    }
    h
}

/// Directional central difference of the risk gradient along `v`.
pub fn fd_hvp(model: &ModelState, data: &[Instance], v: &DVector<f64>) -> DVector<f64> {
    let mut plus = model.clone();
    plus.theta.axpy(FD_STEP, v, 1.0);
    let mut minus = model.clone();
    minus.theta.axpy(-FD_STEP, v, 1.0);
    (model::empirical_risk_grad(&plus, data).unwrap() - model::empirical_risk_grad(&minus, data).unwrap())
        / (2.0 * FD_STEP)
}

/// Central differences of `s . grad_theta L((X, y))` with respect to each entry of `X`.
pub fn fd_mixed(model: &ModelState, z: &Instance, s: &DVector<f64>) -> DMatrix<f64> {
    let (n, d) = z.features.shape();
    let scalar = |x: &Instance| s.dot(&model::loss(model, x).unwrap().grad_theta);
    DMatrix::from_fn(n, d, |t, l| {
        let mut plus = z.clone();
        plus.features[(t, l)] += FD_STEP;
        let mut minus = z.clone();
        minus.features[(t, l)] -= FD_STEP;
        (scalar(&plus) - scalar(&minus)) / (2.0 * FD_STEP)
    })
}

/// Random small model and dataset for derivative checks.
pub fn random_case(seed: u64) -> (ModelState, Vec<Instance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=4);
    let d = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let lambda = rng.random_range(0.01..1.0);
    let mut model = ModelState::zeros(c, d, lambda);
    for v in model.theta.iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    let data = (0..n)
        .map(|_| {
            let tokens = rng.random_range(1..=4);
            let x = DMatrix::from_fn(tokens, d, |_, _| rng.random_range(-2.0..2.0));
            Instance::new(x, rng.random_range(0..c))
        })
        .collect();
    (model, data)
}

pub fn random_vector(seed: u64, len: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
}

/// Configuration tight enough for difference-quotient oracles.
pub fn tight_cfg() -> TrainConfig {
    TrainConfig {
        grad_tol: 1e-12,
        ..TrainConfig::default()
    }
}

/// The shipped 50-instance fixture: two overlapping Gaussian classes.
pub fn fixture_spec() -> ClusterSpec {
    ClusterSpec {
        num_instances: 50,
        feature_dim: 5,
        num_classes: 2,
        tokens_per_instance: 3,
        separation: 1.0,
        noise_sigma: 1.0,
        seed: 2024,
    }
}

pub fn fixture() -> Vec<Instance> {
    generate_clusters(&fixture_spec()).unwrap()
}

pub fn loo_spec(seed: u64) -> ClusterSpec {
    ClusterSpec { seed, ..fixture_spec() }
}

/// Long-tail corpus used by the experiment criteria.
pub fn longtail_spec(seed: u64) -> LongTailSpec {
    LongTailSpec {
        seed,
        ..LongTailSpec::default()
    }
}

pub fn longtail(seed: u64) -> LongTailCorpus {
    generate_longtail(&longtail_spec(seed)).unwrap()
}

pub const LONGTAIL_LAMBDA: f64 = 1e-3;
