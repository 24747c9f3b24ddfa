//! Deterministic full-batch minimization of the ridge-regularized risk, plus
//! the exact retraining oracles (leave-one-out, down-weighting, replacement)
//! that the influence approximations are checked against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, ModelState, WeightedRisk, DIRECT_HESSIAN_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Exact-Hessian Newton steps with Armijo backtracking (only when `p` is under the direct cap).
    #[default]
    Newton,
    /// Gradient descent with backtracking, starting each step at `learning_rate`.
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization; 0 means zero init.
    pub init_scale: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iters: 50_000,
            grad_tol: 1e-8,
            seed: 0,
            init_scale: 0.0,
            optimizer: Optimizer::Newton,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::usage("grad_tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::usage("max_iters must be positive"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::usage("init_scale must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_grad_norm: f64,
    pub iters_used: usize,
    pub converged: bool,
    pub final_risk: f64,
}

/// Starting point for training: zeros, or `N(0, init_scale^2)` drawn from `seed`.
pub fn initial_model(num_classes: usize, feature_dim: usize, lambda: f64, cfg: &TrainConfig) -> ModelState {
    let mut model = ModelState::zeros(num_classes, feature_dim, lambda);
    if cfg.init_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_scale).expect("finite positive scale");
        for v in model.theta.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    model
}

fn check_dataset(dataset: &[Instance], num_classes: usize) -> Result<usize> {
    let first = dataset.first().ok_or_else(|| Error::usage("training set is empty"))?;
    if num_classes < 2 {
        return Err(Error::usage("need at least two classes"));
    }
    let d = first.feature_dim();
    for inst in dataset {
        inst.validate(d, num_classes)?;
    }
    Ok(d)
}

/// Minimizes `risk` starting from `start`.
pub fn minimize(risk: &WeightedRisk<'_>, start: ModelState, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    let mut model = start;
    let use_newton = cfg.optimizer == Optimizer::Newton && model.num_params() <= DIRECT_HESSIAN_CAP;
    let mut value = risk.value(&model)?;
    let mut grad = risk.grad(&model)?;
    let mut iters = 0;
    while grad.norm() > cfg.grad_tol && iters < cfg.max_iters {
        let direction = if use_newton {
            risk.hessian(&model)?
                .cholesky()
                .map(|chol| -chol.solve(&grad))
                .unwrap_or_else(|| -&grad)
        } else {
            -&grad
        };
        let slope = grad.dot(&direction);
        let mut step = if use_newton { 1.0 } else { cfg.learning_rate };
        let mut accepted = None;
        for attempt in 0..60 {
            let mut trial = model.clone();
            trial.theta += &direction * step;
            let trial_value = risk.value(&trial)?;
            if trial_value <= value + 1e-4 * step * slope {
                accepted = Some((trial, trial_value));
                break;
            }
            // Near the optimum the risk stops resolving decreases; fall back
            // to the gradient norm for the undamped step.
            if attempt == 0 {
                let trial_grad = risk.grad(&trial)?;
                if trial_grad.norm() < grad.norm() && (trial_value - value).abs() <= 1e-12 * value.abs().max(1.0) {
                    accepted = Some((trial, trial_value));
                    break;
                }
            }
            step *= 0.5;
        }
        iters += 1;
        match accepted {
            Some((next, next_value)) => {
                model = next;
                value = next_value;
                grad = risk.grad(&model)?;
            }
            None => break,
        }
    }
    let final_grad_norm = grad.norm();
    let report = TrainReport {
        final_grad_norm,
        iters_used: iters,
        converged: final_grad_norm <= cfg.grad_tol,
        final_risk: value,
    };
    Ok((model, report))
}

/// Trains `theta_hat = argmin R(theta)` on the full dataset.
pub fn train(
    dataset: &[Instance],
    num_classes: usize,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    if !(lambda > 0.0) {
        return Err(Error::usage("ridge lambda must be positive"));
    }
    let d = check_dataset(dataset, num_classes)?;
    let risk = WeightedRisk::empirical(dataset, lambda)?;
    minimize(&risk, initial_model(num_classes, d, lambda, cfg), cfg)
}

/// Exact perturbed-objective retraining, optionally warm-started.
///
/// Warm starting changes only the iteration count: every objective here is
/// strongly convex, so the optimum is the same.
#[derive(Debug, Clone)]
pub struct Retrainer<'a> {
    pub dataset: &'a [Instance],
    pub num_classes: usize,
    pub lambda: f64,
    pub cfg: TrainConfig,
    pub warm_start: Option<&'a ModelState>,
}

impl<'a> Retrainer<'a> {
    pub fn new(dataset: &'a [Instance], num_classes: usize, lambda: f64, cfg: TrainConfig) -> Self {
        Self {
            dataset,
            num_classes,
            lambda,
            cfg,
            warm_start: None,
        }
    }

    pub fn warm_started(mut self, model: &'a ModelState) -> Self {
        self.warm_start = Some(model);
        self
    }

    fn start(&self, d: usize) -> ModelState {
        match self.warm_start {
            Some(m) => m.clone(),
            None => initial_model(self.num_classes, d, self.lambda, &self.cfg),
        }
    }

    fn check_index(&self, index: usize) -> Result<usize> {
        if !(self.lambda > 0.0) {
            return Err(Error::usage("ridge lambda must be positive"));
        }
        let d = check_dataset(self.dataset, self.num_classes)?;
        if index >= self.dataset.len() {
            return Err(Error::usage(format!(
                "index {index} out of range for {} instances",
                self.dataset.len()
            )));
        }
        Ok(d)
    }

    fn check_epsilon(&self, epsilon: f64) -> Result<()> {
        let bound = 1.0 / self.dataset.len() as f64;
        if !epsilon.is_finite() || epsilon.abs() >= bound {
            return Err(Error::usage(format!(
                "epsilon {epsilon} outside (-1/n, 1/n) = (-{bound}, {bound})"
            )));
        }
        Ok(())
    }

    /// Optimum of the risk over the remaining `n - 1` instances (mean re-normalized).
    pub fn without(&self, exclude: usize) -> Result<(ModelState, TrainReport)> {
        let d = self.check_index(exclude)?;
        if self.dataset.len() < 2 {
            return Err(Error::usage("leave-one-out needs at least two instances"));
        }
        let remaining: Vec<Instance> = self
            .dataset
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != exclude)
            .map(|(_, z)| z.clone())
            .collect();
        let risk = WeightedRisk::empirical(&remaining, self.lambda)?;
        minimize(&risk, self.start(d), &self.cfg)
    }

    /// Optimum of `R(theta) - epsilon * L(z_index, theta)`.
    pub fn reweighted(&self, index: usize, epsilon: f64) -> Result<(ModelState, TrainReport)> {
        let d = self.check_index(index)?;
        self.check_epsilon(epsilon)?;
        let mut risk = WeightedRisk::empirical(self.dataset, self.lambda)?;
        risk.terms[index].1 -= epsilon;
        minimize(&risk, self.start(d), &self.cfg)
    }

    /// Optimum of `R(theta) + epsilon * L(z', theta) - epsilon * L(z_index, theta)`.
    pub fn replaced(&self, index: usize, baseline: &Instance, epsilon: f64) -> Result<(ModelState, TrainReport)> {
        let d = self.check_index(index)?;
        self.check_epsilon(epsilon)?;
        let z = &self.dataset[index];
        if baseline.features.shape() != z.features.shape() || baseline.label != z.label {
            return Err(Error::usage("baseline must match the instance's shape and label"));
        }
        let mut risk = WeightedRisk::empirical(self.dataset, self.lambda)?;
        risk.terms[index].1 -= epsilon;
        risk.terms.push((baseline, epsilon));
        minimize(&risk, self.start(d), &self.cfg)
    }
}

pub fn retrain_without(
    dataset: &[Instance],
    exclude_index: usize,
    num_classes: usize,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    Retrainer::new(dataset, num_classes, lambda, cfg.clone()).without(exclude_index)
}

pub fn retrain_reweighted(
    dataset: &[Instance],
    index: usize,
    epsilon: f64,
    num_classes: usize,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    Retrainer::new(dataset, num_classes, lambda, cfg.clone()).reweighted(index, epsilon)
}

pub fn retrain_replaced(
    dataset: &[Instance],
    index: usize,
    baseline: &Instance,
    epsilon: f64,
    num_classes: usize,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    Retrainer::new(dataset, num_classes, lambda, cfg.clone()).replaced(index, baseline, epsilon)
}

/// Parameter-space distance between two models.
pub fn theta_distance(a: &ModelState, b: &ModelState) -> f64 {
    (&a.theta - &b.theta).norm()
}
