//! Pooled-linear softmax classifier and its analytic derivatives.
//!
//! An instance is an `N x d` token-feature matrix. The model mean-pools the
//! rows into a `d`-vector, applies `logits = W * pool + b` with `W` of shape
//! `C x d`, and normalizes with softmax. The flat parameter vector stores `W`
//! row-major followed by `b`, so `p = C*d + C`.
//!
//! The per-instance loss is plain cross entropy. The ridge term
//! `lambda/2 * |theta|^2` belongs to the empirical risk only, which keeps the
//! risk Hessian positive definite with smallest eigenvalue at least `lambda`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest parameter count for which an explicit Hessian may be formed.
pub const DIRECT_HESSIAN_CAP: usize = 2_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Token-feature matrix, one row per token.
    pub features: DMatrix<f64>,
    pub label: usize,
    pub token_names: Option<Vec<String>>,
    /// Multiplier on this instance's term in the empirical risk.
    pub weight: f64,
    pub subpop_id: Option<u64>,
}

impl Instance {
    pub fn new(features: DMatrix<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            token_names: None,
            weight: 1.0,
            subpop_id: None,
        }
    }

    pub fn with_subpop(mut self, id: u64) -> Self {
        self.subpop_id = Some(id);
        self
    }

    pub fn with_token_names(mut self, names: Vec<String>) -> Self {
        self.token_names = Some(names);
        self
    }

    pub fn num_tokens(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Mean of the token rows.
    pub fn pooled(&self) -> DVector<f64> {
        let n = self.features.nrows() as f64;
        let mut pool = DVector::zeros(self.features.ncols());
        for row in self.features.row_iter() {
            pool += row.transpose();
        }
        pool / n
    }

    /// Checks the instance against a dataset schema.
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::schema("instance has no token rows"));
        }
        if self.features.ncols() != feature_dim {
            return Err(Error::schema(format!(
                "instance has {} feature columns, schema expects {feature_dim}",
                self.features.ncols()
            )));
        }
        if self.label >= num_classes {
            return Err(Error::schema(format!(
                "label {} out of range for {num_classes} classes",
                self.label
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("non-finite feature value"));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::schema(format!("weight {} is not positive", self.weight)));
        }
        if let Some(names) = &self.token_names {
            if names.len() != self.features.nrows() {
                return Err(Error::schema(format!(
                    "{} token names for {} tokens",
                    names.len(),
                    self.features.nrows()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub theta: DVector<f64>,
    pub ridge_lambda: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ModelState {
    pub fn zeros(num_classes: usize, feature_dim: usize, ridge_lambda: f64) -> Self {
        Self {
            theta: DVector::zeros(num_classes * feature_dim + num_classes),
            ridge_lambda,
            num_classes,
            feature_dim,
        }
    }

    /// Builds a model from a `C x d` weight matrix and a bias vector.
    pub fn from_parts(weights: &DMatrix<f64>, bias: &DVector<f64>, ridge_lambda: f64) -> Result<Self> {
        let (c, d) = weights.shape();
        if bias.len() != c {
            return Err(Error::schema(format!(
                "bias has {} entries, weights have {c} rows",
                bias.len()
            )));
        }
        let mut model = Self::zeros(c, d, ridge_lambda);
        for k in 0..c {
            for j in 0..d {
                model.theta[k * d + j] = weights[(k, j)];
            }
            model.theta[c * d + k] = bias[k];
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.num_classes * self.feature_dim + self.num_classes
    }

    /// Flat index of `W[class, feature]`; `feature == d` addresses the bias.
    #[inline]
    pub fn param_index(&self, class: usize, feature: usize) -> usize {
        if feature == self.feature_dim {
            self.num_classes * self.feature_dim + class
        } else {
            class * self.feature_dim + feature
        }
    }

    pub fn weights(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_classes, self.feature_dim, |k, j| {
            self.theta[k * self.feature_dim + j]
        })
    }

    pub fn bias(&self) -> DVector<f64> {
        self.theta
            .rows(self.num_classes * self.feature_dim, self.num_classes)
            .into_owned()
    }

    /// `W * pool + b`.
    pub fn logits(&self, pool: &DVector<f64>) -> DVector<f64> {
        let d = self.feature_dim;
        DVector::from_fn(self.num_classes, |k, _| {
            let row = self.theta.rows(k * d, d);
            row.dot(pool) + self.theta[self.num_classes * d + k]
        })
    }

    fn check_instance(&self, instance: &Instance) -> Result<()> {
        if instance.feature_dim() != self.feature_dim {
            return Err(Error::schema(format!(
                "instance has {} feature columns, model expects {}",
                instance.feature_dim(),
                self.feature_dim
            )));
        }
        if instance.num_tokens() == 0 {
            return Err(Error::schema("instance has no token rows"));
        }
        if instance.label >= self.num_classes {
            return Err(Error::schema(format!(
                "label {} out of range for {} classes",
                instance.label, self.num_classes
            )));
        }
        Ok(())
    }

    fn check_param_vector(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::schema(format!(
                "parameter-space vector has length {}, model has {} parameters",
                v.len(),
                self.num_params()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossComponents {
    pub loss_value: f64,
    pub grad_theta: DVector<f64>,
    pub prob_true_class: f64,
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Pooled features and class probabilities for one instance.
struct Forward {
    pool: DVector<f64>,
    logits: DVector<f64>,
    probs: DVector<f64>,
}

fn forward(model: &ModelState, instance: &Instance) -> Forward {
    let pool = instance.pooled();
    let logits = model.logits(&pool);
    let probs = softmax(&logits);
    Forward { pool, logits, probs }
}

/// Scatters `coef[k] * [pool; 1]_j` into parameter layout.
fn outer_to_params(model: &ModelState, coef: &DVector<f64>, pool: &DVector<f64>, out: &mut DVector<f64>, scale: f64) {
    let d = model.feature_dim;
    for k in 0..model.num_classes {
        let ck = scale * coef[k];
        if ck == 0.0 {
            continue;
        }
        for j in 0..d {
            out[k * d + j] += ck * pool[j];
        }
        out[model.num_classes * d + k] += ck;
    }
}

/// `u_k = V_k . pool + v_b[k]`: the logit change along parameter direction `v`.
fn contract_params(model: &ModelState, v: &DVector<f64>, pool: &DVector<f64>) -> DVector<f64> {
    let d = model.feature_dim;
    DVector::from_fn(model.num_classes, |k, _| {
        v.rows(k * d, d).dot(pool) + v[model.num_classes * d + k]
    })
}

/// `(diag(p) - p p^T) u`.
fn softmax_jacobian_apply(probs: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let pu = probs.dot(u);
    DVector::from_fn(probs.len(), |k, _| probs[k] * (u[k] - pu))
}

fn residual(probs: &DVector<f64>, label: usize) -> DVector<f64> {
    let mut e = probs.clone();
    e[label] -= 1.0;
    e
}

pub fn predict_proba(model: &ModelState, instance: &Instance) -> Result<DVector<f64>> {
    model.check_instance_shape(instance)?;
    Ok(forward(model, instance).probs)
}

/// Argmax class; ties go to the lowest class index.
pub fn predict_label(model: &ModelState, instance: &Instance) -> Result<usize> {
    let probs = predict_proba(model, instance)?;
    let mut best = 0;
    for k in 1..probs.len() {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Top-1 accuracy over a dataset; an empty dataset has accuracy 0.
pub fn accuracy(model: &ModelState, dataset: &[Instance]) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in dataset {
        if predict_label(model, inst)? == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Cross entropy of the true class and its gradient.
pub fn loss(model: &ModelState, instance: &Instance) -> Result<LossComponents> {
    model.check_instance(instance)?;
    let fw = forward(model, instance);
    let loss_value = log_sum_exp(&fw.logits) - fw.logits[instance.label];
    let mut grad = DVector::zeros(model.num_params());
    outer_to_params(model, &residual(&fw.probs, instance.label), &fw.pool, &mut grad, 1.0);
    Ok(LossComponents {
        loss_value,
        grad_theta: grad,
        prob_true_class: fw.probs[instance.label],
    })
}

/// Gradient of `P(y | x; theta)` with respect to `theta`.
///
/// Equals `-P * grad L` since `L = -ln P`.
pub fn prob_grad(model: &ModelState, instance: &Instance) -> Result<DVector<f64>> {
    let lc = loss(model, instance)?;
    Ok(lc.grad_theta * -lc.prob_true_class)
}

/// `R(theta) = sum_i c_i L(z_i, theta) + lambda/2 |theta|^2` for arbitrary coefficients `c_i`.
///
/// The plain empirical risk uses `c_i = weight_i / n`. Negative coefficients
/// appear in the down-weighting retrain oracles.
#[derive(Debug, Clone)]
pub struct WeightedRisk<'a> {
    pub terms: Vec<(&'a Instance, f64)>,
    pub lambda: f64,
}

impl<'a> WeightedRisk<'a> {
    pub fn empirical(dataset: &'a [Instance], lambda: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::usage("empirical risk of an empty dataset"));
        }
        let n = dataset.len() as f64;
        Ok(Self {
            terms: dataset.iter().map(|z| (z, z.weight / n)).collect(),
            lambda,
        })
    }

    fn check(&self, model: &ModelState) -> Result<()> {
        for (z, _) in &self.terms {
            model.check_instance(z)?;
        }
        Ok(())
    }

    pub fn value(&self, model: &ModelState) -> Result<f64> {
        self.check(model)?;
        let data: f64 = self
            .terms
            .iter()
            .map(|(z, c)| {
                let fw = forward(model, z);
                c * (log_sum_exp(&fw.logits) - fw.logits[z.label])
            })
            .sum();
        Ok(data + 0.5 * self.lambda * model.theta.norm_squared())
    }

    pub fn grad(&self, model: &ModelState) -> Result<DVector<f64>> {
        self.check(model)?;
        let mut g = &model.theta * self.lambda;
        for (z, c) in &self.terms {
            let fw = forward(model, z);
            outer_to_params(model, &residual(&fw.probs, z.label), &fw.pool, &mut g, *c);
        }
        Ok(g)
    }

    pub fn hessian(&self, model: &ModelState) -> Result<DMatrix<f64>> {
        self.check(model)?;
        let p = model.num_params();
        if p > DIRECT_HESSIAN_CAP {
            return Err(Error::usage(format!(
                "explicit Hessian requested for {p} parameters (cap {DIRECT_HESSIAN_CAP}); use the hvp path"
            )));
        }
        let c = model.num_classes;
        let d = model.feature_dim;
        let mut h = DMatrix::from_diagonal_element(p, p, self.lambda);
        let mut ext = vec![0.0; d + 1];
        for (z, coef) in &self.terms {
            let fw = forward(model, z);
            ext[..d].copy_from_slice(fw.pool.as_slice());
            ext[d] = 1.0;
            for k in 0..c {
                for m in 0..c {
                    let a = if k == m {
                        fw.probs[k] * (1.0 - fw.probs[k])
                    } else {
                        -fw.probs[k] * fw.probs[m]
                    };
                    let a = a * coef;
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..=d {
                        let row = model.param_index(k, j);
                        for i in 0..=d {
                            h[(row, model.param_index(m, i))] += a * (ext[j] * ext[i]);
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn hvp(&self, model: &ModelState, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(model)?;
        model.check_param_vector(v)?;
        let mut out = v * self.lambda;
        for (z, coef) in &self.terms {
            let fw = forward(model, z);
            let u = contract_params(model, v, &fw.pool);
            let w = softmax_jacobian_apply(&fw.probs, &u);
            outer_to_params(model, &w, &fw.pool, &mut out, *coef);
        }
        Ok(out)
    }
}

impl ModelState {
    fn check_instance_shape(&self, instance: &Instance) -> Result<()> {
        if instance.feature_dim() != self.feature_dim {
            return Err(Error::schema(format!(
                "instance has {} feature columns, model expects {}",
                instance.feature_dim(),
                self.feature_dim
            )));
        }
        if instance.num_tokens() == 0 {
            return Err(Error::schema("instance has no token rows"));
        }
        Ok(())
    }
}

pub fn empirical_risk(model: &ModelState, dataset: &[Instance]) -> Result<f64> {
    WeightedRisk::empirical(dataset, model.ridge_lambda)?.value(model)
}

/// `(1/n) sum_i w_i grad L(z_i) + lambda * theta`.
pub fn empirical_risk_grad(model: &ModelState, dataset: &[Instance]) -> Result<DVector<f64>> {
    WeightedRisk::empirical(dataset, model.ridge_lambda)?.grad(model)
}

/// Explicit risk Hessian, `(1/n) sum_i w_i hess L(z_i) + lambda * I`.
pub fn hessian(model: &ModelState, dataset: &[Instance]) -> Result<DMatrix<f64>> {
    WeightedRisk::empirical(dataset, model.ridge_lambda)?.hessian(model)
}

/// Risk Hessian applied to `v` without forming the matrix.
pub fn hvp(model: &ModelState, dataset: &[Instance], v: &DVector<f64>) -> Result<DVector<f64>> {
    WeightedRisk::empirical(dataset, model.ridge_lambda)?.hvp(model, v)
}

/// `grad_X [ s^T grad_theta L((X, y), theta) ]` as an `N x d` matrix.
///
/// With mean pooling every row of the result is the same vector, the
/// pool-gradient divided by `N`.
pub fn mixed_grad_input(model: &ModelState, instance: &Instance, s: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_instance(instance)?;
    model.check_param_vector(s)?;
    let d = model.feature_dim;
    let fw = forward(model, instance);
    let e = residual(&fw.probs, instance.label);
    // S = sum_k e_k c_k with c_k = s_Wk . pool + s_bk
    let c = contract_params(model, s, &fw.pool);
    let ac = softmax_jacobian_apply(&fw.probs, &c);
    let mut dpool = DVector::zeros(d);
    for k in 0..model.num_classes {
        let w_row = model.theta.rows(k * d, d);
        let s_row = s.rows(k * d, d);
        dpool += w_row * ac[k] + s_row * e[k];
    }
    let n = instance.num_tokens();
    let row = dpool.transpose() / n as f64;
    Ok(DMatrix::from_fn(n, d, |_, j| row[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    fn single_token(values: &[f64], label: usize) -> Instance {
        Instance::new(DMatrix::from_row_slice(1, values.len(), values), label)
    }

    #[test]
    fn zero_model_is_uniform() {
        let inst = Instance::new(DMatrix::from_element(3, 4, 0.7), 1);
        let p = predict_proba(&ModelState::zeros(2, 4, 0.1), &inst).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let inst10 = Instance::new(DMatrix::from_element(2, 4, -1.3), 7);
        let model10 = ModelState::zeros(10, 4, 0.1);
        let p = predict_proba(&model10, &inst10).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!((loss(&model10, &inst10).unwrap().loss_value - 10f64.ln()).abs() < 1e-12);
        let l2 = loss(&ModelState::zeros(2, 4, 0.1), &inst).unwrap();
        assert!((l2.loss_value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l2.prob_true_class, 0.5);
    }

    #[test]
    fn hand_evaluated_softmax() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let model = ModelState::from_parts(&w, &DVector::zeros(2), 0.0).unwrap();
        let p = predict_proba(&model, &single_token(&[3f64.ln(), 0.0], 0)).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let model = ModelState::zeros(2, 3, 0.1);
        let inst = single_token(&[1.0, 2.0], 0);
        assert!(matches!(predict_proba(&model, &inst), Err(Error::Schema(_))));
        assert!(matches!(loss(&model, &inst), Err(Error::Schema(_))));
        let ok = single_token(&[1.0, 2.0, 3.0], 0);
        let bad_s = DVector::zeros(3);
        assert!(matches!(mixed_grad_input(&model, &ok, &bad_s), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let model = ModelState::zeros(2, 3, 0.1);
        assert!(matches!(empirical_risk_grad(&model, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn single_instance_no_ridge_grad_matches_loss_grad() {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.5]);
        let model = ModelState::from_parts(&w, &DVector::from_vec(vec![0.1, -0.1]), 0.0).unwrap();
        let inst = Instance::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]), 1);
        let g = empirical_risk_grad(&model, std::slice::from_ref(&inst)).unwrap();
        assert_eq!(g, loss(&model, &inst).unwrap().grad_theta);
    }

    #[test]
    fn hvp_of_zero_is_zero_and_mixed_grad_of_zero_s_is_zero() {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.5]);
        let model = ModelState::from_parts(&w, &DVector::from_vec(vec![0.1, -0.1]), 0.2).unwrap();
        let data = vec![Instance::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]), 1)];
        assert_eq!(hvp(&model, &data, &DVector::zeros(6)).unwrap(), DVector::zeros(6));
        let m = mixed_grad_input(&model, &data[0], &DVector::zeros(6)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_get_identical_gradients() {
        let w = DMatrix::from_row_slice(3, 2, &[0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
        let model = ModelState::from_parts(&w, &DVector::from_vec(vec![0.1, -0.1, 0.0]), 0.2).unwrap();
        let inst = Instance::new(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.4, -0.7]), 2);
        let s = DVector::from_fn(9, |i, _| (i as f64 * 0.37).sin());
        let m = mixed_grad_input(&model, &inst, &s).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn hessian_is_symmetric_and_ridge_shifted() {
        let w = DMatrix::from_row_slice(3, 2, &[0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
        let model = ModelState::from_parts(&w, &DVector::from_vec(vec![0.1, -0.1, 0.0]), 0.5).unwrap();
        let data = vec![
            Instance::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]), 0),
            Instance::new(DMatrix::from_row_slice(1, 2, &[0.2, -1.5]), 2),
        ];
        let h = hessian(&model, &data).unwrap();
        assert_eq!(h, h.transpose());
        let min_eig = h.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= 0.5 - 1e-9, "min eig {min_eig}");
        for j in 0..model.num_params() {
            let e = DVector::from_fn(model.num_params(), |i, _| if i == j { 1.0 } else { 0.0 });
            let col = hvp(&model, &data, &e).unwrap();
            for i in 0..model.num_params() {
                assert!(rel_close(col[i], h[(i, j)], 1e-12) || (col[i] - h[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hessian_cap_is_enforced() {
        let model = ModelState::zeros(2, 1_000, 0.1);
        let data = vec![Instance::new(DMatrix::zeros(1, 1_000), 0)];
        assert!(matches!(hessian(&model, &data), Err(Error::Usage(_))));
        assert!(hvp(&model, &data, &DVector::zeros(model.num_params())).is_ok());
    }

    #[test]
    fn prob_grad_is_scaled_loss_grad() {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.5]);
        let model = ModelState::from_parts(&w, &DVector::from_vec(vec![0.1, -0.1]), 0.0).unwrap();
        let inst = single_token(&[0.8, -1.1], 0);
        let pg = prob_grad(&model, &inst).unwrap();
        let lc = loss(&model, &inst).unwrap();
        let h = 1e-6;
        for i in 0..model.num_params() {
            let mut plus = model.clone();
            plus.theta[i] += h;
            let mut minus = model.clone();
            minus.theta[i] -= h;
            let fd = (predict_proba(&plus, &inst).unwrap()[0] - predict_proba(&minus, &inst).unwrap()[0]) / (2.0 * h);
            assert!((fd - pg[i]).abs() < 1e-8);
        }
        assert!(lc.prob_true_class > 0.0 && lc.prob_true_class <= 1.0);
    }
}
