//! Influence of training instances on predictions of the trained model.
//!
//! All quantities are evaluated at the trained parameters `theta_hat` with the
//! full-data risk Hessian `H`:
//!
//! * `influence(z, z_test) = grad F(z_test)^T H^-1 grad L(z)` with
//!   `F = -P(y_test | x_test)`, i.e. the rate at which down-weighting `z`
//!   changes `F`.
//! * `m_remove(z) = -grad P(z)^T H^-1 grad L(z)`, the self-influence.
//! * `m_replace(z) = -s^T (grad L(z) - grad L(z'))` with `s = H^-1 grad P(z)`
//!   for a baseline `z'` carrying the same label.
//! * The attribution of `m_replace` to token `t` is
//!   `-sum_l r[t,l] (X[t,l] - X'[t,l])`, where `r` is the path integral of
//!   `grad_X [s^T grad L(X(alpha))]` along `X(alpha) = X' + alpha (X - X')`,
//!   approximated with a midpoint Riemann sum.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{make_baseline, Baseline, BaselineKind};
use crate::error::{Error, Result};
use crate::model::{self, Instance, ModelState, DIRECT_HESSIAN_CAP};
use crate::train::TrainReport;

/// Riemann steps used when the caller does not choose.
pub const DEFAULT_RIEMANN_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Cholesky factorization of the explicit Hessian, computed once.
    #[default]
    Direct,
    /// Conjugate gradient on Hessian-vector products.
    Cg,
}

/// Test-side function whose change the influence measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceTarget {
    /// `F = -P(y | x)`; self-influence under this target is `m_remove`.
    #[default]
    NegProbability,
    /// `F = L(z_test)`.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub solver_mode: SolverMode,
    pub cg_tol: f64,
    /// Defaults to `10 * p`.
    pub cg_max_iters: Option<usize>,
    /// Added to the Hessian diagonal for every solve.
    pub damping: f64,
    /// Accept a model whose training did not reach tolerance.
    pub allow_unconverged: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            solver_mode: SolverMode::Direct,
            cg_tol: 1e-10,
            cg_max_iters: None,
            damping: 0.0,
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationScore {
    pub instance_index: usize,
    pub m_remove: f64,
    pub m_replace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub instance_index: usize,
    pub per_token: Vec<f64>,
    /// Sum of `per_token`.
    pub total: f64,
    pub m_remove: f64,
    pub m_replace_reference: f64,
    pub riemann_steps: usize,
    pub baseline_kind: BaselineKind,
}

impl AttributionReport {
    /// `|total - m_replace| / max(|m_replace|, 1e-12)`.
    pub fn completeness_gap(&self) -> f64 {
        (self.total - self.m_replace_reference).abs() / self.m_replace_reference.abs().max(1e-12)
    }
}

pub struct InfluenceEngine {
    model: ModelState,
    dataset: Vec<Instance>,
    config: EngineConfig,
    converged: bool,
    factor: Option<Cholesky<f64, Dyn>>,
    s_cache: Vec<OnceLock<DVector<f64>>>,
}

impl std::fmt::Debug for InfluenceEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InfluenceEngine")
            .field("num_params", &self.model.num_params())
            .field("num_instances", &self.dataset.len())
            .field("config", &self.config)
            .field("converged", &self.converged)
            .finish()
    }
}

impl InfluenceEngine {
    pub fn new(model: ModelState, dataset: Vec<Instance>, report: &TrainReport, config: EngineConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::usage("influence engine needs a nonempty training set"));
        }
        for z in &dataset {
            z.validate(model.feature_dim, model.num_classes)?;
        }
        if !report.converged && !config.allow_unconverged {
            return Err(Error::usage(format!(
                "model did not converge (gradient norm {:e}); retrain or allow unconverged models with damping",
                report.final_grad_norm
            )));
        }
        if !(config.damping >= 0.0) {
            return Err(Error::usage("damping must be nonnegative"));
        }
        if model.ridge_lambda + config.damping <= 0.0 {
            return Err(Error::usage(
                "risk Hessian is not guaranteed positive definite: lambda + damping must be > 0",
            ));
        }
        let p = model.num_params();
        let factor = match config.solver_mode {
            SolverMode::Direct => {
                if p > DIRECT_HESSIAN_CAP {
                    return Err(Error::usage(format!(
                        "direct solves need p <= {DIRECT_HESSIAN_CAP}, model has {p}; use cg"
                    )));
                }
                let mut h = model::hessian(&model, &dataset)?;
                for i in 0..p {
                    h[(i, i)] += config.damping;
                }
                Some(Cholesky::new(h).ok_or_else(|| Error::usage("risk Hessian is not positive definite"))?)
            }
            SolverMode::Cg => None,
        };
        let s_cache = (0..dataset.len()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            model,
            dataset,
            config,
            converged: report.converged,
            factor,
            s_cache,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn dataset(&self) -> &[Instance] {
        &self.dataset
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// True when the model was accepted without meeting the trainer's tolerance.
    pub fn used_unconverged_model(&self) -> bool {
        !self.converged
    }

    pub fn is_damped(&self) -> bool {
        self.config.damping > 0.0
    }

    /// `(H + damping I) v`.
    pub fn apply_hessian(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = model::hvp(&self.model, &self.dataset, v)?;
        out.axpy(self.config.damping, v, 1.0);
        Ok(out)
    }

    /// Solves `(H + damping I) x = b`.
    pub fn solve_hinv(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.model.num_params();
        if b.len() != p {
            return Err(Error::schema(format!(
                "right-hand side has length {}, expected {p}",
                b.len()
            )));
        }
        if let Some(chol) = &self.factor {
            return Ok(chol.solve(b));
        }
        self.conjugate_gradient(b)
    }

    fn conjugate_gradient(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let p = b.len();
        let b_norm = b.norm();
        let mut x = DVector::zeros(p);
        if b_norm == 0.0 {
            return Ok(x);
        }
        let max_iters = self.config.cg_max_iters.unwrap_or(10 * p);
        let target = self.config.cg_tol * b_norm;
        let mut r = b.clone();
        let mut dir = r.clone();
        let mut rr = r.norm_squared();
        for it in 0..max_iters {
            if rr.sqrt() <= target {
                return Ok(x);
            }
            let hd = self.apply_hessian(&dir)?;
            let alpha = rr / dir.dot(&hd);
            x.axpy(alpha, &dir, 1.0);
            // Recompute the true residual periodically to stop drift.
            if (it + 1) % 50 == 0 {
                r = b - self.apply_hessian(&x)?;
            } else {
                r.axpy(-alpha, &hd, 1.0);
            }
            let rr_next = r.norm_squared();
            dir = &r + &dir * (rr_next / rr);
            rr = rr_next;
        }
        let residual = (b - self.apply_hessian(&x)?).norm();
        if residual <= target {
            return Ok(x);
        }
        Err(Error::Convergence {
            stage: "conjugate gradient",
            residual: residual / b_norm,
            iters: max_iters,
        })
    }

    fn instance(&self, index: usize) -> Result<&Instance> {
        self.dataset.get(index).ok_or_else(|| {
            Error::usage(format!(
                "index {index} out of range for {} instances",
                self.dataset.len()
            ))
        })
    }

    pub fn loss_grad(&self, z: &Instance) -> Result<DVector<f64>> {
        Ok(model::loss(&self.model, z)?.grad_theta)
    }

    /// `s = H^-1 grad P(y | x)` for training instance `index`, solved once and cached.
    pub fn s_vector(&self, index: usize) -> Result<&DVector<f64>> {
        let cell = &self.s_cache[self.check_index(index)?];
        if let Some(s) = cell.get() {
            return Ok(s);
        }
        let s = self.s_for(self.instance(index)?)?;
        let _ = cell.set(s);
        Ok(cell.get().expect("published above"))
    }

    fn check_index(&self, index: usize) -> Result<usize> {
        self.instance(index).map(|_| index)
    }

    fn s_for(&self, z: &Instance) -> Result<DVector<f64>> {
        self.solve_hinv(&model::prob_grad(&self.model, z)?)
    }

    /// `I(z, z_test)` with `F = -P(y_test | x_test)`.
    pub fn influence(&self, train_z: &Instance, test_z: &Instance) -> Result<f64> {
        self.influence_with(InfluenceTarget::NegProbability, train_z, test_z)
    }

    pub fn influence_with(&self, target: InfluenceTarget, train_z: &Instance, test_z: &Instance) -> Result<f64> {
        train_z.validate(self.model.feature_dim, self.model.num_classes)?;
        test_z.validate(self.model.feature_dim, self.model.num_classes)?;
        let train_grad = self.loss_grad(train_z)?;
        match target {
            InfluenceTarget::NegProbability => Ok(neg_prob_influence(&self.s_for(test_z)?, &train_grad)),
            InfluenceTarget::Loss => Ok(self.solve_hinv(&self.loss_grad(test_z)?)?.dot(&train_grad)),
        }
    }

    /// `I(z, z_index)` for a training instance on the test side, reusing its cached `s`.
    pub fn influence_on(&self, train_z: &Instance, test_index: usize) -> Result<f64> {
        train_z.validate(self.model.feature_dim, self.model.num_classes)?;
        let s = self.s_vector(test_index)?;
        Ok(neg_prob_influence(s, &self.loss_grad(train_z)?))
    }

    /// Self-influence `m_remove(z_index)`.
    pub fn mem_remove(&self, index: usize) -> Result<MemorizationScore> {
        let z = self.instance(index)?;
        let m_remove = neg_prob_influence(self.s_vector(index)?, &self.loss_grad(z)?);
        Ok(MemorizationScore {
            instance_index: index,
            m_remove,
            m_replace: None,
        })
    }

    fn check_baseline(&self, z: &Instance, baseline: &Instance) -> Result<()> {
        if baseline.features.shape() != z.features.shape() {
            return Err(Error::usage(format!(
                "baseline shape {:?} differs from instance shape {:?}",
                baseline.features.shape(),
                z.features.shape()
            )));
        }
        if baseline.label != z.label {
            return Err(Error::usage("baseline must carry the instance's label"));
        }
        if baseline.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("baseline has non-finite features"));
        }
        Ok(())
    }

    /// Replacement-based memorization against `baseline`; also fills `m_remove`.
    pub fn mem_replace(&self, index: usize, baseline: &Instance) -> Result<MemorizationScore> {
        let z = self.instance(index)?;
        self.check_baseline(z, baseline)?;
        let s = self.s_vector(index)?;
        let g = self.loss_grad(z)?;
        let g_base = self.loss_grad(baseline)?;
        Ok(MemorizationScore {
            instance_index: index,
            m_remove: neg_prob_influence(s, &g),
            m_replace: Some(-s.dot(&(&g - &g_base))),
        })
    }

    /// Per-token attribution of `m_replace` with the midpoint rule over `steps` intervals.
    pub fn attribute(&self, index: usize, baseline: &Baseline, steps: usize) -> Result<AttributionReport> {
        let z = self.instance(index)?;
        let base = make_baseline(z, baseline)?;
        self.attribute_against(index, &base, baseline.kind(), steps)
    }

    /// As [`attribute`](Self::attribute) with an explicit baseline instance.
    pub fn attribute_against(
        &self,
        index: usize,
        baseline: &Instance,
        kind: BaselineKind,
        steps: usize,
    ) -> Result<AttributionReport> {
        if steps == 0 {
            return Err(Error::usage("riemann steps must be at least 1"));
        }
        let z = self.instance(index)?;
        let score = self.mem_replace(index, baseline)?;
        let s = self.s_vector(index)?;
        let delta = &z.features - &baseline.features;
        let integrand = self.path_integral(z, baseline, &delta, s, steps)?;
        let per_token: Vec<f64> = (0..z.num_tokens())
            .map(|t| -integrand.row(t).dot(&delta.row(t)))
            .collect();
        let total = per_token.iter().sum();
        Ok(AttributionReport {
            instance_index: index,
            per_token,
            total,
            m_remove: score.m_remove,
            m_replace_reference: score.m_replace.expect("mem_replace fills m_replace"),
            riemann_steps: steps,
            baseline_kind: kind,
        })
    }

    /// Midpoint approximation of `int_0^1 grad_X [s^T grad L(X' + a (X - X'))] da`.
    fn path_integral(
        &self,
        z: &Instance,
        baseline: &Instance,
        delta: &DMatrix<f64>,
        s: &DVector<f64>,
        steps: usize,
    ) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(z.num_tokens(), z.feature_dim());
        let mut point = Instance::new(baseline.features.clone(), z.label);
        for m in 0..steps {
            let alpha = (m as f64 + 0.5) / steps as f64;
            point.features.copy_from(&baseline.features);
            point.features.zip_apply(delta, |x, dx| *x += alpha * dx);
            acc += model::mixed_grad_input(&self.model, &point, s)?;
        }
        Ok(acc / steps as f64)
    }

    /// `m_remove` for every training instance, in index order.
    pub fn all_mem_remove(&self) -> Result<Vec<MemorizationScore>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..self.len()).into_par_iter().map(|i| self.mem_remove(i)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..self.len()).map(|i| self.mem_remove(i)).collect()
        }
    }

    /// Training instances sorted by descending `m_remove`, ties by ascending index.
    pub fn rank_by_memorization(&self) -> Result<Vec<MemorizationScore>> {
        let mut scores = self.all_mem_remove()?;
        sort_by_memorization(&mut scores);
        Ok(scores)
    }
}

fn neg_prob_influence(s_test: &DVector<f64>, train_loss_grad: &DVector<f64>) -> f64 {
    -s_test.dot(train_loss_grad)
}

/// Descending `m_remove`, ascending index on ties.
pub fn sort_by_memorization(scores: &mut [MemorizationScore]) {
    scores.sort_by(|a, b| {
        b.m_remove
            .total_cmp(&a.m_remove)
            .then(a.instance_index.cmp(&b.instance_index))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{train, TrainConfig};

    fn small_set() -> Vec<Instance> {
        let rows: [(&[f64], usize); 6] = [
            (&[1.0, 0.5, -0.2, 0.8], 1),
            (&[0.7, 1.2, 0.1, -0.4], 1),
            (&[-0.3, 0.9, 1.1, 0.2], 2),
            (&[-1.0, -0.5, 0.6, 1.4], 0),
            (&[0.2, -1.3, -0.8, 0.5], 0),
            (&[1.1, -0.1, 0.9, -1.2], 2),
        ];
        rows.iter()
            .map(|(x, y)| Instance::new(DMatrix::from_row_slice(2, 2, x), *y))
            .collect()
    }

    fn engine(mode: SolverMode) -> InfluenceEngine {
        let data = small_set();
        let (model, report) = train(&data, 3, 0.1, &TrainConfig::default()).unwrap();
        let cfg = EngineConfig {
            solver_mode: mode,
            ..EngineConfig::default()
        };
        InfluenceEngine::new(model, data, &report, cfg).unwrap()
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        for mode in [SolverMode::Direct, SolverMode::Cg] {
            let e = engine(mode);
            let x = e.solve_hinv(&DVector::zeros(e.model().num_params())).unwrap();
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ridge_only_hessian_divides_by_lambda() {
        // Zero features + balanced labels: the data Hessian lives only on the
        // bias block, so W-block directions see exactly lambda.
        let data = vec![
            Instance::new(DMatrix::zeros(1, 3), 0),
            Instance::new(DMatrix::zeros(1, 3), 1),
        ];
        let (model, report) = train(&data, 2, 0.25, &TrainConfig::default()).unwrap();
        let e = InfluenceEngine::new(model, data, &report, EngineConfig::default()).unwrap();
        let mut b = DVector::zeros(8);
        b[0] = 1.0;
        b[4] = -2.0;
        let x = e.solve_hinv(&b).unwrap();
        assert!((x[0] - 4.0).abs() < 1e-12 && (x[4] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn direct_and_cg_agree() {
        let direct = engine(SolverMode::Direct);
        let cg = engine(SolverMode::Cg);
        let b = DVector::from_fn(direct.model().num_params(), |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let xd = direct.solve_hinv(&b).unwrap();
        let xc = cg.solve_hinv(&b).unwrap();
        assert!((&xd - &xc).norm() <= 1e-7 * xd.norm());
        let resid = (cg.apply_hessian(&xc).unwrap() - &b).norm();
        assert!(resid <= 1e-10 * b.norm());
    }

    #[test]
    fn cg_non_convergence_carries_residual() {
        let data = small_set();
        let (model, report) = train(&data, 3, 0.1, &TrainConfig::default()).unwrap();
        let cfg = EngineConfig {
            solver_mode: SolverMode::Cg,
            cg_max_iters: Some(1),
            ..EngineConfig::default()
        };
        let e = InfluenceEngine::new(model, data, &report, cfg).unwrap();
        let b = DVector::from_fn(e.model().num_params(), |i, _| (i as f64).cos());
        match e.solve_hinv(&b) {
            Err(Error::Convergence { residual, .. }) => assert!(residual > 1e-10),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn solve_is_symmetric() {
        let e = engine(SolverMode::Direct);
        let p = e.model().num_params();
        let b1 = DVector::from_fn(p, |i, _| (i as f64 * 0.3).sin());
        let b2 = DVector::from_fn(p, |i, _| (i as f64 * 0.7).cos());
        let x1 = e.solve_hinv(&b1).unwrap();
        let x2 = e.solve_hinv(&b2).unwrap();
        assert!((x1.dot(&b2) - x2.dot(&b1)).abs() < 1e-8);
    }

    #[test]
    fn self_influence_is_mem_remove_bitwise() {
        let e = engine(SolverMode::Direct);
        for i in 0..e.len() {
            let z = e.dataset()[i].clone();
            assert_eq!(
                e.influence(&z, &z).unwrap().to_bits(),
                e.mem_remove(i).unwrap().m_remove.to_bits()
            );
        }
        let e = engine(SolverMode::Cg);
        let z = e.dataset()[2].clone();
        assert_eq!(
            e.influence(&z, &z).unwrap().to_bits(),
            e.mem_remove(2).unwrap().m_remove.to_bits()
        );
    }

    #[test]
    fn memorization_is_positive_and_solve_side_independent() {
        let e = engine(SolverMode::Direct);
        for i in 0..e.len() {
            let z = &e.dataset()[i];
            let m = e.mem_remove(i).unwrap().m_remove;
            assert!(m > 0.0);
            let other = -model::prob_grad(e.model(), z)
                .unwrap()
                .dot(&e.solve_hinv(&e.loss_grad(z).unwrap()).unwrap());
            assert!((m - other).abs() <= 1e-8 * m.abs());
        }
    }

    #[test]
    fn identical_baseline_has_zero_replace_score() {
        let e = engine(SolverMode::Direct);
        let z = e.dataset()[1].clone();
        assert_eq!(e.mem_replace(1, &z).unwrap().m_replace, Some(0.0));
    }

    #[test]
    fn baseline_mismatch_is_usage_error() {
        let e = engine(SolverMode::Direct);
        let mut wrong_label = e.dataset()[0].clone();
        wrong_label.label = 2;
        assert!(matches!(e.mem_replace(0, &wrong_label), Err(Error::Usage(_))));
        let wrong_shape = Instance::new(DMatrix::zeros(3, 2), e.dataset()[0].label);
        assert!(matches!(e.mem_replace(0, &wrong_shape), Err(Error::Usage(_))));
        assert!(matches!(e.attribute(0, &Baseline::Zero, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn unchanged_tokens_get_zero_attribution() {
        let e = engine(SolverMode::Direct);
        let z = &e.dataset()[0];
        let mut base = Instance::new(DMatrix::zeros(2, 2), z.label);
        base.features.set_row(1, &z.features.row(1));
        let report = e.attribute_against(0, &base, BaselineKind::Custom, 50).unwrap();
        assert_eq!(report.per_token[1], 0.0);
        assert_eq!(report.total, report.per_token.iter().sum::<f64>());
    }

    #[test]
    fn attribution_sums_to_replace_score() {
        let e = engine(SolverMode::Direct);
        for i in 0..e.len() {
            let r = e.attribute(i, &Baseline::Zero, 2000).unwrap();
            assert!(
                r.completeness_gap() <= 1e-3,
                "instance {i}: gap {}",
                r.completeness_gap()
            );
        }
    }

    #[test]
    fn ranking_ties_break_by_index() {
        let z = Instance::new(DMatrix::from_row_slice(1, 2, &[0.5, -0.5]), 0);
        let w = Instance::new(DMatrix::from_row_slice(1, 2, &[-0.5, 0.5]), 1);
        let data = vec![z.clone(), w.clone(), z, w];
        let (model, report) = train(&data, 2, 0.1, &TrainConfig::default()).unwrap();
        let e = InfluenceEngine::new(model, data, &report, EngineConfig::default()).unwrap();
        let ranked = e.rank_by_memorization().unwrap();
        let scores: Vec<f64> = ranked.iter().map(|s| s.m_remove).collect();
        assert!((scores[0] - scores[3]).abs() < 1e-12);
        let mut tied = ranked.clone();
        for s in tied.iter_mut() {
            s.m_remove = 1.0;
        }
        sort_by_memorization(&mut tied);
        let order: Vec<usize> = tied.iter().map(|s| s.instance_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn unconverged_model_needs_override() {
        let data = small_set();
        let (model, mut report) = train(&data, 3, 0.1, &TrainConfig::default()).unwrap();
        report.converged = false;
        assert!(matches!(
            InfluenceEngine::new(model.clone(), data.clone(), &report, EngineConfig::default()),
            Err(Error::Usage(_))
        ));
        let cfg = EngineConfig {
            allow_unconverged: true,
            damping: 1e-3,
            ..EngineConfig::default()
        };
        let e = InfluenceEngine::new(model, data, &report, cfg).unwrap();
        assert!(e.used_unconverged_model() && e.is_damped());
    }
}
