//! Validation protocols built on memorization scores: removal ablation,
//! reduction rate of self-influence under token replacement, seed stability
//! of rankings, and the positive-token fraction used to measure atypicality.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_baseline, replace_tokens, Baseline};
use crate::error::{Error, Result};
use crate::influence::{EngineConfig, InfluenceEngine, MemorizationScore, DEFAULT_RIEMANN_STEPS};
use crate::model::{accuracy, Instance};
use crate::train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    TopMemorized,
    UniformRandom,
}

impl std::fmt::Display for AblationArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationArm::TopMemorized => "top_memorized",
            AblationArm::UniformRandom => "uniform_random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Fractions of the training set to remove, strictly increasing in `[0, 1)`.
    pub fractions: Vec<f64>,
    pub num_seeds: usize,
    pub arms: Vec<AblationArm>,
    pub master_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.2, 0.3],
            num_seeds: 5,
            arms: vec![AblationArm::TopMemorized, AblationArm::UniformRandom],
            master_seed: 0,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seeds < 2 {
            return Err(Error::usage("ablation needs at least 2 seeds for std reporting"));
        }
        for f in &self.fractions {
            if !(0.0..1.0).contains(f) {
                return Err(Error::usage(format!("fraction {f} outside [0, 1)")));
            }
        }
        if self.fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("fractions must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub arm: AblationArm,
    pub fraction: f64,
    pub removed_count: usize,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation over seeds.
    pub std_test_accuracy: f64,
    /// Lowest `m_remove` among removed instances (NaN when nothing was removed).
    pub threshold_score: f64,
    /// Lowest `|m_remove|` among removed instances.
    pub threshold_abs_score: f64,
    pub warnings: Vec<String>,
}

/// One retrain of one arm at one fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub arm: AblationArm,
    pub fraction: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    /// Test accuracy of the model trained on the full training set.
    pub full_accuracy: f64,
    pub results: Vec<ExperimentResult>,
    pub runs: Vec<AblationRun>,
}

impl AblationOutcome {
    pub fn result(&self, arm: AblationArm, fraction: f64) -> Option<&ExperimentResult> {
        self.results.iter().find(|r| r.arm == arm && r.fraction == fraction)
    }
}

fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined inputs.
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Removes the top-ranked or randomly chosen training instances, retrains,
/// and reports test accuracy per arm and fraction.
pub fn ablation_experiment(
    train_set: &[Instance],
    test_set: &[Instance],
    num_classes: usize,
    lambda: f64,
    cfg: &AblationConfig,
    train_cfg: &TrainConfig,
    engine_cfg: &EngineConfig,
) -> Result<AblationOutcome> {
    cfg.validate()?;
    let (model, report) = train(train_set, num_classes, lambda, train_cfg)?;
    let full_accuracy = accuracy(&model, test_set)?;
    let engine = InfluenceEngine::new(model, train_set.to_vec(), &report, engine_cfg.clone())?;
    let ranked = engine.rank_by_memorization()?;
    ablation_with_ranking(
        train_set,
        test_set,
        num_classes,
        lambda,
        cfg,
        train_cfg,
        &ranked,
        full_accuracy,
    )
}

/// Ablation against a precomputed ranking (descending `m_remove`).
#[allow(clippy::too_many_arguments)]
pub fn ablation_with_ranking(
    train_set: &[Instance],
    test_set: &[Instance],
    num_classes: usize,
    lambda: f64,
    cfg: &AblationConfig,
    train_cfg: &TrainConfig,
    ranked: &[MemorizationScore],
    full_accuracy: f64,
) -> Result<AblationOutcome> {
    cfg.validate()?;
    let n = train_set.len();
    if ranked.len() != n {
        return Err(Error::usage("ranking does not cover the training set"));
    }
    let mut score_of = vec![0.0; n];
    for s in ranked {
        score_of[s.instance_index] = s.m_remove;
    }

    struct Job {
        arm: AblationArm,
        fraction_idx: usize,
        seed_idx: usize,
        removed: Vec<usize>,
    }
    let mut jobs = Vec::new();
    for (fi, &fraction) in cfg.fractions.iter().enumerate() {
        let k = (fraction * n as f64).round() as usize;
        for &arm in &cfg.arms {
            for j in 0..cfg.num_seeds {
                let removed = match arm {
                    AblationArm::TopMemorized => ranked[..k].iter().map(|s| s.instance_index).collect(),
                    AblationArm::UniformRandom => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, fi as u64, j as u64));
                        let mut idx = sample(&mut rng, n, k).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                };
                jobs.push(Job {
                    arm,
                    fraction_idx: fi,
                    seed_idx: j,
                    removed,
                });
            }
        }
    }

    let outcomes: Vec<Result<(f64, bool)>> = par_map(&jobs, |job| {
        let mut keep = vec![true; n];
        for &i in &job.removed {
            keep[i] = false;
        }
        let remaining: Vec<Instance> = train_set
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(z, _)| z.clone())
            .collect();
        if remaining.is_empty() {
            return Err(Error::usage("ablation removed every training instance"));
        }
        let seeded = TrainConfig {
            seed: mix_seed(cfg.master_seed, 1_000 + job.fraction_idx as u64, job.seed_idx as u64),
            ..train_cfg.clone()
        };
        let (m, rep) = train(&remaining, num_classes, lambda, &seeded)?;
        Ok((accuracy(&m, test_set)?, rep.converged))
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for (job, out) in jobs.iter().zip(outcomes) {
        let (acc, converged) = out?;
        runs.push(AblationRun {
            arm: job.arm,
            fraction: cfg.fractions[job.fraction_idx],
            seed: job.seed_idx as u64,
            test_accuracy: acc,
            converged,
        });
    }

    let mut results = Vec::new();
    for (fi, &fraction) in cfg.fractions.iter().enumerate() {
        for &arm in &cfg.arms {
            let group: Vec<(&Job, &AblationRun)> = jobs
                .iter()
                .zip(&runs)
                .filter(|(j, _)| j.arm == arm && j.fraction_idx == fi)
                .collect();
            let accs: Vec<f64> = group.iter().map(|(_, r)| r.test_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let mut warnings = Vec::new();
            let mut threshold = f64::INFINITY;
            let mut threshold_abs = f64::INFINITY;
            for (job, run) in &group {
                for &i in &job.removed {
                    threshold = threshold.min(score_of[i]);
                    threshold_abs = threshold_abs.min(score_of[i].abs());
                }
                for c in 0..num_classes {
                    let total = train_set.iter().filter(|z| z.label == c).count();
                    let gone = job.removed.iter().filter(|&&i| train_set[i].label == c).count();
                    if total > 0 && gone == total {
                        warnings.push(format!("seed {}: every instance of class {c} removed", run.seed));
                    }
                }
                if !run.converged {
                    warnings.push(format!("seed {}: retrain did not converge", run.seed));
                }
            }
            if threshold == f64::INFINITY {
                threshold = f64::NAN;
                threshold_abs = f64::NAN;
            }
            results.push(ExperimentResult {
                arm,
                fraction,
                removed_count: group.first().map_or(0, |(j, _)| j.removed.len()),
                mean_test_accuracy: mean,
                std_test_accuracy: std,
                threshold_score: threshold,
                threshold_abs_score: threshold_abs,
                warnings,
            });
        }
    }
    Ok(AblationOutcome {
        full_accuracy,
        results,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenArm {
    /// Replace the tokens with the largest attribution.
    Attributed,
    /// Replace the same number of uniformly chosen tokens.
    Random,
}

impl std::fmt::Display for TokenArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenArm::Attributed => "attributed",
            TokenArm::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub top_instance_fraction: f64,
    pub token_fractions: Vec<f64>,
    pub riemann_steps: usize,
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            top_instance_fraction: 0.10,
            token_fractions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            riemann_steps: DEFAULT_RIEMANN_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRateResult {
    pub token_fraction_removed: f64,
    pub mean_reduction_rate: f64,
    pub arm: TokenArm,
    pub instances_used: usize,
}

/// Self-influence denominators below this magnitude are excluded.
pub const REDUCTION_ZERO_GUARD: f64 = 1e-12;

/// Mean fractional drop of self-influence when a share of each top-memorized
/// instance's tokens is replaced by the baseline row.
///
/// The perturbed influence `I(z', z)` reuses the trained model and Hessian.
pub fn reduction_rate(
    engine: &InfluenceEngine,
    cfg: &ReductionConfig,
    arm: TokenArm,
    baseline: &Baseline,
) -> Result<Vec<ReductionRateResult>> {
    if !(cfg.top_instance_fraction > 0.0 && cfg.top_instance_fraction <= 1.0) {
        return Err(Error::usage("top_instance_fraction must lie in (0, 1]"));
    }
    if cfg.token_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::usage("token fractions must lie in [0, 1]"));
    }
    let ranked = engine.rank_by_memorization()?;
    let top = ((cfg.top_instance_fraction * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
    let chosen: Vec<&MemorizationScore> = ranked[..top]
        .iter()
        .filter(|s| s.m_remove.abs() > REDUCTION_ZERO_GUARD)
        .collect();
    if chosen.is_empty() {
        return Err(Error::usage("every candidate instance has (near) zero self-influence"));
    }

    // rates[fraction][instance]
    let per_instance: Vec<Result<Vec<f64>>> = par_map(&chosen, |score| {
        let index = score.instance_index;
        let z = &engine.dataset()[index];
        let base = make_baseline(z, baseline)?;
        let n_tok = z.num_tokens();
        let order: Vec<usize> = match arm {
            TokenArm::Attributed => {
                let report = engine.attribute_against(index, &base, baseline.kind(), cfg.riemann_steps)?;
                let mut order: Vec<usize> = (0..n_tok).collect();
                order.sort_by(|&a, &b| report.per_token[b].total_cmp(&report.per_token[a]).then(a.cmp(&b)));
                order
            }
            TokenArm::Random => Vec::new(),
        };
        cfg.token_fractions
            .iter()
            .enumerate()
            .map(|(fi, &frac)| {
                let k = ((frac * n_tok as f64).round() as usize).min(n_tok);
                let tokens: Vec<usize> = match arm {
                    TokenArm::Attributed => order[..k].to_vec(),
                    TokenArm::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64, fi as u64));
                        sample(&mut rng, n_tok, k).into_vec()
                    }
                };
                let perturbed = replace_tokens(z, &base, &tokens);
                let original = score.m_remove;
                let after = engine.influence_on(&perturbed, index)?;
                Ok((original - after) / original)
            })
            .collect()
    });
    let per_instance: Vec<Vec<f64>> = per_instance.into_iter().collect::<Result<_>>()?;

    Ok(cfg
        .token_fractions
        .iter()
        .enumerate()
        .map(|(fi, &frac)| ReductionRateResult {
            token_fraction_removed: frac,
            mean_reduction_rate: per_instance.iter().map(|r| r[fi]).sum::<f64>() / per_instance.len() as f64,
            arm,
            instances_used: per_instance.len(),
        })
        .collect())
}

/// Pairwise Spearman correlations between the `m_remove` rankings of models
/// trained from different seeds.
pub fn seed_stability(
    train_set: &[Instance],
    num_classes: usize,
    lambda: f64,
    seeds: &[u64],
    train_cfg: &TrainConfig,
    engine_cfg: &EngineConfig,
) -> Result<DMatrix<f64>> {
    if seeds.len() < 2 {
        return Err(Error::usage("seed stability needs at least 2 seeds"));
    }
    let scores: Vec<Result<Vec<f64>>> = par_map(seeds, |&seed| {
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let (model, report): (_, TrainReport) = train(train_set, num_classes, lambda, &cfg)?;
        let engine = InfluenceEngine::new(model, train_set.to_vec(), &report, engine_cfg.clone())?;
        Ok(engine.all_mem_remove()?.into_iter().map(|s| s.m_remove).collect())
    });
    let scores: Vec<Vec<f64>> = scores.into_iter().collect::<Result<_>>()?;
    let k = seeds.len();
    let mut out = DMatrix::identity(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let rho = spearman(&scores[a], &scores[b])?;
            out[(a, b)] = rho;
            out[(b, a)] = rho;
        }
    }
    Ok(out)
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::usage("spearman needs at least 2 values"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::usage("spearman input contains NaN"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::usage("spearman input has zero rank variance"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Add-k smoothed share of positive tokens: `(pos + k) / (pos + neg + 2k)`.
pub fn positive_fraction(pos_count: u32, neg_count: u32, k: f64) -> f64 {
    let pos = pos_count as f64;
    let neg = neg_count as f64;
    (pos + k) / (pos + neg + 2.0 * k)
}

pub const DEFAULT_SMOOTHING_K: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionGroup {
    Top,
    All,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub group: FractionGroup,
    pub class: usize,
    pub mean_positive_fraction: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSummary {
    pub rows: Vec<FractionRow>,
    pub warnings: Vec<String>,
}

impl FractionSummary {
    pub fn get(&self, group: FractionGroup, class: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.class == class)
            .map(|r| r.mean_positive_fraction)
    }
}

/// Mean positive fraction of the most memorized, all, and least memorized
/// instances of each class. Groups are taken per class from `ranked`
/// (descending `m_remove`).
pub fn group_fraction_summary(
    ranked: &[MemorizationScore],
    labels: &[usize],
    annotations: &[(u32, u32)],
    top_frac: f64,
    bottom_frac: f64,
    k: f64,
) -> Result<FractionSummary> {
    if labels.len() != annotations.len() {
        return Err(Error::usage("labels and annotations have different lengths"));
    }
    if ranked.iter().any(|s| s.instance_index >= labels.len()) {
        return Err(Error::usage("ranking refers to an unannotated instance"));
    }
    for f in [top_frac, bottom_frac] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::usage("group fractions must lie in (0, 1]"));
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for class in 0..num_classes {
        let members: Vec<f64> = ranked
            .iter()
            .filter(|s| labels[s.instance_index] == class)
            .map(|s| {
                let (pos, neg) = annotations[s.instance_index];
                positive_fraction(pos, neg, k)
            })
            .collect();
        if members.is_empty() {
            warnings.push(format!("class {class} has no ranked instances"));
            continue;
        }
        let take = |f: f64| ((f * members.len() as f64).ceil() as usize).clamp(1, members.len());
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let n_top = take(top_frac);
        let n_bottom = take(bottom_frac);
        for (group, slice) in [
            (FractionGroup::Top, &members[..n_top]),
            (FractionGroup::All, &members[..]),
            (FractionGroup::Bottom, &members[members.len() - n_bottom..]),
        ] {
            rows.push(FractionRow {
                group,
                class,
                mean_positive_fraction: mean(slice),
                count: slice.len(),
            });
        }
    }
    Ok(FractionSummary { rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&a, &rev).unwrap(), -1.0);
        let b = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert!((spearman(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Usage(_))));
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        // Pearson on average ranks, hand-computed: ranks a = [1.5,1.5,3,4], b = [1,2,3,4].
        let rho = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((rho - expected).abs() < 1e-12);
    }

    #[test]
    fn positive_fraction_examples() {
        assert_eq!(positive_fraction(0, 0, 0.01), 0.5);
        assert!((positive_fraction(1, 0, 0.01) - 1.01 / 1.02).abs() < 1e-15);
        assert!((positive_fraction(1, 0, 0.01) - 0.990196).abs() < 1e-6);
        for k in [0.01, 0.5, 3.0] {
            assert_eq!(positive_fraction(7, 7, k), 0.5);
        }
    }

    fn ranked(n: usize) -> Vec<MemorizationScore> {
        (0..n)
            .map(|i| MemorizationScore {
                instance_index: i,
                m_remove: (n - i) as f64,
                m_replace: None,
            })
            .collect()
    }

    #[test]
    fn identical_annotations_give_equal_rows() {
        let labels = vec![0, 1, 0, 1, 0, 1];
        let ann = vec![(2, 1); 6];
        let s = group_fraction_summary(&ranked(6), &labels, &ann, 0.3, 0.3, 0.01).unwrap();
        for class in 0..2 {
            let top = s.get(FractionGroup::Top, class).unwrap();
            assert_eq!(top, s.get(FractionGroup::All, class).unwrap());
            assert_eq!(top, s.get(FractionGroup::Bottom, class).unwrap());
        }
    }

    #[test]
    fn full_top_fraction_equals_all() {
        let labels = vec![0, 1, 0, 1, 0, 1];
        let ann = vec![(2, 1), (0, 3), (1, 1), (4, 0), (0, 0), (2, 2)];
        let s = group_fraction_summary(&ranked(6), &labels, &ann, 1.0, 0.2, 0.01).unwrap();
        for class in 0..2 {
            assert_eq!(s.get(FractionGroup::Top, class), s.get(FractionGroup::All, class));
        }
    }

    #[test]
    fn empty_class_is_omitted_with_warning() {
        let labels = vec![0, 2, 0];
        let ann = vec![(1, 0); 3];
        let s = group_fraction_summary(&ranked(3), &labels, &ann, 0.5, 0.5, 0.01).unwrap();
        assert!(s.get(FractionGroup::All, 1).is_none());
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn empty_fraction_list_gives_no_results() {
        let data: Vec<Instance> = (0..6)
            .map(|i| Instance::new(DMatrix::from_element(1, 2, i as f64 - 2.5), usize::from(i >= 3)))
            .collect();
        let cfg = AblationConfig {
            fractions: vec![],
            num_seeds: 2,
            ..AblationConfig::default()
        };
        let out = ablation_experiment(
            &data,
            &data,
            2,
            0.1,
            &cfg,
            &TrainConfig::default(),
            &EngineConfig::default(),
        )
        .unwrap();
        assert!(out.results.is_empty() && out.runs.is_empty());
    }

    #[test]
    fn ablation_config_validation() {
        let bad = AblationConfig {
            fractions: vec![0.3, 0.2],
            ..AblationConfig::default()
        };
        assert!(bad.validate().is_err());
        let one_seed = AblationConfig {
            num_seeds: 1,
            ..AblationConfig::default()
        };
        assert!(one_seed.validate().is_err());
    }

    #[test]
    fn seed_stability_needs_two_seeds() {
        let data: Vec<Instance> = (0..4)
            .map(|i| Instance::new(DMatrix::from_element(1, 2, i as f64), i % 2))
            .collect();
        let r = seed_stability(&data, 2, 0.1, &[1], &TrainConfig::default(), &EngineConfig::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn positive_fraction_is_monotone(pos in 0u32..1000, neg in 0u32..1000, k in 0.001f64..5.0) {
            let f = positive_fraction(pos, neg, k);
            prop_assert!(f > 0.0 && f < 1.0);
            prop_assert!(positive_fraction(pos + 1, neg, k) > f);
            prop_assert!(positive_fraction(pos, neg + 1, k) < f);
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(a.iter().any(|&x| x != a[0]) && b.iter().any(|&x| x != b[0]));
            let rho = spearman(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&rho));
            let a_exp: Vec<f64> = a.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
            prop_assert!((spearman(&a_exp, &b).unwrap() - rho).abs() < 1e-12);
            let neg_b: Vec<f64> = b.iter().map(|x| -x).collect();
            prop_assert!((spearman(&a, &neg_b).unwrap() + rho).abs() < 1e-12);
            prop_assert!((spearman(&b, &a).unwrap() - rho).abs() < 1e-12);
        }
    }
}
