//! `memattr` command line.
//!
//! Every subcommand writes its artifacts plus a `manifest.json` (resolved
//! configuration, tool version and git revision) into `--out-dir`. Outputs
//! are a pure function of the input files and flags, so reruns are
//! byte-identical.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::data::{
    generate_clusters, generate_longtail, load_dataset, load_model, polarity_counts, save_dataset, save_model,
    save_scores, Baseline, BaselineKind, ClusterSpec, DatasetSchema, LongTailSpec, ModelFile, ScoreRecord,
};
use crate::error::Error;
use crate::experiments::{
    ablation_experiment, group_fraction_summary, reduction_rate, seed_stability, AblationArm, AblationConfig,
    ReductionConfig, TokenArm, DEFAULT_SMOOTHING_K,
};
use crate::influence::{EngineConfig, InfluenceEngine, SolverMode, DEFAULT_RIEMANN_STEPS};
use crate::model::{Instance, ModelState};
use crate::train::{train, Optimizer, TrainConfig, TrainReport};

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "MEMATTR_THREADS";

const GIT_REV: &str = match option_env!("MEMATTR_GIT_REV") {
    Some(rev) => rev,
    None => "unknown",
};

#[derive(Debug, Parser)]
#[command(
    name = "memattr",
    version,
    about = "Self-influence memorization scores and per-token memorization attribution",
    long_about = None,
    after_help = "Set MEMATTR_THREADS to limit the number of worker threads."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (long-tail subpopulations or Gaussian clusters).
    Synth(SynthArgs),
    /// Train the ridge-regularized pooled-linear softmax model.
    Train(TrainArgs),
    /// Compute removal (and optionally replacement) memorization scores for every training instance.
    Score(ScoreArgs),
    /// Attribute replacement memorization scores to individual tokens.
    Attribute(AttributeArgs),
    /// Remove top-memorized vs random training instances and measure test accuracy.
    Ablate(AblateArgs),
    /// Reduction rate of self-influence after replacing attributed vs random tokens.
    Reduction(ReductionArgs),
    /// Pairwise Spearman correlation of rankings from differently seeded models.
    Stability(StabilityArgs),
    /// Mean positive-token fraction of top / all / bottom memorized instances per class.
    FractionSummary(FractionArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SynthKind {
    Longtail,
    Clusters,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "longtail")]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    num_classes: usize,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Long-tail: number of frequent subpopulations.
    #[arg(long, default_value_t = 4)]
    num_head: usize,
    /// Long-tail: number of rare subpopulations.
    #[arg(long, default_value_t = 40)]
    num_tail: usize,
    #[arg(long, default_value_t = 40)]
    head_frequency: usize,
    #[arg(long, default_value_t = 1)]
    tail_frequency: usize,
    #[arg(long, default_value_t = 20)]
    test_head_frequency: usize,
    #[arg(long, default_value_t = 1.0)]
    test_tail_presence: f64,
    #[arg(long, default_value_t = 1.0)]
    class_signal: f64,
    #[arg(long, default_value_t = 3.0)]
    signature_scale: f64,
    /// Long-tail: keep rare instances' non-signature tokens on their own class.
    #[arg(long)]
    no_flip: bool,
    /// Long-tail: projection threshold for counting a token as positive/negative.
    #[arg(long, default_value_t = 0.5)]
    polarity_threshold: f64,
    /// Clusters: number of instances.
    #[arg(long, default_value_t = 50)]
    num_instances: usize,
    /// Clusters: norm of each class mean.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct OutArgs {
    /// Directory receiving all artifacts.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OptimizerArg {
    Newton,
    GradientDescent,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    /// Ridge strength lambda (> 0).
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 50_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    /// Standard deviation of the random initialization (0 = zero init).
    #[arg(long, default_value_t = 0.0)]
    init_scale: f64,
    #[arg(long, value_enum, default_value = "newton")]
    optimizer: OptimizerArg,
    /// Master seed for initialization and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            seed: self.seed,
            init_scale: self.init_scale,
            optimizer: match self.optimizer {
                OptimizerArg::Newton => Optimizer::Newton,
                OptimizerArg::GradientDescent => Optimizer::GradientDescent,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SolverArg {
    Direct,
    Cg,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EngineArgs {
    #[arg(long, value_enum, default_value = "direct")]
    solver: SolverArg,
    #[arg(long, default_value_t = 1e-10)]
    cg_tol: f64,
    #[arg(long)]
    cg_max_iters: Option<usize>,
    /// Added to the Hessian diagonal in every solve.
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    /// Score a model whose training stopped before reaching --grad-tol.
    #[arg(long)]
    allow_unconverged: bool,
}

impl EngineArgs {
    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            solver_mode: match self.solver {
                SolverArg::Direct => SolverMode::Direct,
                SolverArg::Cg => SolverMode::Cg,
            },
            cg_tol: self.cg_tol,
            cg_max_iters: self.cg_max_iters,
            damping: self.damping,
            allow_unconverged: self.allow_unconverged,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BaselineArg {
    Zero,
    Mean,
    Custom,
}

#[derive(Debug, Clone, Args, Serialize)]
struct BaselineArgs {
    /// Baseline token row: zero vector, dataset mean token, or --baseline-row.
    #[arg(long, value_enum, default_value = "zero")]
    baseline: BaselineArg,
    /// Comma-separated row for --baseline custom.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    baseline_row: Option<Vec<f64>>,
}

impl BaselineArgs {
    fn resolve(&self, dataset: &[Instance]) -> Result<Baseline, Error> {
        let kind = match self.baseline {
            BaselineArg::Zero => BaselineKind::Zero,
            BaselineArg::Mean => BaselineKind::Mean,
            BaselineArg::Custom => BaselineKind::Custom,
        };
        let row = self.baseline_row.as_ref().map(|r| DVector::from_vec(r.clone()));
        Baseline::from_kind(kind, dataset, row.as_ref())
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    train: PathBuf,
    /// Previously trained model.json; trained from --train when absent.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Also compute replacement scores against the baseline.
    #[arg(long)]
    with_replace: bool,
    #[command(flatten)]
    baseline: BaselineArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct AttributeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Instances to attribute (comma-separated); all when absent.
    #[arg(long, value_delimiter = ',')]
    indices: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_RIEMANN_STEPS)]
    riemann_steps: usize,
    #[command(flatten)]
    baseline: BaselineArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    num_seeds: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct ReductionArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.10)]
    top_fraction: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 0.9])]
    token_fractions: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_RIEMANN_STEPS)]
    riemann_steps: usize,
    #[command(flatten)]
    baseline: BaselineArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct StabilityArgs {
    #[arg(long)]
    train: PathBuf,
    /// Initialization seeds, at least two.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3])]
    seeds: Vec<u64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct FractionArgs {
    #[arg(long)]
    train: PathBuf,
    /// CSV with columns instance_index,pos_count,neg_count.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.10)]
    top_fraction: f64,
    #[arg(long, default_value_t = 0.10)]
    bottom_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_K)]
    smoothing_k: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    out: OutArgs,
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
struct StageError {
    stage: &'static str,
    source: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Usage(format!("csv: {other:?}")),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    git_rev: &'static str,
    subcommand: &'static str,
    config: &'a C,
    outputs: Vec<&'static str>,
}

fn write_manifest<C: Serialize>(
    out: &Path,
    subcommand: &'static str,
    config: &C,
    outputs: Vec<&'static str>,
) -> Result<(), StageError> {
    let manifest = Manifest {
        tool: "memattr",
        version: env!("CARGO_PKG_VERSION"),
        git_rev: GIT_REV,
        subcommand,
        config,
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest).stage("manifest")?;
    text.push('\n');
    fs::write(out.join("manifest.json"), text).stage("manifest")
}

fn prepare_out(out: &OutArgs) -> Result<&Path, StageError> {
    fs::create_dir_all(&out.out_dir).stage("output directory")?;
    Ok(&out.out_dir)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trained (or loaded) model plus the engine built on it.
fn build_engine(
    dataset: Vec<Instance>,
    num_classes: usize,
    model_file: Option<&Path>,
    model_args: &ModelArgs,
    engine_args: &EngineArgs,
) -> Result<InfluenceEngine, StageError> {
    let (model, report) = obtain_model(&dataset, num_classes, model_file, model_args)?;
    InfluenceEngine::new(model, dataset, &report, engine_args.engine_config()).stage("influence engine")
}

fn obtain_model(
    dataset: &[Instance],
    num_classes: usize,
    model_file: Option<&Path>,
    model_args: &ModelArgs,
) -> Result<(ModelState, TrainReport), StageError> {
    match model_file {
        Some(path) => {
            let file = load_model(path).stage("load model")?;
            let d = dataset.first().map_or(file.feature_dim, |z| z.feature_dim());
            if file.num_classes != num_classes || file.feature_dim != d {
                return Err(Error::Schema("model file does not match the dataset schema".into())).stage("load model");
            }
            Ok(file.into_parts())
        }
        None => train(dataset, num_classes, model_args.lambda, &model_args.train_config()).stage("training"),
    }
}

fn load(path: &Path) -> Result<(DatasetSchema, Vec<Instance>), StageError> {
    load_dataset(path, None).stage("load dataset")
}

fn cmd_synth(args: &SynthArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    match args.kind {
        SynthKind::Longtail => {
            let defaults = LongTailSpec::default();
            let spec = LongTailSpec {
                num_classes: args.num_classes,
                feature_dim: args.feature_dim.unwrap_or(defaults.feature_dim),
                tokens_per_instance: args.tokens.unwrap_or(defaults.tokens_per_instance),
                num_head_subpops: args.num_head,
                num_tail_subpops: args.num_tail,
                head_frequency: args.head_frequency,
                tail_frequency: args.tail_frequency,
                test_head_frequency: args.test_head_frequency,
                test_tail_presence: args.test_tail_presence,
                noise_sigma: args.noise.unwrap_or(defaults.noise_sigma),
                class_signal: args.class_signal,
                signature_scale: args.signature_scale,
                atypical_flip_features: !args.no_flip,
                seed: args.seed,
            };
            let corpus = generate_longtail(&spec).stage("generate")?;
            let schema = spec.schema();
            save_dataset(out.join("train.jsonl"), &schema, &corpus.train).stage("write dataset")?;
            save_dataset(out.join("test.jsonl"), &schema, &corpus.test).stage("write dataset")?;
            let mut outputs = vec!["train.jsonl", "test.jsonl"];
            if spec.num_classes == 2 {
                #[derive(Serialize)]
                struct Row {
                    instance_index: usize,
                    pos_count: u32,
                    neg_count: u32,
                    is_tail: bool,
                }
                let dir = corpus.polarity_direction();
                let rows: Vec<Row> = corpus
                    .train
                    .iter()
                    .enumerate()
                    .map(|(i, z)| {
                        let (pos, neg) = polarity_counts(z, &dir, args.polarity_threshold);
                        Row {
                            instance_index: i,
                            pos_count: pos,
                            neg_count: neg,
                            is_tail: corpus.is_tail(z),
                        }
                    })
                    .collect();
                write_csv(&out.join("train_annotations.csv"), &rows).stage("write annotations")?;
                outputs.push("train_annotations.csv");
            }
            write_manifest(out, "synth", args, outputs)
        }
        SynthKind::Clusters => {
            let defaults = ClusterSpec::default();
            let spec = ClusterSpec {
                num_instances: args.num_instances,
                feature_dim: args.feature_dim.unwrap_or(defaults.feature_dim),
                num_classes: args.num_classes,
                tokens_per_instance: args.tokens.unwrap_or(defaults.tokens_per_instance),
                separation: args.separation,
                noise_sigma: args.noise.unwrap_or(defaults.noise_sigma),
                seed: args.seed,
            };
            let data = generate_clusters(&spec).stage("generate")?;
            let schema = DatasetSchema::new(
                spec.feature_dim,
                spec.num_classes,
                format!("clusters seed={}", spec.seed),
            );
            save_dataset(out.join("train.jsonl"), &schema, &data).stage("write dataset")?;
            write_manifest(out, "synth", args, vec!["train.jsonl"])
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    let (model, report) =
        train(&data, schema.num_classes, args.model.lambda, &args.model.train_config()).stage("training")?;
    save_model(out.join("model.json"), &ModelFile::new(&model, &report)).stage("write model")?;
    write_manifest(out, "train", args, vec!["model.json"])
}

fn cmd_score(args: &ScoreArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    let baseline = args.baseline.resolve(&data).stage("baseline")?;
    let engine = build_engine(
        data,
        schema.num_classes,
        args.model_file.as_deref(),
        &args.model,
        &args.engine,
    )?;
    let records: Vec<ScoreRecord> = if args.with_replace {
        (0..engine.len())
            .map(|i| {
                let z = &engine.dataset()[i];
                let base = crate::data::make_baseline(z, &baseline)?;
                let score = engine.mem_replace(i, &base)?;
                let mut rec = ScoreRecord::from(&score);
                rec.baseline_kind = Some(baseline.kind());
                Ok(rec)
            })
            .collect::<Result<_, Error>>()
            .stage("scoring")?
    } else {
        engine
            .all_mem_remove()
            .stage("scoring")?
            .iter()
            .map(ScoreRecord::from)
            .collect()
    };
    save_scores(out.join("scores.jsonl"), &records).stage("write scores")?;
    write_manifest(out, "score", args, vec!["scores.jsonl"])
}

fn cmd_attribute(args: &AttributeArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    let baseline = args.baseline.resolve(&data).stage("baseline")?;
    let engine = build_engine(
        data,
        schema.num_classes,
        args.model_file.as_deref(),
        &args.model,
        &args.engine,
    )?;
    let indices: Vec<usize> = args.indices.clone().unwrap_or_else(|| (0..engine.len()).collect());
    let records = indices
        .iter()
        .map(|&i| {
            engine
                .attribute(i, &baseline, args.riemann_steps)
                .map(|r| ScoreRecord::from(&r))
        })
        .collect::<Result<Vec<_>, Error>>()
        .stage("attribution")?;
    save_scores(out.join("attributions.jsonl"), &records).stage("write attributions")?;
    write_manifest(out, "attribute", args, vec!["attributions.jsonl"])
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, train_set) = load(&args.train)?;
    let (_, test_set) = load_dataset(&args.test, Some(&schema)).stage("load dataset")?;
    let cfg = AblationConfig {
        fractions: args.fractions.clone(),
        num_seeds: args.num_seeds,
        arms: vec![AblationArm::TopMemorized, AblationArm::UniformRandom],
        master_seed: args.model.seed,
    };
    let outcome = ablation_experiment(
        &train_set,
        &test_set,
        schema.num_classes,
        args.model.lambda,
        &cfg,
        &args.model.train_config(),
        &args.engine.engine_config(),
    )
    .stage("ablation")?;

    #[derive(Serialize)]
    struct Summary {
        arm: String,
        fraction: f64,
        removed_count: usize,
        full_test_accuracy: f64,
        mean_test_accuracy: f64,
        std_test_accuracy: f64,
        accuracy_drop: f64,
        threshold_score: f64,
        threshold_abs_score: f64,
        warnings: String,
    }
    let summary: Vec<Summary> = outcome
        .results
        .iter()
        .map(|r| Summary {
            arm: r.arm.to_string(),
            fraction: r.fraction,
            removed_count: r.removed_count,
            full_test_accuracy: outcome.full_accuracy,
            mean_test_accuracy: r.mean_test_accuracy,
            std_test_accuracy: r.std_test_accuracy,
            accuracy_drop: outcome.full_accuracy - r.mean_test_accuracy,
            threshold_score: r.threshold_score,
            threshold_abs_score: r.threshold_abs_score,
            warnings: r.warnings.join("; "),
        })
        .collect();
    for r in &outcome.results {
        for w in &r.warnings {
            eprintln!("warning: {} at fraction {}: {w}", r.arm, r.fraction);
        }
    }
    write_csv(&out.join("ablation_summary.csv"), &summary).stage("write results")?;
    write_csv(&out.join("ablation_runs.csv"), &outcome.runs).stage("write results")?;
    write_manifest(out, "ablate", args, vec!["ablation_summary.csv", "ablation_runs.csv"])
}

fn cmd_reduction(args: &ReductionArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    let baseline = args.baseline.resolve(&data).stage("baseline")?;
    let engine = build_engine(
        data,
        schema.num_classes,
        args.model_file.as_deref(),
        &args.model,
        &args.engine,
    )?;
    let cfg = ReductionConfig {
        top_instance_fraction: args.top_fraction,
        token_fractions: args.token_fractions.clone(),
        riemann_steps: args.riemann_steps,
        seed: args.model.seed,
    };
    let mut rows = Vec::new();
    for arm in [TokenArm::Attributed, TokenArm::Random] {
        rows.extend(reduction_rate(&engine, &cfg, arm, &baseline).stage("reduction rate")?);
    }
    write_csv(&out.join("reduction.csv"), &rows).stage("write results")?;
    write_manifest(out, "reduction", args, vec!["reduction.csv"])
}

fn cmd_stability(args: &StabilityArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    if args.model.init_scale == 0.0 {
        eprintln!("note: --init-scale 0 makes every seed start from zero; all coefficients will be 1");
    }
    let m = seed_stability(
        &data,
        schema.num_classes,
        args.model.lambda,
        &args.seeds,
        &args.model.train_config(),
        &args.engine.engine_config(),
    )
    .stage("seed stability")?;
    #[derive(Serialize)]
    struct Row {
        seed_a: u64,
        seed_b: u64,
        spearman: f64,
    }
    let mut rows = Vec::new();
    for (a, &sa) in args.seeds.iter().enumerate() {
        for (b, &sb) in args.seeds.iter().enumerate() {
            rows.push(Row {
                seed_a: sa,
                seed_b: sb,
                spearman: m[(a, b)],
            });
        }
    }
    write_csv(&out.join("stability.csv"), &rows).stage("write results")?;
    write_manifest(out, "stability", args, vec!["stability.csv"])
}

fn read_annotations(path: &Path, n: usize) -> Result<Vec<(u32, u32)>, Error> {
    #[derive(serde::Deserialize)]
    struct Row {
        instance_index: usize,
        pos_count: u32,
        neg_count: u32,
    }
    let mut out = vec![None; n];
    let mut reader = csv::Reader::from_path(path)?;
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: line + 2,
            field: "annotation".into(),
            message: e.to_string(),
        })?;
        if row.instance_index >= n {
            return Err(Error::Parse {
                line: line + 2,
                field: "instance_index".into(),
                message: format!("{} out of range for {n} instances", row.instance_index),
            });
        }
        out[row.instance_index] = Some((row.pos_count, row.neg_count));
    }
    out.into_iter()
        .enumerate()
        .map(|(i, a)| a.ok_or_else(|| Error::Usage(format!("instance {i} has no annotation"))))
        .collect()
}

fn cmd_fraction_summary(args: &FractionArgs) -> Result<(), StageError> {
    let out = prepare_out(&args.out)?;
    let (schema, data) = load(&args.train)?;
    let annotations = read_annotations(&args.annotations, data.len()).stage("load annotations")?;
    let labels: Vec<usize> = data.iter().map(|z| z.label).collect();
    let engine = build_engine(
        data,
        schema.num_classes,
        args.model_file.as_deref(),
        &args.model,
        &args.engine,
    )?;
    let ranked = engine.rank_by_memorization().stage("scoring")?;
    let summary = group_fraction_summary(
        &ranked,
        &labels,
        &annotations,
        args.top_fraction,
        args.bottom_fraction,
        args.smoothing_k,
    )
    .stage("fraction summary")?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    write_csv(&out.join("fraction_summary.csv"), &summary.rows).stage("write results")?;
    write_manifest(out, "fraction-summary", args, vec!["fraction_summary.csv"])
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call in the same process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code: 0 success, 2 usage error, 1 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Reduction(a) => cmd_reduction(a),
        Command::Stability(a) => cmd_stability(a),
        Command::FractionSummary(a) => cmd_fraction_summary(a),
    };
    match result {
        Ok(()) => 0,
        Err(StageError { stage, source }) => {
            eprintln!("error: {stage} failed: {source}");
            match source {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}
