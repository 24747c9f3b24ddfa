//! Dataset schema and file format, synthetic corpora, and baseline inputs.
//!
//! # Dataset files
//!
//! Line-delimited JSON. Line 1 is a header:
//!
//! ```text
//! {"format":"memattr-dataset","version":1,"feature_dim":5,"num_classes":2,"has_token_names":false,"source":"..."}
//! ```
//!
//! Every following non-blank line is one instance:
//!
//! ```text
//! {"label":1,"weight":1.0,"subpop_id":3,"token_names":null,"features":[[0.1,-2.5,...],[...]]}
//! ```
//!
//! `features` holds `N >= 1` rows of exactly `feature_dim` finite numbers.
//! Floats are written in shortest round-trip decimal form, so a load of a
//! saved file reproduces every value bit for bit.
//!
//! # Score files
//!
//! One JSON object per instance with the fields `instance_index`, `m_remove`,
//! `m_replace`, `per_token`, `baseline_kind`, `riemann_steps`. Fields that do
//! not apply to a run are `null` (or `[]` for `per_token`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::influence::{AttributionReport, MemorizationScore};
use crate::model::{Instance, ModelState};
use crate::train::TrainReport;

pub const DATASET_FORMAT: &str = "memattr-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub has_token_names: bool,
    pub source: String,
}

impl DatasetSchema {
    pub fn new(feature_dim: usize, num_classes: usize, source: impl Into<String>) -> Self {
        Self {
            feature_dim,
            num_classes,
            has_token_names: false,
            source: source.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 1 {
            return Err(Error::schema("feature_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::schema("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// Checks every instance against this schema.
    pub fn check(&self, dataset: &[Instance]) -> Result<()> {
        self.validate()?;
        for (i, z) in dataset.iter().enumerate() {
            z.validate(self.feature_dim, self.num_classes)
                .map_err(|e| Error::schema(format!("instance {i}: {e}")))?;
            if self.has_token_names && z.token_names.is_none() {
                return Err(Error::schema(format!("instance {i}: schema requires token names")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(flatten)]
    schema: DatasetSchema,
}

#[derive(Serialize)]
struct RowOut<'a> {
    label: usize,
    weight: f64,
    subpop_id: Option<u64>,
    token_names: Option<&'a [String]>,
    features: Vec<&'a [f64]>,
}

pub fn save_dataset(path: impl AsRef<Path>, schema: &DatasetSchema, dataset: &[Instance]) -> Result<()> {
    schema.check(dataset)?;
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(&mut out, schema, dataset)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(out: &mut W, schema: &DatasetSchema, dataset: &[Instance]) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        schema: schema.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for z in dataset {
        // nalgebra is column-major; copy rows out contiguously.
        let rows: Vec<Vec<f64>> = z.features.row_iter().map(|r| r.iter().copied().collect()).collect();
        let row = RowOut {
            label: z.label,
            weight: z.weight,
            subpop_id: z.subpop_id,
            token_names: z.token_names.as_deref(),
            features: rows.iter().map(|r| r.as_slice()).collect(),
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads a dataset file; when `expected` is given the header must agree with it.
pub fn load_dataset(
    path: impl AsRef<Path>,
    expected: Option<&DatasetSchema>,
) -> Result<(DatasetSchema, Vec<Instance>)> {
    read_dataset(BufReader::new(File::open(path)?), expected)
}

pub fn read_dataset<R: BufRead>(reader: R, expected: Option<&DatasetSchema>) -> Result<(DatasetSchema, Vec<Instance>)> {
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(line) => line?,
        None => return Err(parse_err(1, "header", "missing header line")),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse_err(1, "header", e.to_string()))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(
            1,
            "format",
            format!("expected `{DATASET_FORMAT}`, found `{}`", header.format),
        ));
    }
    if header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            "version",
            format!("unsupported version {}", header.version),
        ));
    }
    let schema = header.schema;
    schema.validate().map_err(|e| parse_err(1, "header", e.to_string()))?;
    if let Some(exp) = expected {
        if exp.feature_dim != schema.feature_dim {
            return Err(parse_err(
                1,
                "feature_dim",
                format!("file has {}, expected {}", schema.feature_dim, exp.feature_dim),
            ));
        }
        if exp.num_classes != schema.num_classes {
            return Err(parse_err(
                1,
                "num_classes",
                format!("file has {}, expected {}", schema.num_classes, exp.num_classes),
            ));
        }
    }
    let mut dataset = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        dataset.push(parse_row(&line, line_no, &schema)?);
    }
    Ok((schema, dataset))
}

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

const ROW_FIELDS: [&str; 5] = ["label", "weight", "subpop_id", "token_names", "features"];

/// Names the row field whose value contains byte column `col` (1-based).
fn field_at_column(line: &str, col: usize) -> &'static str {
    let mut best: Option<(usize, &'static str)> = None;
    for field in ROW_FIELDS {
        let key = format!("\"{field}\"");
        if let Some(pos) = line.find(&key) {
            if pos < col && best.is_none_or(|(p, _)| pos > p) {
                best = Some((pos, field));
            }
        }
    }
    best.map_or("record", |(_, f)| f)
}

fn parse_row(line: &str, line_no: usize, schema: &DatasetSchema) -> Result<Instance> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, field_at_column(line, e.column()), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(line_no, "record", "row is not a JSON object"))?;
    for key in obj.keys() {
        if !ROW_FIELDS.contains(&key.as_str()) {
            return Err(parse_err(line_no, key, "unknown field"));
        }
    }

    let label = obj
        .get("label")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err(line_no, "label", "missing or not a nonnegative integer"))? as usize;
    if label >= schema.num_classes {
        return Err(parse_err(
            line_no,
            "label",
            format!("{label} out of range for {} classes", schema.num_classes),
        ));
    }

    let weight = match obj.get("weight") {
        None | Some(Value::Null) => 1.0,
        Some(v) => v.as_f64().ok_or_else(|| parse_err(line_no, "weight", "not a number"))?,
    };
    if !(weight.is_finite() && weight > 0.0) {
        return Err(parse_err(
            line_no,
            "weight",
            format!("{weight} is not a positive finite number"),
        ));
    }

    let subpop_id = match obj.get("subpop_id") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| parse_err(line_no, "subpop_id", "not a nonnegative integer"))?,
        ),
    };

    let rows = obj
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line_no, "features", "missing or not an array of rows"))?;
    if rows.is_empty() {
        return Err(parse_err(line_no, "features", "instance has no token rows"));
    }
    let d = schema.feature_dim;
    let mut flat = Vec::with_capacity(rows.len() * d);
    for (t, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| parse_err(line_no, "features", format!("row {t} is not an array")))?;
        if row.len() != d {
            return Err(parse_err(
                line_no,
                "features",
                format!("row {t} has {} values, expected {d}", row.len()),
            ));
        }
        for v in row {
            let x = v
                .as_f64()
                .ok_or_else(|| parse_err(line_no, "features", format!("row {t} has a non-numeric value")))?;
            if !x.is_finite() {
                return Err(parse_err(
                    line_no,
                    "features",
                    format!("row {t} has a non-finite value"),
                ));
            }
            flat.push(x);
        }
    }
    let features = DMatrix::from_row_slice(rows.len(), d, &flat);

    let token_names = match obj.get("token_names") {
        None | Some(Value::Null) => None,
        Some(Value::Array(names)) => {
            let names: Option<Vec<String>> = names.iter().map(|n| n.as_str().map(str::to_string)).collect();
            let names = names.ok_or_else(|| parse_err(line_no, "token_names", "names must be strings"))?;
            if names.len() != rows.len() {
                return Err(parse_err(
                    line_no,
                    "token_names",
                    format!("{} names for {} tokens", names.len(), rows.len()),
                ));
            }
            Some(names)
        }
        Some(_) => return Err(parse_err(line_no, "token_names", "not an array")),
    };
    if schema.has_token_names && token_names.is_none() {
        return Err(parse_err(line_no, "token_names", "schema requires token names"));
    }

    Ok(Instance {
        features,
        label,
        token_names,
        weight,
        subpop_id,
    })
}

/// One line of a score / attribution file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub instance_index: usize,
    pub m_remove: f64,
    pub m_replace: Option<f64>,
    pub per_token: Vec<f64>,
    pub baseline_kind: Option<BaselineKind>,
    pub riemann_steps: Option<usize>,
}

impl From<&MemorizationScore> for ScoreRecord {
    fn from(s: &MemorizationScore) -> Self {
        Self {
            instance_index: s.instance_index,
            m_remove: s.m_remove,
            m_replace: s.m_replace,
            per_token: Vec::new(),
            baseline_kind: None,
            riemann_steps: None,
        }
    }
}

impl From<&AttributionReport> for ScoreRecord {
    fn from(r: &AttributionReport) -> Self {
        Self {
            instance_index: r.instance_index,
            m_remove: r.m_remove,
            m_replace: Some(r.m_replace_reference),
            per_token: r.per_token.clone(),
            baseline_kind: Some(r.baseline_kind),
            riemann_steps: Some(r.riemann_steps),
        }
    }
}

pub fn save_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, "record", e.to_string()))?);
    }
    Ok(out)
}

/// A trained model on disk: parameters in `[W row-major; b]` order plus the
/// training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub ridge_lambda: f64,
    pub theta: Vec<f64>,
    pub report: TrainReport,
}

impl ModelFile {
    pub fn new(model: &ModelState, report: &TrainReport) -> Self {
        Self {
            num_classes: model.num_classes,
            feature_dim: model.feature_dim,
            ridge_lambda: model.ridge_lambda,
            theta: model.theta.iter().copied().collect(),
            report: report.clone(),
        }
    }

    pub fn into_parts(self) -> (ModelState, TrainReport) {
        let model = ModelState {
            theta: DVector::from_vec(self.theta),
            ridge_lambda: self.ridge_lambda,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        };
        (model, self.report)
    }
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let p = file.num_classes * file.feature_dim + file.num_classes;
    if file.num_classes < 2 || file.feature_dim == 0 || file.theta.len() != p {
        return Err(Error::schema(format!(
            "model file: expected {p} parameters for C={} d={}, found {}",
            file.num_classes,
            file.feature_dim,
            file.theta.len()
        )));
    }
    if !(file.ridge_lambda > 0.0) || file.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::schema("model file: lambda must be > 0 and parameters finite"));
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    Mean,
    Custom,
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::Zero => "zero",
            BaselineKind::Mean => "mean",
            BaselineKind::Custom => "custom",
        })
    }
}

/// The reference row that every token of a baseline input takes.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Zero,
    /// Mean token row of a dataset, see [`Baseline::dataset_mean`].
    Mean(DVector<f64>),
    Custom(DVector<f64>),
}

impl Baseline {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::Zero => BaselineKind::Zero,
            Baseline::Mean(_) => BaselineKind::Mean,
            Baseline::Custom(_) => BaselineKind::Custom,
        }
    }

    /// Mean over every token row of every instance.
    pub fn dataset_mean(dataset: &[Instance]) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::usage("mean baseline of an empty dataset"))?;
        let mut sum = DVector::zeros(first.feature_dim());
        let mut count = 0usize;
        for z in dataset {
            for row in z.features.row_iter() {
                sum += row.transpose();
                count += 1;
            }
        }
        Ok(Baseline::Mean(sum / count as f64))
    }

    /// Resolves a kind into a baseline; `Mean` needs the dataset, `Custom` a row.
    pub fn from_kind(kind: BaselineKind, dataset: &[Instance], custom_row: Option<&DVector<f64>>) -> Result<Self> {
        match kind {
            BaselineKind::Zero => Ok(Baseline::Zero),
            BaselineKind::Mean => Baseline::dataset_mean(dataset),
            BaselineKind::Custom => custom_row
                .cloned()
                .map(Baseline::Custom)
                .ok_or_else(|| Error::usage("custom baseline requires a row")),
        }
    }
}

/// Same shape and label as `instance`, every row replaced by the baseline row.
pub fn make_baseline(instance: &Instance, baseline: &Baseline) -> Result<Instance> {
    let (n, d) = instance.features.shape();
    let features = match baseline {
        Baseline::Zero => DMatrix::zeros(n, d),
        Baseline::Mean(row) | Baseline::Custom(row) => {
            if row.len() != d {
                return Err(Error::usage(format!(
                    "baseline row has {} entries, instance has {d} features",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::usage("baseline row has non-finite entries"));
            }
            DMatrix::from_fn(n, d, |_, j| row[j])
        }
    };
    Ok(Instance {
        features,
        label: instance.label,
        token_names: None,
        weight: instance.weight,
        subpop_id: None,
    })
}

/// Replaces the listed token rows of `instance` with the baseline row.
pub fn replace_tokens(instance: &Instance, baseline: &Instance, tokens: &[usize]) -> Instance {
    let mut out = instance.clone();
    for &t in tokens {
        out.features.set_row(t, &baseline.features.row(t));
    }
    out
}

/// Generator settings for a corpus of planted subpopulations.
///
/// Head subpopulations are frequent and sit on their class center; tail
/// subpopulations are rare and are only recognizable by their private
/// signature tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub tokens_per_instance: usize,
    pub num_head_subpops: usize,
    pub num_tail_subpops: usize,
    /// Training instances per head subpopulation.
    pub head_frequency: usize,
    /// Training instances per tail subpopulation.
    pub tail_frequency: usize,
    /// Test instances per head subpopulation.
    pub test_head_frequency: usize,
    /// Probability that a tail subpopulation contributes a test instance.
    pub test_tail_presence: f64,
    pub noise_sigma: f64,
    /// Norm of each class center.
    pub class_signal: f64,
    /// Norm of each tail signature direction.
    pub signature_scale: f64,
    /// Non-signature tail tokens sit on another class's center.
    pub atypical_flip_features: bool,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            feature_dim: 48,
            tokens_per_instance: 8,
            num_head_subpops: 4,
            num_tail_subpops: 40,
            head_frequency: 40,
            tail_frequency: 1,
            test_head_frequency: 20,
            test_tail_presence: 1.0,
            noise_sigma: 0.3,
            class_signal: 1.0,
            signature_scale: 3.0,
            atypical_flip_features: true,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.feature_dim < 1 || self.tokens_per_instance < 1 {
            return Err(Error::usage("need at least 2 classes, 1 feature and 1 token"));
        }
        if self.num_head_subpops + self.num_tail_subpops == 0 {
            return Err(Error::usage("spec produces no subpopulations"));
        }
        if self.tail_frequency < 1 || (self.num_head_subpops > 0 && self.head_frequency <= self.tail_frequency) {
            return Err(Error::usage("need head_frequency > tail_frequency >= 1"));
        }
        if !(self.test_tail_presence > 0.0 && self.test_tail_presence <= 1.0) {
            return Err(Error::usage("test_tail_presence must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.class_signal >= 0.0 && self.signature_scale >= 0.0) {
            return Err(Error::usage("scales must be nonnegative"));
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            has_token_names: true,
            source: format!("longtail seed={}", self.seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LongTailCorpus {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub class_centers: Vec<DVector<f64>>,
    /// Subpopulation ids at or above this value are tail subpopulations.
    pub first_tail_subpop: u64,
}

impl LongTailCorpus {
    pub fn is_tail(&self, z: &Instance) -> bool {
        z.subpop_id.is_some_and(|id| id >= self.first_tail_subpop)
    }

    /// Direction separating class 1 ("positive") from class 0.
    pub fn polarity_direction(&self) -> DVector<f64> {
        &self.class_centers[1] - &self.class_centers[0]
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> DVector<f64> {
    let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let len = v.norm();
    if len == 0.0 {
        v
    } else {
        v * (norm / len)
    }
}

struct Subpop {
    id: u64,
    label: usize,
    rows: Vec<DVector<f64>>,
    names: Vec<String>,
}

impl Subpop {
    fn draw(&self, rng: &mut ChaCha8Rng, sigma: f64) -> Instance {
        let n = self.rows.len();
        let d = self.rows[0].len();
        let features = DMatrix::from_fn(n, d, |t, j| {
            let noise: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            self.rows[t][j] + sigma * noise
        });
        Instance::new(features, self.label)
            .with_subpop(self.id)
            .with_token_names(self.names.clone())
    }
}

pub fn generate_longtail(spec: &LongTailSpec) -> Result<LongTailCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let c = spec.num_classes;
    let n_tok = spec.tokens_per_instance;

    let class_centers: Vec<DVector<f64>> = if c == 2 {
        let u = gaussian_vector(&mut rng, d, spec.class_signal);
        vec![-u.clone(), u]
    } else {
        (0..c)
            .map(|_| gaussian_vector(&mut rng, d, spec.class_signal))
            .collect()
    };

    let mut subpops = Vec::new();
    for k in 0..spec.num_head_subpops {
        let label = k % c;
        let rows = (0..n_tok)
            .map(|_| &class_centers[label] + gaussian_vector(&mut rng, d, 0.25 * spec.class_signal))
            .collect();
        subpops.push(Subpop {
            id: k as u64,
            label,
            rows,
            names: vec![format!("c{label}"); n_tok],
        });
    }
    let first_tail = spec.num_head_subpops as u64;
    let n_sig = n_tok.div_ceil(2);
    for k in 0..spec.num_tail_subpops {
        let label = k % c;
        let other = (label + 1) % c;
        let signature = gaussian_vector(&mut rng, d, spec.signature_scale);
        let mut rows = Vec::with_capacity(n_tok);
        let mut names = Vec::with_capacity(n_tok);
        for t in 0..n_tok {
            if t < n_sig {
                rows.push(&signature + gaussian_vector(&mut rng, d, 0.1 * spec.signature_scale));
                names.push(format!("sig{}", first_tail + k as u64));
            } else {
                let host = if spec.atypical_flip_features { other } else { label };
                rows.push(&class_centers[host] + gaussian_vector(&mut rng, d, 0.25 * spec.class_signal));
                names.push(format!("c{host}"));
            }
        }
        subpops.push(Subpop {
            id: first_tail + k as u64,
            label,
            rows,
            names,
        });
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for sp in &subpops {
        let is_tail = sp.id >= first_tail;
        let n_train = if is_tail {
            spec.tail_frequency
        } else {
            spec.head_frequency
        };
        for _ in 0..n_train {
            train.push(sp.draw(&mut rng, spec.noise_sigma));
        }
        if is_tail {
            if rng.random::<f64>() < spec.test_tail_presence {
                test.push(sp.draw(&mut rng, spec.noise_sigma));
            }
        } else {
            for _ in 0..spec.test_head_frequency {
                test.push(sp.draw(&mut rng, spec.noise_sigma));
            }
        }
    }
    if train.is_empty() {
        return Err(Error::usage("spec produces no training instances"));
    }
    train.shuffle(&mut rng);
    Ok(LongTailCorpus {
        train,
        test,
        class_centers,
        first_tail_subpop: first_tail,
    })
}

/// Counts tokens leaning toward the positive / negative side of `direction`.
///
/// A token is positive when its projection onto the unit direction exceeds
/// `threshold`, negative when below `-threshold`, neutral otherwise.
pub fn polarity_counts(instance: &Instance, direction: &DVector<f64>, threshold: f64) -> (u32, u32) {
    let unit = direction / direction.norm();
    let mut pos = 0;
    let mut neg = 0;
    for row in instance.features.row_iter() {
        let proj = row.transpose().dot(&unit);
        if proj > threshold {
            pos += 1;
        } else if proj < -threshold {
            neg += 1;
        }
    }
    (pos, neg)
}

/// Overlapping Gaussian classes: a small, noisy classification problem on
/// which influence estimates can be compared with exact retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_instances: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub tokens_per_instance: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-entry noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            num_instances: 50,
            feature_dim: 5,
            num_classes: 2,
            tokens_per_instance: 3,
            separation: 1.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

pub fn generate_clusters(spec: &ClusterSpec) -> Result<Vec<Instance>> {
    if spec.num_instances == 0 || spec.feature_dim == 0 || spec.tokens_per_instance == 0 || spec.num_classes < 2 {
        return Err(Error::usage("cluster spec produces no usable instances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<DVector<f64>> = (0..spec.num_classes)
        .map(|_| gaussian_vector(&mut rng, spec.feature_dim, spec.separation))
        .collect();
    let out = (0..spec.num_instances)
        .map(|i| {
            let label = i % spec.num_classes;
            let features = DMatrix::from_fn(spec.tokens_per_instance, spec.feature_dim, |_, j| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                means[label][j] + spec.noise_sigma * noise
            });
            Instance::new(features, label)
        })
        .collect();
    Ok(out)
}
