//! Browser bindings for the long-tail demo page.
//!
//! All methods return JSON strings; the page parses them with `JSON.parse`.
//! The plain `*_json` functions on [`Session`] are usable natively as well.

use memattr::data::{generate_longtail, polarity_counts, Baseline, BaselineKind, LongTailCorpus, LongTailSpec};
use memattr::experiments::{positive_fraction, DEFAULT_SMOOTHING_K};
use memattr::influence::{EngineConfig, InfluenceEngine};
use memattr::train::{train, TrainConfig};
use memattr::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Steps swept by [`Session::convergence_json`].
pub const SWEEP_STEPS: [usize; 7] = [1, 2, 5, 10, 25, 50, 100];

#[derive(Serialize)]
struct Point {
    index: usize,
    label: usize,
    tail: bool,
    m_remove: f64,
    positive_fraction: f64,
}

#[derive(Serialize)]
struct Corpus<'a> {
    num_train: usize,
    num_tail: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    points: &'a [Point],
}

#[derive(Serialize)]
struct TokenBar {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct Attribution {
    index: usize,
    label: usize,
    tail: bool,
    m_remove: f64,
    m_replace: f64,
    total: f64,
    riemann_steps: usize,
    tokens: Vec<TokenBar>,
}

#[derive(Serialize)]
struct SweepPoint {
    steps: usize,
    relative_gap: f64,
}

/// A trained long-tail corpus with its influence engine.
pub struct Session {
    corpus: LongTailCorpus,
    engine: InfluenceEngine,
    points: Vec<Point>,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn parse_baseline(name: &str, session: &Session) -> Result<Baseline> {
    let kind = match name {
        "zero" => BaselineKind::Zero,
        "mean" => BaselineKind::Mean,
        other => return Err(Error::Usage(format!("unknown baseline `{other}` (zero or mean)"))),
    };
    Baseline::from_kind(kind, session.engine.dataset(), None)
}

impl Session {
    pub fn new(seed: u64, num_tail: usize, lambda: f64) -> Result<Self> {
        let spec = LongTailSpec {
            num_tail_subpops: num_tail,
            seed,
            ..LongTailSpec::default()
        };
        let corpus = generate_longtail(&spec)?;
        let (model, report) = train(&corpus.train, spec.num_classes, lambda, &TrainConfig::default())?;
        let train_accuracy = memattr::model::accuracy(&model, &corpus.train)?;
        let test_accuracy = memattr::model::accuracy(&model, &corpus.test)?;
        let engine = InfluenceEngine::new(model, corpus.train.clone(), &report, EngineConfig::default())?;
        let dir = corpus.polarity_direction();
        let points = engine
            .all_mem_remove()?
            .into_iter()
            .map(|s| {
                let z = &corpus.train[s.instance_index];
                let (pos, neg) = polarity_counts(z, &dir, 0.5);
                Point {
                    index: s.instance_index,
                    label: z.label,
                    tail: corpus.is_tail(z),
                    m_remove: s.m_remove,
                    positive_fraction: positive_fraction(pos, neg, DEFAULT_SMOOTHING_K),
                }
            })
            .collect();
        Ok(Self {
            corpus,
            engine,
            points,
            train_accuracy,
            test_accuracy,
        })
    }

    /// One point per training instance: memorization score against positive-token fraction.
    pub fn corpus_json(&self) -> String {
        let corpus = Corpus {
            num_train: self.points.len(),
            num_tail: self.points.iter().filter(|p| p.tail).count(),
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
            points: &self.points,
        };
        serde_json::to_string(&corpus).expect("plain data serializes")
    }

    pub fn attribution_json(&self, index: usize, baseline: &str, steps: usize) -> Result<String> {
        let base = parse_baseline(baseline, self)?;
        let report = self.engine.attribute(index, &base, steps)?;
        let z = &self.corpus.train[index];
        let tokens = report
            .per_token
            .iter()
            .enumerate()
            .map(|(t, &value)| TokenBar {
                name: z
                    .token_names
                    .as_ref()
                    .and_then(|n| n.get(t).cloned())
                    .unwrap_or_else(|| format!("t{t}")),
                value,
            })
            .collect();
        let out = Attribution {
            index,
            label: z.label,
            tail: self.corpus.is_tail(z),
            m_remove: report.m_remove,
            m_replace: report.m_replace_reference,
            total: report.total,
            riemann_steps: steps,
            tokens,
        };
        Ok(serde_json::to_string(&out)?)
    }

    /// Relative completeness gap of the midpoint rule at each of [`SWEEP_STEPS`].
    pub fn convergence_json(&self, index: usize, baseline: &str) -> Result<String> {
        let base = parse_baseline(baseline, self)?;
        let sweep = SWEEP_STEPS
            .iter()
            .map(|&steps| {
                Ok(SweepPoint {
                    steps,
                    relative_gap: self.engine.attribute(index, &base, steps)?.completeness_gap(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::to_string(&sweep)?)
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Handle held by the page.
#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, num_tail: usize, lambda: f64) -> std::result::Result<Demo, JsError> {
        Session::new(seed as u64, num_tail, lambda)
            .map(|session| Demo { session })
            .map_err(js_err)
    }

    pub fn corpus(&self) -> String {
        self.session.corpus_json()
    }

    pub fn attribution(&self, index: usize, baseline: &str, steps: usize) -> std::result::Result<String, JsError> {
        self.session.attribution_json(index, baseline, steps).map_err(js_err)
    }

    pub fn convergence(&self, index: usize, baseline: &str) -> std::result::Result<String, JsError> {
        self.session.convergence_json(index, baseline).map_err(js_err)
    }
}
