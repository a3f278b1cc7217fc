//! Scoring, evaluation and multi-seed comparison built from the lower
//! modules. Shared by the CLI and the acceptance suite.

use std::collections::BTreeMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, CalibrationBin, EvalReport, RelInstance, TTest};
use crate::model::{self, ClassifierParams, Mode, TrainConfig, TrainHistory};
use crate::predict::{rank_predictions, Decision, FilterRule, ScoredPair};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_BINS: usize = 10;

const CHUNK: usize = 8192;

/// Full score vectors for every pair of `dataset`.
pub fn score_pairs(params: &ClassifierParams, mode: Mode, dataset: &Dataset) -> Result<Vec<ScoredPair>> {
    if params.inputs() != dataset.dim() || params.outputs() != dataset.num_classes + 1 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features and {} classes", params.inputs(), params.outputs()),
            found: format!("{} features and {} classes", dataset.dim(), dataset.num_classes + 1),
        });
    }
    let mut out = Vec::with_capacity(dataset.len());
    for (c, block) in dataset.features.axis_chunks_iter(Axis(0), CHUNK).enumerate() {
        let probs = params.probabilities(block, mode)?;
        for (r, row) in probs.rows().into_iter().enumerate() {
            let i = c * CHUNK + r;
            out.push(ScoredPair {
                image: dataset.images[i],
                subject: dataset.subjects[i],
                object: dataset.objects[i],
                scores: row.to_vec(),
            });
        }
    }
    Ok(out)
}

fn decisions(pairs: &[ScoredPair], decision: Decision) -> Result<Vec<RelInstance>> {
    pairs
        .iter()
        .map(|p| {
            let predicate = decision.decide(&p.scores)?;
            Ok(RelInstance {
                image: p.image,
                subject: p.subject,
                object: p.object,
                predicate,
                score: Some(p.scores[predicate]),
            })
        })
        .collect()
}

/// Hold-out mPCR and recall@100 without filtering; NaN when the hold-out has
/// no foreground pair.
pub fn heldout_summary(params: &ClassifierParams, mode: Mode, heldout: &Dataset) -> Result<(f64, f64)> {
    let gt = heldout.ground_truth();
    if gt.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let pairs = score_pairs(params, mode, heldout)?;
    let preds = decisions(&pairs, Decision::Unfiltered)?;
    let ranked = rank_predictions(&pairs, Decision::Unfiltered, DEFAULT_K)?;
    Ok((metrics::mpcr(&preds, &gt)?, metrics::micro_recall_at_k(&ranked, &gt, DEFAULT_K)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub decision: Decision,
    pub bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, decision: Decision::Unfiltered, bins: DEFAULT_BINS }
    }
}

impl EvalOptions {
    pub fn filtered(theta: f64) -> Result<Self> {
        Ok(Self { decision: Decision::Filtered(FilterRule::new(theta)?), ..Self::default() })
    }
}

/// Runs prediction and every metric over all pairs of `dataset`.
///
/// Recall@K, precision, F1 and calibration use the per-image top-K retained
/// triplets; mPCR, the confusion matrix and the zero-recall fraction use the
/// decision for every ground-truth pair.
pub fn evaluate(params: &ClassifierParams, mode: Mode, dataset: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    let gt = dataset.ground_truth();
    if gt.is_empty() {
        return Err(Error::EmptyInput("evaluation set has no foreground pairs"));
    }
    let pairs = score_pairs(params, mode, dataset)?;
    let preds = decisions(&pairs, options.decision)?;
    let ranked = rank_predictions(&pairs, options.decision, options.k)?;
    let retained: Vec<RelInstance> = ranked.values().flatten().copied().collect();

    let recall_at_k = metrics::micro_recall_at_k(&ranked, &gt, options.k)?;
    let pr = metrics::precision_recall_f1(&retained, &gt)?;
    let per_class_recall = metrics::per_class_recall(&preds, &gt)?;
    let mpcr = metrics::mpcr(&preds, &gt)?;
    let (nrf, theta) = match options.decision {
        Decision::Unfiltered => (false, crate::predict::DEFAULT_THETA),
        Decision::Filtered(rule) => (true, rule.theta()),
    };
    let confusion = metrics::confusion(&preds, &gt, dataset.num_classes, nrf)?;
    let zero_recall_fraction = metrics::zero_recall_fraction(&confusion)?;
    let ece = if retained.is_empty() {
        0.0
    } else {
        let (scores, correct) = correctness(&retained, &gt);
        metrics::expected_calibration_error(&scores, &correct, options.bins)?
    };
    Ok(EvalReport {
        recall_at_k,
        mpcr,
        precision: pr.precision,
        f1: pr.f1,
        ece,
        zero_recall_fraction,
        per_class_recall,
        confusion,
        k: options.k,
        nrf,
        theta,
    })
}

fn correctness(emitted: &[RelInstance], gt: &[RelInstance]) -> (Vec<f64>, Vec<bool>) {
    let truth: std::collections::HashSet<(u64, u64, u64, usize)> =
        gt.iter().map(|g| (g.image, g.subject, g.object, g.predicate)).collect();
    emitted
        .iter()
        .map(|p| (p.score.unwrap_or(0.0), truth.contains(&(p.image, p.subject, p.object, p.predicate))))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    pub predictions: usize,
}

/// Calibration of the unfiltered prediction for every pair: each pair emits
/// its best foreground predicate with that predicate's score, and is correct
/// when that predicate is its label.
pub fn calibration(
    params: &ClassifierParams,
    mode: Mode,
    dataset: &Dataset,
    bins: usize,
) -> Result<CalibrationSummary> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    let pairs = score_pairs(params, mode, dataset)?;
    let preds = decisions(&pairs, Decision::Unfiltered)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score.unwrap_or(0.0)).collect();
    let correct: Vec<bool> = preds.iter().zip(&dataset.labels).map(|(p, &label)| p.predicate == label).collect();
    let table = metrics::reliability_bins(&scores, &correct, bins)?;
    Ok(CalibrationSummary { ece: metrics::ece_from_bins(&table, scores.len()), bins: table, predictions: scores.len() })
}

/// Training setup used by the comparison runs.
pub fn default_train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig::new(mode, seed)
}

/// Trains on the training split for `config.seed` and returns the model with
/// the hold-out part of the data.
pub fn train_on_split(config: &TrainConfig, dataset: &Dataset) -> Result<(ClassifierParams, TrainHistory, Dataset)> {
    let stats = model::training_stats(dataset, config.seed)?;
    let (params, history) = model::train(config, dataset, Some(&stats))?;
    let (_, heldout_rows) = model::split_rows(dataset, config.seed)?;
    Ok((params, history, dataset.subset(&heldout_rows)))
}

/// A training objective plus the decision rule used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub mode: Mode,
    pub nrf: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        if self.nrf {
            format!("{}-nrf", self.mode)
        } else {
            self.mode.to_string()
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_suffix("-nrf") {
            Some(mode) => Ok(Variant { mode: mode.parse()?, nrf: true }),
            None => Ok(Variant { mode: s.parse()?, nrf: false }),
        }
    }
}

/// Metric names reported by [`compare`], in display order.
pub const COMPARE_METRICS: [&str; 6] = ["recall", "mpcr", "precision", "f1", "ece", "zero_recall"];

fn metric_values(r: &EvalReport) -> [f64; 6] {
    [r.recall_at_k, r.mpcr, r.precision, r.f1, r.ece, r.zero_recall_fraction]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean difference to the first variant; absent for the first variant.
    pub delta: Option<f64>,
    pub test: Option<TTest>,
}

impl CompareRow {
    /// True when the difference to the baseline is significant at 95%.
    pub fn significant(&self) -> bool {
        self.test.is_some_and(|t| t.significant)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Trains every objective once per seed (seeds run on separate threads),
/// evaluates each variant on the hold-out split and tests every variant
/// against the first one with Welch's t-test.
pub fn compare(
    dataset: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    k: usize,
    theta: f64,
    configure: impl Fn(Mode, u64) -> TrainConfig + Sync,
) -> Result<Vec<CompareRow>> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("at least two seeds are needed for a t-test".into()));
    }
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no modes to compare".into()));
    }
    let rule = FilterRule::new(theta)?;
    let mut modes: Vec<Mode> = variants.iter().map(|v| v.mode).collect();
    modes.sort();
    modes.dedup();

    // reports[seed index][variant] = report
    let per_seed: Vec<Result<BTreeMap<Variant, EvalReport>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let modes = &modes;
                let configure = &configure;
                scope.spawn(move || -> Result<BTreeMap<Variant, EvalReport>> {
                    let mut out = BTreeMap::new();
                    for &mode in modes {
                        let (params, _, heldout) = train_on_split(&configure(mode, seed), dataset)?;
                        for v in variants.iter().filter(|v| v.mode == mode) {
                            let decision = if v.nrf { Decision::Filtered(rule) } else { Decision::Unfiltered };
                            let opts = EvalOptions { k, decision, bins: DEFAULT_BINS };
                            out.insert(*v, evaluate(&params, mode, &heldout, &opts)?);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    let per_seed: Vec<BTreeMap<Variant, EvalReport>> = per_seed.into_iter().collect::<Result<_>>()?;

    let samples = |v: &Variant, m: usize| -> Vec<f64> { per_seed.iter().map(|r| metric_values(&r[v])[m]).collect() };
    let baseline = variants[0];
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for (m, name) in COMPARE_METRICS.iter().enumerate() {
            let values = samples(v, m);
            let (mean, std) = mean_std(&values);
            let (delta, test) = if vi == 0 {
                (None, None)
            } else {
                let base = samples(&baseline, m);
                let delta = mean - mean_std(&base).0;
                // Two constant samples have no variance to test against.
                (Some(delta), metrics::welch_t_test(&values, &base).ok())
            };
            rows.push(CompareRow { variant: v.label(), metric: name.to_string(), values, mean, std, delta, test });
        }
    }
    Ok(rows)
}
