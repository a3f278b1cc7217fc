//! A small classifier and its gradient-descent loop.
//!
//! The network is either affine (`D -> C+1`) or affine-ReLU-affine
//! (`D -> H -> C+1`); output 0 is the background class. Training runs plain
//! mini-batch SGD on one of three objectives and is fully determined by the
//! seed: the image-level hold-out split, the initial weights and the batch
//! order all come from one seeded generator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_model::{ClassStats, WeightPair};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, ScoreBatch, TargetBatch, DEFAULT_CLAMP_EPS};
use crate::pipeline;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sigmoid outputs, unweighted binary cross entropy.
    Bce,
    /// Sigmoid outputs, cost-sensitive binary cross entropy.
    Csl,
    /// Softmax outputs, categorical cross entropy.
    Softmax,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bce => "bce",
            Mode::Csl => "csl",
            Mode::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" | "plain-bce" => Ok(Mode::Bce),
            "csl" | "cost-sensitive" => Ok(Mode::Csl),
            "softmax" | "softmax-ce" => Ok(Mode::Softmax),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Width of the hidden layer; 0 means a linear model.
    pub hidden: usize,
    pub clamp_eps: f64,
}

impl TrainConfig {
    pub const DEFAULT_LR_LINEAR: f64 = 0.1;
    pub const DEFAULT_LR_HIDDEN: f64 = 0.05;

    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            learning_rate: Self::DEFAULT_LR_LINEAR,
            epochs: 5,
            batch_size: 256,
            seed,
            mode,
            hidden: 0,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::InvalidConfig(format!("clamp epsilon must lie in (0, 0.5), got {}", self.clamp_eps)));
        }
        Ok(())
    }
}

/// One affine layer, `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(-bound..=bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.gen_range(-bound..=bound)),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// Present for the one-hidden-layer variant; followed by a ReLU.
    pub hidden: Option<Dense>,
    pub output: Dense,
}

/// Model output: sigmoid scores or raw softmax logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Forward {
    Scores(ScoreBatch),
    Logits(Array2<f64>),
}

impl ClassifierParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn init(rng: &mut impl Rng, inputs: usize, hidden: usize, outputs: usize) -> Self {
        if hidden == 0 {
            Self { hidden: None, output: Dense::init(rng, inputs, outputs) }
        } else {
            Self { hidden: Some(Dense::init(rng, inputs, hidden)), output: Dense::init(rng, hidden, outputs) }
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.as_ref().map_or(0, Dense::outputs)
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", self.inputs()),
                found: x.ncols().to_string(),
            });
        }
        Ok(())
    }

    /// Pre-activations of the output layer.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(match &self.hidden {
            None => self.output.apply(x),
            Some(h) => {
                let act = h.apply(x).mapv(|a| a.max(0.0));
                self.output.apply(act.view())
            }
        })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Forward> {
        let logits = self.logits(x)?;
        Ok(match mode {
            Mode::Softmax => Forward::Logits(logits),
            Mode::Bce | Mode::Csl => Forward::Scores(ScoreBatch::from_logits(logits.view())?),
        })
    }

    /// Per-class scores in `[0, 1]`: sigmoid or softmax depending on `mode`.
    pub fn probabilities(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        let logits = self.logits(x)?;
        Ok(match mode {
            Mode::Softmax => loss::softmax(logits.view()),
            Mode::Bce | Mode::Csl => logits.mapv(loss::sigmoid),
        })
    }

    fn is_finite(&self) -> bool {
        let layer_ok = |d: &Dense| d.weights.iter().chain(d.bias.iter()).all(|x| x.is_finite());
        layer_ok(&self.output) && self.hidden.as_ref().is_none_or(layer_ok)
    }
}

/// Gradient with the same layout as [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl Gradients {
    fn all_finite(&self) -> bool {
        let ok = |d: &Dense| d.weights.iter().chain(d.bias.iter()).all(|x| x.is_finite());
        ok(&self.output) && self.hidden.as_ref().is_none_or(ok)
    }
}

/// `params <- params - lr * grad`; no momentum, no weight decay.
pub fn sgd_step(params: &mut ClassifierParams, grad: &Gradients, learning_rate: f64) -> Result<()> {
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let step = |p: &mut Dense, g: &Dense| {
        p.weights.scaled_add(-learning_rate, &g.weights);
        p.bias.scaled_add(-learning_rate, &g.bias);
    };
    match (&mut params.hidden, &grad.hidden) {
        (Some(p), Some(g)) => step(p, g),
        (None, None) => {}
        _ => {
            return Err(Error::ShapeMismatch {
                expected: format!("hidden width {}", params.hidden_width()),
                found: "gradient with a different layout".into(),
            })
        }
    }
    step(&mut params.output, &grad.output);
    Ok(())
}

/// Loss weights implied by `mode`.
fn loss_weights(mode: Mode, outputs: usize, stats: Option<&ClassStats>) -> Result<WeightPair> {
    match mode {
        Mode::Csl => {
            let stats =
                stats.ok_or_else(|| Error::InvalidConfig("cost-sensitive mode needs class statistics".into()))?;
            if stats.num_classes() != outputs {
                return Err(Error::ShapeMismatch {
                    expected: format!("statistics for {outputs} classes"),
                    found: stats.num_classes().to_string(),
                });
            }
            WeightPair::from_stats(stats)
        }
        Mode::Bce | Mode::Softmax => Ok(WeightPair::uniform(outputs)),
    }
}

/// Loss and gradient of one batch.
pub fn loss_and_gradients(
    params: &ClassifierParams,
    x: ArrayView2<'_, f64>,
    targets: &TargetBatch,
    mode: Mode,
    weights: &WeightPair,
    clamp_eps: f64,
) -> Result<(f64, Gradients)> {
    params.check_input(&x)?;
    let (hidden_pre, hidden_act) = match &params.hidden {
        Some(h) => {
            let pre = h.apply(x);
            let act = pre.mapv(|a| a.max(0.0));
            (Some(pre), Some(act))
        }
        None => (None, None),
    };
    let top_in = match &hidden_act {
        Some(a) => a.view(),
        None => x.view(),
    };
    let logits = params.output.apply(top_in);

    let (loss, d_logits) = match mode {
        Mode::Softmax => {
            (loss::softmax_ce_loss(logits.view(), targets)?, loss::softmax_ce_grad(logits.view(), targets)?)
        }
        Mode::Bce | Mode::Csl => (
            loss::cs_bce_loss_from_logits(logits.view(), targets, weights, clamp_eps)?,
            loss::cs_bce_grad_logits(logits.view(), targets, weights)?,
        ),
    };

    let output = Dense { weights: d_logits.t().dot(&top_in), bias: d_logits.sum_axis(Axis(0)) };
    let hidden = match (&params.hidden, hidden_pre) {
        (Some(_), Some(pre)) => {
            let mut d_hidden = d_logits.dot(&params.output.weights);
            d_hidden.zip_mut_with(&pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            Some(Dense { weights: d_hidden.t().dot(&x), bias: d_hidden.sum_axis(Axis(0)) })
        }
        _ => None,
    };
    Ok((loss, Gradients { hidden, output }))
}

/// Mean objective over `rows` of `dataset`, evaluated in fixed-size chunks.
pub fn dataset_loss(
    params: &ClassifierParams,
    dataset: &Dataset,
    rows: &[usize],
    mode: Mode,
    weights: &WeightPair,
    clamp_eps: f64,
) -> Result<f64> {
    const CHUNK: usize = 8192;
    let outputs = params.outputs();
    let mut total = 0.0;
    for chunk in rows.chunks(CHUNK) {
        let x = dataset.features.select(Axis(0), chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let targets = TargetBatch::from_labels(&labels, outputs)?;
        let logits = params.logits(x.view())?;
        let l = match mode {
            Mode::Softmax => loss::softmax_ce_loss(logits.view(), &targets)?,
            Mode::Bce | Mode::Csl => loss::cs_bce_loss_from_logits(logits.view(), &targets, weights, clamp_eps)?,
        };
        total += l * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_mpcr: f64,
    pub heldout_recall: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,heldout_mpcr,heldout_recall\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.heldout_mpcr, r.heldout_recall));
        }
        out
    }
}

/// Training and hold-out row indices. Whole images are shuffled with `seed`
/// and the last 20% (at least one image) are held out.
pub fn split_rows(dataset: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_rows_with(dataset, &mut rng)
}

fn split_rows_with(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut images = dataset.image_ids();
    if images.len() < 2 {
        return Err(Error::InvalidConfig("need at least two images for a hold-out split".into()));
    }
    images.shuffle(rng);
    let held = ((images.len() as f64 * 0.2).round() as usize).max(1);
    let heldout_images: std::collections::HashSet<u64> = images[images.len() - held..].iter().copied().collect();
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, img) in dataset.images.iter().enumerate() {
        if heldout_images.contains(img) {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, heldout))
}

/// Class statistics of the training split that `train` will use for `seed`.
pub fn training_stats(dataset: &Dataset, seed: u64) -> Result<ClassStats> {
    let (train, _) = split_rows(dataset, seed)?;
    let mut counts = vec![0u64; dataset.num_classes + 1];
    for i in train {
        counts[dataset.labels[i]] += 1;
    }
    ClassStats::from_tally(&counts)
}

/// Trains a classifier on the training split of `dataset`.
///
/// `stats` must cover background plus every foreground class and is required
/// in cost-sensitive mode; the other modes ignore it.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    stats: Option<&ClassStats>,
) -> Result<(ClassifierParams, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset has no pairs"));
    }
    let outputs = dataset.num_classes + 1;
    let weights = loss_weights(config.mode, outputs, stats)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_rows, heldout_rows) = split_rows_with(dataset, &mut rng)?;
    let heldout = dataset.subset(&heldout_rows);
    let mut params = ClassifierParams::init(&mut rng, dataset.dim(), config.hidden, outputs);
    let batch = config.batch_size.min(train_rows.len());
    let full_batch = batch == train_rows.len();

    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        if !full_batch {
            train_rows.shuffle(&mut rng);
        }
        for chunk in train_rows.chunks(batch) {
            let x = dataset.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let targets = TargetBatch::from_labels(&labels, outputs)?;
            let (_, grad) = loss_and_gradients(&params, x.view(), &targets, config.mode, &weights, config.clamp_eps)?;
            sgd_step(&mut params, &grad, config.learning_rate)?;
        }
        let loss = dataset_loss(&params, dataset, &train_rows, config.mode, &weights, config.clamp_eps)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let (heldout_mpcr, heldout_recall) = pipeline::heldout_summary(&params, config.mode, &heldout)?;
        history.epochs.push(EpochRecord { epoch, loss, heldout_mpcr, heldout_recall });
    }
    Ok((params, history))
}

/// Leading line of every checkpoint file.
pub const CHECKPOINT_HEADER: &str = "# vrd-csl checkpoint v1";

fn encode_matrix(m: &Array2<f64>) -> String {
    let values: Vec<String> = m.iter().map(f64::to_string).collect();
    format!("{},{}:{}", m.nrows(), m.ncols(), values.join(","))
}

fn encode_vector(v: &Array1<f64>) -> String {
    let values: Vec<String> = v.iter().map(f64::to_string).collect();
    format!("{}:{}", v.len(), values.join(","))
}

/// Text form of a trained model: `key=value` lines after a version comment.
/// Layers are listed input first; matrices are `rows,cols:` followed by the
/// row-major values, vectors `len:` followed by the values.
pub fn checkpoint_to_string(params: &ClassifierParams, config: &TrainConfig) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("mode={}\n", config.mode));
    out.push_str(&format!("learning_rate={}\n", config.learning_rate));
    out.push_str(&format!("epochs={}\n", config.epochs));
    out.push_str(&format!("batch_size={}\n", config.batch_size));
    out.push_str(&format!("seed={}\n", config.seed));
    out.push_str(&format!("hidden={}\n", config.hidden));
    out.push_str(&format!("clamp_eps={}\n", config.clamp_eps));
    let layers: Vec<&Dense> = params.hidden.iter().chain(std::iter::once(&params.output)).collect();
    out.push_str(&format!("layers={}\n", layers.len()));
    for (i, layer) in layers.iter().enumerate() {
        out.push_str(&format!("layer{i}.weights={}\n", encode_matrix(&layer.weights)));
        out.push_str(&format!("layer{i}.bias={}\n", encode_vector(&layer.bias)));
    }
    out
}

pub fn write_checkpoint(params: &ClassifierParams, config: &TrainConfig, path: &Path) -> Result<()> {
    crate::data_io::write_text(path, &checkpoint_to_string(params, config))
}

/// Parses [`checkpoint_to_string`] output.
pub fn parse_checkpoint(text: &str, path: &Path) -> Result<(ClassifierParams, TrainConfig)> {
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(err(1, format!("expected `{CHECKPOINT_HEADER}`"))),
    }
    let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(idx + 1, "expected key=value".into()))?;
        fields.insert(k.to_string(), (idx + 1, v.to_string()));
    }
    let get = |key: &str| -> Result<&(usize, String)> {
        fields.get(key).ok_or_else(|| err(0, format!("missing key `{key}`")))
    };
    fn parse<T: FromStr>(raw: &(usize, String), key: &str, path: &Path) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        raw.1.parse::<T>().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: raw.0,
            message: format!("{key}: {e}"),
        })
    }
    let config = TrainConfig {
        learning_rate: parse(get("learning_rate")?, "learning_rate", path)?,
        epochs: parse(get("epochs")?, "epochs", path)?,
        batch_size: parse(get("batch_size")?, "batch_size", path)?,
        seed: parse(get("seed")?, "seed", path)?,
        mode: get("mode")?.1.parse()?,
        hidden: parse(get("hidden")?, "hidden", path)?,
        clamp_eps: parse(get("clamp_eps")?, "clamp_eps", path)?,
    };
    let layer_count: usize = parse(get("layers")?, "layers", path)?;
    let expected_layers = if config.hidden == 0 { 1 } else { 2 };
    if layer_count != expected_layers {
        return Err(err(get("layers")?.0, format!("hidden={} implies {expected_layers} layers", config.hidden)));
    }

    let values = |raw: &(usize, String), key: &str, dims: usize| -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, data) = raw.1.split_once(':').ok_or_else(|| err(raw.0, format!("{key}: expected shape:values")))?;
        let shape: Vec<usize> = shape
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(raw.0, format!("{key}: {e}")))?;
        if shape.len() != dims {
            return Err(err(raw.0, format!("{key}: expected {dims} dimensions")));
        }
        let data: Vec<f64> = if data.is_empty() {
            Vec::new()
        } else {
            data.split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(raw.0, format!("{key}: {e}")))?
        };
        if data.len() != shape.iter().product::<usize>() || data.iter().any(|x| !x.is_finite()) {
            return Err(err(raw.0, format!("{key}: value count does not match shape or is not finite")));
        }
        Ok((shape, data))
    };
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let wk = format!("layer{i}.weights");
        let bk = format!("layer{i}.bias");
        let (ws, wd) = values(get(&wk)?, &wk, 2)?;
        let (bs, bd) = values(get(&bk)?, &bk, 1)?;
        if bs[0] != ws[0] {
            return Err(err(get(&bk)?.0, format!("{bk}: length {} does not match {} outputs", bs[0], ws[0])));
        }
        layers.push(Dense {
            weights: Array2::from_shape_vec((ws[0], ws[1]), wd).expect("shape checked"),
            bias: Array1::from_vec(bd),
        });
    }
    let output = layers.pop().expect("at least one layer");
    let hidden = layers.pop();
    if let Some(h) = &hidden {
        if h.outputs() != output.inputs() || h.outputs() != config.hidden {
            return Err(err(0, "layer widths do not chain".into()));
        }
    }
    Ok((ClassifierParams { hidden, output }, config))
}

pub fn read_checkpoint(path: &Path) -> Result<(ClassifierParams, TrainConfig)> {
    parse_checkpoint(&std::fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_model_scores_one_half() {
        let params =
            ClassifierParams { hidden: None, output: Dense { weights: Array2::zeros((3, 4)), bias: Array1::zeros(3) } };
        let x = Array2::from_elem((5, 4), 0.7);
        match params.forward(x.view(), Mode::Bce).unwrap() {
            Forward::Scores(s) => {
                assert_eq!(s.values().dim(), (5, 3));
                assert!(s.values().iter().all(|&z| z == 0.5));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(params.forward(x.view(), Mode::Softmax).unwrap(), Forward::Logits(_)));
        assert!(params.logits(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn bias_only_score() {
        let params = ClassifierParams { hidden: None, output: Dense { weights: array![[1.0]], bias: array![3.0] } };
        let p = params.probabilities(array![[0.0]].view(), Mode::Csl).unwrap();
        assert!((p[[0, 0]] - 0.952574).abs() < 1e-6);
    }

    fn toy_params() -> ClassifierParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ClassifierParams::init(&mut rng, 2, 0, 2)
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = ClassifierParams { hidden: None, output: Dense { weights: array![[1.0]], bias: array![0.0] } };
        let g = Gradients { hidden: None, output: Dense { weights: array![[2.0]], bias: array![0.0] } };
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.output.weights[[0, 0]] - 0.8).abs() < 1e-15);

        let before = toy_params();
        let mut after = before.clone();
        let zero = Gradients { hidden: None, output: Dense { weights: Array2::zeros((2, 2)), bias: Array1::zeros(2) } };
        sgd_step(&mut after, &zero, 0.5).unwrap();
        assert_eq!(before, after);
        let mut nonzero = zero.clone();
        nonzero.output.weights.fill(3.0);
        sgd_step(&mut after, &nonzero, 0.0).unwrap();
        assert_eq!(before, after);
        nonzero.output.bias[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut after, &nonzero, 0.1), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ClassifierParams::init(&mut rng, 16, 8, 5);
        let h = p.hidden.as_ref().unwrap();
        assert!(h.weights.iter().all(|w| w.abs() <= 0.25));
        assert!(p.output.weights.iter().all(|w| w.abs() <= 1.0 / 8f64.sqrt()));
        assert_eq!((p.inputs(), p.hidden_width(), p.outputs()), (16, 8, 5));
    }

    #[test]
    fn hidden_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ClassifierParams::init(&mut rng, 3, 4, 4);
        let x = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-2.0..2.0));
        let targets = TargetBatch::from_labels(&[0, 1, 3, 2, 0, 0], 4).unwrap();
        let w = WeightPair::from_stats(&ClassStats::from_counts(&[50, 8, 3, 1]).unwrap()).unwrap();
        for mode in [Mode::Csl, Mode::Softmax] {
            let (_, g) = loss_and_gradients(&params, x.view(), &targets, mode, &w, 1e-12).unwrap();
            let f = |p: &ClassifierParams| loss_and_gradients(p, x.view(), &targets, mode, &w, 1e-12).unwrap().0;
            let h = 1e-6;
            let gh = g.hidden.as_ref().unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    let mut plus = params.clone();
                    plus.hidden.as_mut().unwrap().weights[[r, c]] += h;
                    let mut minus = params.clone();
                    minus.hidden.as_mut().unwrap().weights[[r, c]] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    assert!((fd - gh.weights[[r, c]]).abs() < 1e-6, "{mode} hidden ({r},{c})");
                }
            }
            for r in 0..4 {
                let mut plus = params.clone();
                plus.output.bias[r] += h;
                let mut minus = params.clone();
                minus.output.bias[r] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - g.output.bias[r]).abs() < 1e-6, "{mode} bias {r}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Mode::Bce, 0);
        c.validate().unwrap();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Mode::Bce, 0);
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Mode::Bce, 0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert_eq!("csl".parse::<Mode>().unwrap(), Mode::Csl);
        assert!("focal".parse::<Mode>().is_err());
    }
    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for hidden in [0, 5] {
            let params = ClassifierParams::init(&mut rng, 4, hidden, 3);
            let mut config = TrainConfig::new(Mode::Csl, 17);
            config.hidden = hidden;
            let text = checkpoint_to_string(&params, &config);
            assert!(text.starts_with(CHECKPOINT_HEADER));
            let (p2, c2) = parse_checkpoint(&text, Path::new("mem")).unwrap();
            assert_eq!(p2, params);
            assert_eq!(c2, config);
        }
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ClassifierParams::init(&mut rng, 2, 0, 2);
        let text = checkpoint_to_string(&params, &TrainConfig::new(Mode::Bce, 0));
        let p = Path::new("mem");
        assert!(parse_checkpoint(&text.replace(CHECKPOINT_HEADER, "# other"), p).is_err());
        assert!(parse_checkpoint(&text.replace("layer0.bias=2:", "layer0.bias=3:"), p).is_err());
        assert!(parse_checkpoint(&text.replace("mode=bce", "mode=svm"), p).is_err());
        assert!(parse_checkpoint(&text.replace("hidden=0", "hidden=4"), p).is_err());
    }
}
