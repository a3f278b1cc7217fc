//! Synthetic long-tail datasets and the on-disk formats.
//!
//! Formats (all versioned):
//!
//! * relation files (`*.jsonl`): a `# vrd-csl relations v1` comment line, then
//!   one JSON object per line with `image`, `subject`, `object`, `predicate`
//!   and optionally `score` and `scores` (full per-class vector, background
//!   first). Ground truth and predictions share the format.
//! * dataset directories: `header.json` (format tag, version, dimensions,
//!   generator config echo, class counts), `features.csv` (comment line, then
//!   `image,subject,object,label,f0..` rows) and `ground_truth.jsonl`.
//! * reports: `metric,value` CSV, a single JSON object, and dense CSV grids
//!   for confusion matrices and calibration tables.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so readers never see a partial file.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost_model::ClassStats;
use crate::error::{Error, Result};
use crate::metrics::{CalibrationBin, ConfusionMatrix, EvalReport, RelInstance};

pub const RELATIONS_HEADER: &str = "# vrd-csl relations v1";
pub const FEATURES_HEADER: &str = "# vrd-csl features v1";
pub const DATASET_FORMAT: &str = "vrd-csl-dataset";
pub const DATASET_VERSION: u32 = 1;

const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Generator settings. Class `j` (1-based) has Zipf weight `j^-s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub zipf_s: f64,
    pub images: usize,
    pub pairs_per_image: usize,
    pub fg_fraction: f64,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            zipf_s: 1.5,
            images: 1000,
            pairs_per_image: 60,
            fg_fraction: 0.06,
            dim: 16,
            separation: 1.0,
            noise: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The long-tail reference set: 20 predicates, Zipf 1.5, 6% foreground and
    /// 13,889 images of 60 pairs, i.e. 50,000 foreground pairs.
    pub fn reference(seed: u64) -> Self {
        Self { images: 13_889, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            return bad(format!("zipf exponent must be positive, got {}", self.zipf_s));
        }
        if self.images == 0 || self.pairs_per_image == 0 {
            return bad("images and pairs per image must be positive".into());
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction <= 1.0) {
            return bad(format!("foreground fraction must lie in (0, 1], got {}", self.fg_fraction));
        }
        if self.dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        if !(self.separation > 0.0 && self.noise > 0.0) {
            return bad("separation and noise scales must be positive".into());
        }
        Ok(())
    }

    pub fn total_pairs(&self) -> usize {
        self.images * self.pairs_per_image
    }

    pub fn foreground_pairs(&self) -> usize {
        (self.fg_fraction * self.total_pairs() as f64).round() as usize
    }
}

/// Candidate pairs with features and labels (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub images: Vec<u64>,
    pub subjects: Vec<u64>,
    pub objects: Vec<u64>,
    pub config: Option<SynthConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Counts of every label `0..=C`.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes + 1];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Statistics over background plus foreground labels.
    pub fn class_stats(&self) -> Result<ClassStats> {
        ClassStats::from_tally(&self.label_counts())
    }

    /// Foreground pairs as ground-truth triplets.
    pub fn ground_truth(&self) -> Vec<RelInstance> {
        (0..self.len())
            .filter(|&i| self.labels[i] != 0)
            .map(|i| RelInstance {
                image: self.images[i],
                subject: self.subjects[i],
                object: self.objects[i],
                predicate: self.labels[i],
                score: None,
            })
            .collect()
    }

    /// Rows `rows` in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            features: self.features.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            images: rows.iter().map(|&i| self.images[i]).collect(),
            subjects: rows.iter().map(|&i| self.subjects[i]).collect(),
            objects: rows.iter().map(|&i| self.objects[i]).collect(),
            config: self.config.clone(),
        }
    }

    /// Distinct image ids in first-appearance order.
    pub fn image_ids(&self) -> Vec<u64> {
        let mut seen = HashSet::new();
        self.images.iter().copied().filter(|i| seen.insert(*i)).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.nrows() != n || self.images.len() != n || self.subjects.len() != n || self.objects.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} rows in every column"),
                found: format!("{} feature rows", self.features.nrows()),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l > self.num_classes) {
            return Err(Error::LabelOutOfRange { label, min: 0, max: self.num_classes });
        }
        let mut seen = HashSet::with_capacity(n);
        for i in 0..n {
            if !seen.insert((self.images[i], self.subjects[i], self.objects[i])) {
                return Err(Error::DuplicatePair {
                    image: self.images[i],
                    subject: self.subjects[i],
                    object: self.objects[i],
                });
            }
        }
        Ok(())
    }
}

/// Draws `n` labels from Zipf(`s`) over `1..=classes` by inverse CDF.
pub fn sample_zipf_labels(rng: &mut impl Rng, classes: usize, s: f64, n: usize) -> Vec<usize> {
    let weights: Vec<f64> = (1..=classes).map(|k| (k as f64).powf(-s)).collect();
    let norm: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(classes);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / norm;
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.partition_point(|&c| c <= u).min(classes - 1) + 1
        })
        .collect()
}

/// Ordered (subject, object) pair number `p` among `objects` objects.
fn pair_ids(p: usize, objects: usize) -> (u64, u64) {
    let s = p / (objects - 1);
    let mut o = p % (objects - 1);
    if o >= s {
        o += 1;
    }
    (s as u64, o as u64)
}

/// Builds a synthetic dataset. Foreground predicates follow a Zipf law; each
/// predicate has a fixed random centre and its features are that centre plus
/// isotropic noise. Background features come from one broad Gaussian whose
/// spread covers all centres.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, d) = (config.num_classes, config.dim);

    let center_dist = Normal::new(0.0, config.separation).expect("positive scale");
    let centers = Array2::from_shape_fn((c, d), |_| center_dist.sample(&mut rng));

    let total = config.total_pairs();
    let n_fg = config.foreground_pairs();
    let mut fg_labels = None;
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let draw = sample_zipf_labels(&mut rng, c, config.zipf_s, n_fg);
        let mut present = vec![false; c + 1];
        for &l in &draw {
            present[l] = true;
        }
        if present[1..].iter().all(|&p| p) {
            fg_labels = Some(draw);
            break;
        }
    }
    let fg_labels = fg_labels.ok_or(Error::ZipfRetriesExhausted(MAX_RESAMPLE_ATTEMPTS))?;

    let mut labels = vec![0usize; total];
    for (slot, label) in index::sample(&mut rng, total, n_fg).into_iter().zip(fg_labels) {
        labels[slot] = label;
    }

    let noise = Normal::new(0.0, config.noise).expect("positive scale");
    let background =
        Normal::new(0.0, (config.separation.powi(2) + config.noise.powi(2)).sqrt()).expect("positive scale");
    let mut features = Array2::zeros((total, d));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        match labels[i] {
            0 => row.iter_mut().for_each(|x| *x = background.sample(&mut rng)),
            l => {
                for (x, &mu) in row.iter_mut().zip(centers.row(l - 1)) {
                    *x = mu + noise.sample(&mut rng);
                }
            }
        }
    }

    let ppi = config.pairs_per_image;
    let mut objects_per_image = 2;
    while objects_per_image * (objects_per_image - 1) < ppi {
        objects_per_image += 1;
    }
    let mut images = Vec::with_capacity(total);
    let mut subjects = Vec::with_capacity(total);
    let mut objects = Vec::with_capacity(total);
    for img in 0..config.images {
        for p in 0..ppi {
            let (s, o) = pair_ids(p, objects_per_image);
            images.push(img as u64);
            subjects.push(s);
            objects.push(o);
        }
    }

    Ok(Dataset { num_classes: c, features, labels, images, subjects, objects, config: Some(config.clone()) })
}

fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// One line of a relation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub image: u64,
    pub subject: u64,
    pub object: u64,
    pub predicate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl RelationRecord {
    pub fn instance(&self) -> RelInstance {
        RelInstance {
            image: self.image,
            subject: self.subject,
            object: self.object,
            predicate: self.predicate,
            score: self.score,
        }
    }
}

impl From<RelInstance> for RelationRecord {
    fn from(r: RelInstance) -> Self {
        Self {
            image: r.image,
            subject: r.subject,
            object: r.object,
            predicate: r.predicate,
            score: r.score,
            scores: None,
        }
    }
}

pub fn write_relations(path: &Path, records: &[RelationRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(RELATIONS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Reads and validates a relation file. `min_predicate` is 1 for ground truth
/// and 0 for predictions.
fn load_relations(path: &Path, num_classes: usize, min_predicate: usize) -> Result<Vec<RelationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: RelationRecord =
            serde_json::from_str(line).map_err(|e| parse_error(path, lineno, format!("malformed record: {e}")))?;
        if rec.predicate < min_predicate || rec.predicate > num_classes {
            return Err(parse_error(
                path,
                lineno,
                format!("predicate {} outside {}..={}", rec.predicate, min_predicate, num_classes),
            ));
        }
        if let Some(s) = rec.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(parse_error(path, lineno, format!("score {s} outside [0, 1]")));
            }
        }
        if let Some(v) = &rec.scores {
            if v.len() != num_classes + 1 {
                return Err(parse_error(
                    path,
                    lineno,
                    format!("expected {} scores, found {}", num_classes + 1, v.len()),
                ));
            }
            if let Some(s) = v.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(parse_error(path, lineno, format!("score {s} outside [0, 1]")));
            }
        }
        if !seen.insert((rec.image, rec.subject, rec.object)) {
            return Err(parse_error(
                path,
                lineno,
                format!("duplicate pair (image {}, subject {}, object {})", rec.image, rec.subject, rec.object),
            ));
        }
        records.push(rec);
    }
    Ok(records)
}

fn group<T>(items: impl IntoIterator<Item = (u64, T)>) -> BTreeMap<u64, Vec<T>> {
    let mut map: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for (image, item) in items {
        map.entry(image).or_default().push(item);
    }
    map
}

/// Ground-truth triplets per image; predicates must lie in `1..=num_classes`.
pub fn load_ground_truth(path: &Path, num_classes: usize) -> Result<BTreeMap<u64, Vec<RelInstance>>> {
    let records = load_relations(path, num_classes, 1)?;
    Ok(group(records.into_iter().map(|r| (r.image, r.instance()))))
}

/// Predictions per image; predicate 0 marks a background decision.
pub fn load_predictions(path: &Path, num_classes: usize) -> Result<BTreeMap<u64, Vec<RelationRecord>>> {
    let records = load_relations(path, num_classes, 0)?;
    Ok(group(records.into_iter().map(|r| (r.image, r))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    num_classes: usize,
    dim: usize,
    num_pairs: usize,
    seed: Option<u64>,
    config: Option<SynthConfig>,
    class_counts: Vec<u64>,
}

const HEADER_FILE: &str = "header.json";
const FEATURES_FILE: &str = "features.csv";
const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

/// Writes `header.json`, `features.csv` and `ground_truth.jsonl` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        num_classes: dataset.num_classes,
        dim: dataset.dim(),
        num_pairs: dataset.len(),
        seed: dataset.config.as_ref().map(|c| c.seed),
        config: dataset.config.clone(),
        class_counts: dataset.label_counts(),
    };
    let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
    json.push('\n');

    let mut csv = String::with_capacity(dataset.len() * (dataset.dim() + 4) * 12);
    csv.push_str(FEATURES_HEADER);
    csv.push('\n');
    csv.push_str("image,subject,object,label");
    for f in 0..dataset.dim() {
        write!(csv, ",f{f}").unwrap();
    }
    csv.push('\n');
    for (i, row) in dataset.features.rows().into_iter().enumerate() {
        write!(csv, "{},{},{},{}", dataset.images[i], dataset.subjects[i], dataset.objects[i], dataset.labels[i])
            .unwrap();
        for x in row {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    }

    let gt: Vec<RelationRecord> = dataset.ground_truth().into_iter().map(Into::into).collect();
    atomic_write(&dir.join(FEATURES_FILE), csv.as_bytes())?;
    write_relations(&dir.join(GROUND_TRUTH_FILE), &gt)?;
    atomic_write(&dir.join(HEADER_FILE), json.as_bytes())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join(HEADER_FILE);
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(&header_path)?)
        .map_err(|e| parse_error(&header_path, e.line(), e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_error(
            &header_path,
            1,
            format!("unsupported dataset format {} v{}", header.format, header.version),
        ));
    }

    let path = dir.join(FEATURES_FILE);
    let text = fs::read_to_string(&path)?;
    let d = header.dim;
    let mut features = Vec::with_capacity(header.num_pairs * d);
    let (mut labels, mut images, mut subjects, mut objects) = (
        Vec::with_capacity(header.num_pairs),
        Vec::with_capacity(header.num_pairs),
        Vec::with_capacity(header.num_pairs),
        Vec::with_capacity(header.num_pairs),
    );
    let mut saw_columns = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_columns {
            saw_columns = true;
            if !line.starts_with("image,subject,object,label") {
                return Err(parse_error(&path, lineno, "missing column header"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 4 {
            return Err(parse_error(&path, lineno, format!("expected {} fields, found {}", d + 4, fields.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| parse_error(&path, lineno, format!("{s:?}: {e}")));
        images.push(int(fields[0])?);
        subjects.push(int(fields[1])?);
        objects.push(int(fields[2])?);
        labels.push(int(fields[3])? as usize);
        for f in &fields[4..] {
            let x: f64 = f.parse().map_err(|e| parse_error(&path, lineno, format!("{f:?}: {e}")))?;
            features.push(x);
        }
    }
    let n = labels.len();
    if n != header.num_pairs {
        return Err(parse_error(
            &path,
            text.lines().count(),
            format!("header announces {} pairs, file has {n}", header.num_pairs),
        ));
    }
    let dataset = Dataset {
        num_classes: header.num_classes,
        features: Array2::from_shape_vec((n, d), features).expect("row lengths checked"),
        labels,
        images,
        subjects,
        objects,
        config: header.config,
    };
    dataset.validate()?;
    if dataset.label_counts() != header.class_counts {
        return Err(parse_error(&header_path, 1, "class counts disagree with labels"));
    }
    Ok(dataset)
}

/// Loads per-class counts from a `class_id,count` CSV (header required).
pub fn load_class_counts(path: &Path) -> Result<ClassStats> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l.trim() == "class_id,count" => {}
        Some((i, _)) => return Err(parse_error(path, i + 1, "expected header `class_id,count`")),
        None => return Err(parse_error(path, 1, "missing header `class_id,count`")),
    }
    let mut rows: Vec<(usize, i64)> = Vec::new();
    for (i, line) in lines {
        let (id, count) = line.split_once(',').ok_or_else(|| parse_error(path, i + 1, "expected `class_id,count`"))?;
        let id: usize = id.trim().parse().map_err(|e| parse_error(path, i + 1, format!("class id: {e}")))?;
        let count: i64 = count.trim().parse().map_err(|e| parse_error(path, i + 1, format!("count: {e}")))?;
        rows.push((id, count));
    }
    rows.sort_by_key(|r| r.0);
    for (pos, (id, _)) in rows.iter().enumerate() {
        if *id != pos + rows[0].0 {
            return Err(Error::InvalidConfig(format!("class ids must be contiguous, missing {}", pos + rows[0].0)));
        }
    }
    ClassStats::from_counts(&rows.iter().map(|r| r.1).collect::<Vec<_>>())
}

/// `metric,value` rows in a fixed order.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    let mut row = |k: &str, v: String| {
        out.push_str(k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    };
    row("recall_at_k", report.recall_at_k.to_string());
    row("mpcr", report.mpcr.to_string());
    row("precision", report.precision.to_string());
    row("f1", report.f1.to_string());
    row("ece", report.ece.to_string());
    row("zero_recall_fraction", report.zero_recall_fraction.to_string());
    for (class, r) in &report.per_class_recall {
        row(&format!("recall_class_{class}"), r.to_string());
    }
    row("k", report.k.to_string());
    row("nrf", u8::from(report.nrf).to_string());
    row("theta", report.theta.to_string());
    out
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    atomic_write(path, report_csv(report).as_bytes())
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    atomic_write(path, json.as_bytes())
}

/// Dense grid; the first row and column carry class labels.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred");
    for c in cm.classes() {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
    for (row, c) in cm.counts().rows().into_iter().zip(cm.classes()) {
        write!(out, "{c}").unwrap();
        for x in row {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    atomic_write(path, confusion_csv(cm).as_bytes())
}

pub fn write_reliability(bins: &[CalibrationBin], path: &Path) -> Result<()> {
    let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
    for b in bins {
        writeln!(out, "{},{},{},{},{}", b.lower, b.upper, b.count, b.mean_confidence, b.accuracy).unwrap();
    }
    atomic_write(path, out.as_bytes())
}

/// Score histogram: one row per bin with the share of all scores it holds.
pub fn write_histogram(bins: &[CalibrationBin], path: &Path) -> Result<()> {
    let total: usize = bins.iter().map(|b| b.count).sum();
    let mut out = String::from("lower,upper,count,fraction\n");
    for b in bins {
        let frac = if total == 0 { 0.0 } else { b.count as f64 / total as f64 };
        writeln!(out, "{},{},{},{}", b.lower, b.upper, b.count, frac).unwrap();
    }
    atomic_write(path, out.as_bytes())
}

/// Writes any text file atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}
