//! Command-line front end. `run` parses arguments, executes one subcommand and
//! returns the process exit code: 0 on success, 1 for usage or invalid flag
//! values, 2 for data and runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data_io::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{self, Mode, TrainConfig};
use crate::pipeline::{self, EvalOptions, Variant, DEFAULT_BINS, DEFAULT_K};
use crate::predict::{Decision, FilterRule, DEFAULT_THETA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vrd-csl", version, about = "Cost-sensitive predicate classification on synthetic long-tail data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tail dataset.
    GenData(GenDataArgs),
    /// Train a classifier and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the hold-out split.
    Eval(EvalArgs),
    /// Train several objectives over multiple seeds and test the differences.
    Compare(CompareArgs),
    /// Reliability table and score histogram of a checkpoint.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of foreground predicates.
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.5)]
    pub zipf_s: f64,
    #[arg(long, default_value_t = 1000)]
    pub images: usize,
    #[arg(long, default_value_t = 60)]
    pub pairs_per_image: usize,
    #[arg(long, default_value_t = 0.06)]
    pub fg_fraction: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "csl", value_parser = parse_mode)]
    pub mode: Mode,
    /// Learning rate; 0.1 for a linear model, 0.05 with a hidden layer.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Hidden layer width; 0 trains a linear model.
    #[arg(long, default_value_t = 0)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.ckpt")]
    pub out_model: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub nrf: Switch,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Metric CSV; a `.json` copy and a `.confusion.csv` are written next to it.
    #[arg(long, default_value = "report.csv")]
    pub out_report: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of training seeds, starting at 0.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Comma-separated variants; the first is the baseline. `-nrf` adds filtering.
    #[arg(long, default_value = "bce,csl", value_delimiter = ',', value_parser = parse_variant)]
    pub modes: Vec<Variant>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Directory for reliability.csv and histogram.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::InvalidConfig(_) => {
                    let _ = writeln!(err, "\nFor more information, try '--help'.");
                    EXIT_USAGE
                }
                _ => EXIT_RUNTIME,
            }
        }
    }
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Calibrate(a) => calibrate(a, out),
    }
}

fn echo(out: &mut dyn Write, config: serde_json::Value) -> Result<()> {
    writeln!(out, "config: {config}")?;
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let config = SynthConfig {
        num_classes: a.classes,
        zipf_s: a.zipf_s,
        images: a.images,
        pairs_per_image: a.pairs_per_image,
        fg_fraction: a.fg_fraction,
        dim: a.dim,
        seed: a.seed,
        ..SynthConfig::default()
    };
    echo(out, json!({ "command": "gen-data", "out": a.out, "synth": config }))?;
    let dataset = data_io::generate_synthetic(&config)?;
    data_io::write_dataset(&dataset, &a.out)?;

    let counts = dataset.label_counts();
    let foreground: u64 = counts[1..].iter().sum();
    let mut order: Vec<usize> = (1..counts.len()).collect();
    order.sort_by(|&x, &y| counts[y].cmp(&counts[x]).then(x.cmp(&y)));
    writeln!(out, "rank,class,count,fraction")?;
    for (rank, &c) in order.iter().enumerate() {
        writeln!(out, "{},{},{},{:.6}", rank + 1, c, counts[c], counts[c] as f64 / foreground as f64)?;
    }
    writeln!(out, "background,{},total,{}", counts[0], dataset.len())?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> TrainConfig {
    let mut config = TrainConfig::new(a.mode, a.seed);
    config.epochs = a.epochs;
    config.hidden = a.hidden;
    config.learning_rate =
        a.lr.unwrap_or(if a.hidden > 0 { TrainConfig::DEFAULT_LR_HIDDEN } else { TrainConfig::DEFAULT_LR_LINEAR });
    config
}

fn history_path(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_train_config(a);
    echo(out, json!({ "command": "train", "data": a.data, "out_model": a.out_model, "train": config }))?;
    config.validate()?;
    let dataset = data_io::read_dataset(&a.data)?;
    let (params, history, heldout) = pipeline::train_on_split(&config, &dataset)?;
    model::write_checkpoint(&params, &config, &a.out_model)?;
    data_io::write_text(&history_path(&a.out_model), &history.to_csv())?;

    let last = history.last().ok_or(Error::EmptyInput("no epochs were run"))?;
    writeln!(out, "epoch,loss,heldout_mpcr,heldout_recall")?;
    writeln!(out, "{},{},{},{}", last.epoch, last.loss, last.heldout_mpcr, last.heldout_recall)?;
    let cal = pipeline::calibration(&params, config.mode, &heldout, DEFAULT_BINS)?;
    writeln!(out, "heldout_ece,{}", cal.ece)?;
    Ok(())
}

fn load_heldout(model_path: &Path, data: &Path) -> Result<(model::ClassifierParams, TrainConfig, data_io::Dataset)> {
    let (params, config) = model::read_checkpoint(model_path)?;
    let dataset = data_io::read_dataset(data)?;
    let (_, heldout_rows) = model::split_rows(&dataset, config.seed)?;
    Ok((params, config, dataset.subset(&heldout_rows)))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    let mut name = stem;
    name.push(suffix);
    path.with_file_name(name)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    echo(
        out,
        json!({
            "command": "eval", "model": a.model, "data": a.data, "k": a.k, "theta": a.theta,
            "nrf": a.nrf == Switch::On, "bins": a.bins, "out_report": a.out_report,
        }),
    )?;
    let rule = FilterRule::new(a.theta)?;
    if a.k == 0 || a.bins == 0 {
        return Err(Error::InvalidConfig("k and bins must be positive".into()));
    }
    let decision = if a.nrf == Switch::On { Decision::Filtered(rule) } else { Decision::Unfiltered };
    let opts = EvalOptions { k: a.k, decision, bins: a.bins };
    let (params, config, heldout) = load_heldout(&a.model, &a.data)?;
    let report = pipeline::evaluate(&params, config.mode, &heldout, &opts)?;

    data_io::write_report(&report, &a.out_report)?;
    data_io::write_report_json(&report, &sibling(&a.out_report, ".json"))?;
    data_io::write_confusion(&report.confusion, &sibling(&a.out_report, ".confusion.csv"))?;
    writeln!(out, "recall@{},mpcr,precision,f1", a.k)?;
    writeln!(out, "{:.4},{:.4},{:.4},{:.4}", report.recall_at_k, report.mpcr, report.precision, report.f1)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let labels: Vec<String> = a.modes.iter().map(Variant::label).collect();
    echo(
        out,
        json!({ "command": "compare", "data": a.data, "seeds": a.seeds, "modes": labels, "k": a.k, "theta": a.theta }),
    )?;
    FilterRule::new(a.theta)?;
    if a.k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if a.seeds < 2 {
        return Err(Error::InvalidConfig("at least two seeds are needed for a t-test".into()));
    }
    let dataset = data_io::read_dataset(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let rows = pipeline::compare(&dataset, &a.modes, &seeds, a.k, a.theta, pipeline::default_train_config)?;

    writeln!(out, "variant,metric,mean,std,delta,t,dof,significant")?;
    for r in &rows {
        // Star marks a difference that is not significant at 95%.
        let flag = match (r.delta, r.significant()) {
            (None, _) => "",
            (Some(_), true) => "yes",
            (Some(_), false) => "*",
        };
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{},{}",
            r.variant,
            r.metric,
            r.mean,
            r.std,
            r.delta.map(|d| format!("{d:.6}")).unwrap_or_default(),
            fmt_opt(r.test.map(|t| t.t)),
            fmt_opt(r.test.map(|t| t.dof)),
            flag
        )?;
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    echo(out, json!({ "command": "calibrate", "model": a.model, "data": a.data, "bins": a.bins, "out": a.out }))?;
    if a.bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    let (params, config, heldout) = load_heldout(&a.model, &a.data)?;
    let summary = pipeline::calibration(&params, config.mode, &heldout, a.bins)?;
    writeln!(out, "ece,{}", summary.ece)?;
    writeln!(out, "lower,upper,count,mean_confidence,accuracy")?;
    for b in &summary.bins {
        writeln!(out, "{},{},{},{},{}", b.lower, b.upper, b.count, b.mean_confidence, b.accuracy)?;
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        data_io::write_reliability(&summary.bins, &dir.join("reliability.csv"))?;
        data_io::write_histogram(&summary.bins, &dir.join("histogram.csv"))?;
    }
    Ok(())
}
