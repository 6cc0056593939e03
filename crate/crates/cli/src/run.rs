//! Executes resolved run configs and writes their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use heunflow::blocks::Family;
use heunflow::data::{gen_sine, load_ecg_csv, load_mnist_idx, stratified_split, LabeledDataset};
use heunflow::ode::{empirical_order, sqrt_growth_problem, Method, OrderEstimate};
use heunflow::training::{fmt_sig, train_classifier, train_seq_predictor, MetricsHistory, TrainError};

use crate::config::{ClassifyConfig, OdeBenchConfig, RunConfig, SineConfig, SweepConfig};
use crate::plot::{metrics_chart, render, series_from_csv, Panel, Series};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub best_accuracy: f64,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    OdeBench(Vec<(Method, OrderEstimate)>),
    Classify(MetricsHistory),
    Sine {
        history: MetricsHistory,
        generation_mse: f64,
    },
    Sweep(Vec<SweepRow>),
}

impl Outcome {
    pub fn history(&self) -> Option<&MetricsHistory> {
        match self {
            Outcome::Classify(h) | Outcome::Sine { history: h, .. } => Some(h),
            _ => None,
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Outcome::OdeBench(rows) => rows
                .iter()
                .map(|(m, est)| format!("{}: fitted order {:.4}", m.name(), est.order))
                .collect::<Vec<_>>()
                .join("\n"),
            Outcome::Classify(h) => best_line(h),
            Outcome::Sine {
                history,
                generation_mse,
            } => format!("{}\ngeneration mse {}", best_line(history), fmt_sig(*generation_mse, 6)),
            Outcome::Sweep(rows) => rows
                .iter()
                .map(|r| format!("alpha {}: best accuracy {:.4} at iteration {}", r.alpha, r.best_accuracy, r.best_iteration))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

fn best_line(h: &MetricsHistory) -> String {
    match h.best_accuracy() {
        Some((acc, it)) => format!("best held-out accuracy {acc:.4} at iteration {it}"),
        None => "no iterations run".into(),
    }
}

/// Runs `config`, writing `config.json` and the run's artifacts to `out_dir`.
pub fn execute(config: &RunConfig, out_dir: &Path) -> Result<Outcome, BoxError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), config.to_json())?;
    match config {
        RunConfig::OdeBench(c) => ode_bench(c, out_dir),
        RunConfig::Mnist(c) => {
            let pool = load_mnist(&c.data_dir)?;
            classify("mnist", c, &pool, out_dir)
        }
        RunConfig::Ecg(c) => {
            let pool = load_ecg(&c.data_dir)?;
            classify("ecg", c, &pool, out_dir)
        }
        RunConfig::Sine(c) => sine(c, out_dir),
        RunConfig::AlphaSweep(c) => sweep(c, out_dir),
    }
}

fn ode_bench(c: &OdeBenchConfig, out_dir: &Path) -> Result<Outcome, BoxError> {
    let problem = sqrt_growth_problem(c.t_end)?;
    let mut csv = String::from("method,h,endpoint_error,fitted_order\n");
    let mut rows = Vec::new();
    for &method in &c.methods {
        let est = empirical_order(&problem, method, &c.step_sizes)?;
        for &(h, err) in &est.errors {
            let _ = writeln!(csv, "{},{},{},{}", method.name(), fmt_sig(h, 9), fmt_sig(err, 9), fmt_sig(est.order, 9));
        }
        rows.push((method, est));
    }
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    let mut panel = Panel::new("endpoint error vs step size", "h", "endpoint error").log_log();
    panel.series = series_from_csv(&csv, "h", "endpoint_error", Some("method"));
    fs::write(out_dir.join("plot.svg"), render(&[panel]))?;
    Ok(Outcome::OdeBench(rows))
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

/// Full MNIST (train + t10k) when present under `<root>/mnist`, otherwise
/// the 10k-digit file pair.
pub fn load_mnist(root: &Path) -> Result<LabeledDataset, BoxError> {
    let dir = root.join("mnist");
    let pair = |img: &str, lab: &str| Some((find_file(&dir, img)?, find_file(&dir, lab)?));
    if let (Some(train), Some(test)) = (
        pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ) {
        let a = load_mnist_idx(&train.0, &train.1)?;
        let b = load_mnist_idx(&test.0, &test.1)?;
        return Ok(LabeledDataset::concat(&[a, b])?);
    }
    if let Some((img, lab)) = pair("mnist10k-images-idx3-ubyte", "mnist10k-labels-idx1-ubyte") {
        return Ok(load_mnist_idx(img, lab)?);
    }
    Err(format!(
        "no MNIST IDX files under {} (set --data-dir or {})",
        dir.display(),
        crate::args::DATA_DIR_ENV
    )
    .into())
}

/// Pools `mitbih_train.csv` and `mitbih_test.csv` from `<root>/ecg`.
pub fn load_ecg(root: &Path) -> Result<LabeledDataset, BoxError> {
    let dir = root.join("ecg");
    let parts: Vec<PathBuf> = ["mitbih_train.csv", "mitbih_test.csv"]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.is_file())
        .collect();
    if parts.is_empty() {
        return Err(format!(
            "no ECG CSVs under {} (expected mitbih_train.csv and/or mitbih_test.csv; set --data-dir or {})",
            dir.display(),
            crate::args::DATA_DIR_ENV
        )
        .into());
    }
    let sets = parts.iter().map(load_ecg_csv).collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledDataset::concat(&sets)?)
}

fn write_history(out_dir: &Path, title: &str, history: &MetricsHistory) -> Result<(), BoxError> {
    let csv = history.to_csv();
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    fs::write(out_dir.join("plot.svg"), metrics_chart(title, &csv))?;
    Ok(())
}

/// Keeps the epochs completed before a training failure on disk.
fn on_abort<'a>(out_dir: &'a Path, title: &str) -> impl FnOnce(TrainError) -> BoxError + 'a {
    let title = title.to_string();
    move |err| match write_history(out_dir, &title, &err.history) {
        Ok(()) => Box::new(err),
        Err(io) => io,
    }
}

fn classify(task: &str, c: &ClassifyConfig, pool: &LabeledDataset, out_dir: &Path) -> Result<Outcome, BoxError> {
    let (train, test) = stratified_split(pool, c.train_size, c.test_size, c.split_seed)?;
    let title = format!("{task} {}", model_label(&c.train.model));
    let run = train_classifier(&c.train, &train, &test).map_err(on_abort(out_dir, &title))?;
    write_history(out_dir, &title, &run.history)?;
    Ok(Outcome::Classify(run.history))
}

fn model_label(model: &heunflow::training::ModelSpec) -> String {
    use heunflow::training::ModelSpec;
    match model {
        ModelSpec::Blocks { block, .. } => format!("{} blocks", block.family.label()),
        ModelSpec::Lstm { family: Family::Plain, .. } => "lstm".into(),
        ModelSpec::Lstm { family, .. } => format!("{}-lstm", family.label()),
        ModelSpec::Gru { .. } => "gru".into(),
    }
}

fn sine(c: &SineConfig, out_dir: &Path) -> Result<Outcome, BoxError> {
    let ds = gen_sine(c.total_length, c.points)?;
    let title = format!("sine {}", model_label(&c.train.model));
    let run = train_seq_predictor(&c.train, &c.sequence, &ds).map_err(on_abort(out_dir, &title))?;
    write_history(out_dir, &title, &run.history)?;
    let mut csv = String::from("step,generated,truth\n");
    for (i, (g, t)) in run.generated.iter().zip(&run.truth).enumerate() {
        let _ = writeln!(csv, "{i},{},{}", fmt_sig(*g, 9), fmt_sig(*t, 9));
    }
    fs::write(out_dir.join("generation.csv"), &csv)?;
    let mut panel = Panel::new(&format!("{title}: free-running generation"), "step", "value");
    panel.series.extend(series_from_csv(&csv, "step", "generated", None));
    panel.series.extend(series_from_csv(&csv, "step", "truth", None));
    fs::write(out_dir.join("generation.svg"), render(&[panel]))?;
    Ok(Outcome::Sine {
        history: run.history,
        generation_mse: run.generation_mse,
    })
}

fn alpha_dir(out_dir: &Path, alpha: f64) -> PathBuf {
    out_dir.join(format!("alpha-{alpha}"))
}

fn sweep_one(task: &RunConfig, alpha: f64, out_dir: &Path) -> Result<SweepRow, BoxError> {
    let cfg = task
        .with_family(Family::ExtendedHeun { alpha })
        .ok_or("alpha-sweep needs a block or LSTM training task")?;
    let outcome = execute(&cfg, &alpha_dir(out_dir, alpha))?;
    let (best_accuracy, best_iteration) = outcome.history().and_then(MetricsHistory::best_accuracy).unwrap_or((0.0, 0));
    Ok(SweepRow {
        alpha,
        best_accuracy,
        best_iteration,
    })
}

fn sweep(c: &SweepConfig, out_dir: &Path) -> Result<Outcome, BoxError> {
    if matches!(*c.task, RunConfig::AlphaSweep(_) | RunConfig::OdeBench(_)) {
        return Err("alpha-sweep task must be mnist, ecg or sine".into());
    }
    let rows: Vec<SweepRow> = if c.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = c
                .alphas
                .iter()
                .map(|&alpha| s.spawn(move || sweep_one(&c.task, alpha, out_dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("sweep worker panicked".into())))
                .collect::<Result<_, _>>()
        })?
    } else {
        c.alphas
            .iter()
            .map(|&alpha| sweep_one(&c.task, alpha, out_dir))
            .collect::<Result<_, _>>()?
    };
    let mut csv = String::from("alpha,best_accuracy,best_iteration\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", fmt_sig(r.alpha, 9), fmt_sig(r.best_accuracy, 9), r.best_iteration);
    }
    fs::write(out_dir.join("summary.csv"), &csv)?;
    let mut panel = Panel::new("best held-out accuracy vs alpha", "alpha", "best accuracy");
    panel.series = series_from_csv(&csv, "alpha", "best_accuracy", None);
    if panel.series.is_empty() {
        panel.series.push(Series {
            name: "best_accuracy".into(),
            points: Vec::new(),
        });
    }
    fs::write(out_dir.join("plot.svg"), render(&[panel]))?;
    Ok(Outcome::Sweep(rows))
}
