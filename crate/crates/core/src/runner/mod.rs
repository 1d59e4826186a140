//! Experiment orchestration behind the `generate`, `train`, `compare` and
//! `report` commands.
//!
//! Every run derives its data, split, initialization and shuffling from its
//! seed alone, so all strategies compared under one seed see identical
//! splits and identical initial weights. The test split is evaluated exactly
//! once, after training.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{parse_strategy, DataSource, ExperimentConfig, StrategySpec};

use crate::calibration::reliability_bins;
use crate::data::{
    generate_confusable_blobs, load_csv, save_csv, standardize, stratified_split, BlobSpec,
    LabeledDataset, SplitSpec,
};
use crate::error::{Error, Result};
use crate::math::{Matrix, RngSeed};
use crate::par::{self, Execution};
use crate::smoothing::{ConfusionTracker, TargetStrategy};
use crate::trainer::{
    evaluate, extract_features, fit_with_observer, EpochMetrics, MlpConfig, TrainConfig,
};

pub const METRICS_HEADER: &str = "epoch,phase,train_loss,val_loss,val_accuracy,val_ece";
pub const COMPARISON_HEADER: &str = "strategy,seed,test_accuracy,test_ece_x100";

/// Standardized train/val/test splits for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn blob_spec(source: &DataSource) -> Result<BlobSpec> {
    match source {
        DataSource::Synthetic {
            num_classes,
            samples_per_class,
            dimension,
            spread,
            overlap_pairs,
        } => BlobSpec::new(
            *num_classes,
            *samples_per_class,
            *dimension,
            *spread,
            overlap_pairs.clone(),
        ),
        _ => Err(Error::Config("data source is not synthetic".into())),
    }
}

fn raw_splits(config: &ExperimentConfig, seed: RngSeed) -> Result<PreparedData> {
    let (train, val, test) = match &config.source {
        DataSource::Synthetic { .. } => {
            let ds = generate_confusable_blobs(&blob_spec(&config.source)?, seed.derive("data"))?;
            stratified_split(&ds, &config.split, seed.derive("split"))?
        }
        DataSource::Csv { path } => {
            let ds = load_csv(path)?;
            stratified_split(&ds, &config.split, seed.derive("split"))?
        }
        DataSource::SplitCsv { dir } => {
            let parts = ["train.csv", "val.csv", "test.csv"].map(|f| load_csv(&dir.join(f)));
            let [train, val, test] = parts;
            let (train, val, test) = (train?, val?, test?);
            // A split may miss the highest labels; use the widest class range.
            let c = train
                .num_classes()
                .max(val.num_classes())
                .max(test.num_classes());
            let widen = |d: LabeledDataset| {
                LabeledDataset::new(d.features().clone(), d.labels().to_vec(), c)
            };
            (widen(train)?, widen(val)?, widen(test)?)
        }
    };
    Ok(PreparedData { train, val, test })
}

/// Loads or generates the data for `seed`, splits it and standardizes all
/// three parts with training statistics.
pub fn prepare_data(config: &ExperimentConfig, seed: RngSeed) -> Result<PreparedData> {
    let raw = raw_splits(config, seed)?;
    let (train, rest) = standardize(&raw.train, &[&raw.val, &raw.test])?;
    let mut rest = rest.into_iter();
    Ok(PreparedData {
        train,
        val: rest.next().expect("two standardized splits"),
        test: rest.next().expect("two standardized splits"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub blob_spec: BlobSpec,
    pub seed: RngSeed,
    pub split: SplitSpec,
    pub rows: [usize; 3],
}

/// Writes raw (unstandardized) `train.csv`, `val.csv`, `test.csv` and a
/// `manifest.json` into `out`.
pub fn cmd_generate(
    config: &ExperimentConfig,
    seed: RngSeed,
    out: &Path,
) -> Result<GenerateManifest> {
    let spec = blob_spec(&config.source)?;
    let raw = raw_splits(config, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_csv(&raw.train, &out.join("train.csv"))?;
    save_csv(&raw.val, &out.join("val.csv"))?;
    save_csv(&raw.test, &out.join("test.csv"))?;
    let manifest = GenerateManifest {
        blob_spec: spec,
        seed,
        split: config.split,
        rows: [raw.train.len(), raw.val.len(), raw.test.len()],
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Paths of a run's files, relative to its run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub reliability: PathBuf,
    pub test_confusion: PathBuf,
    pub features: Option<PathBuf>,
    pub confusion_snapshots: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub strategy_config: TargetStrategy,
    pub seed: u64,
    pub test_accuracy: f64,
    /// In `[0, 1]`; tables show it ×100.
    pub test_ece: f64,
    pub epochs: Vec<EpochMetrics>,
    pub artifacts: Artifacts,
}

/// Everything a run produced, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: StrategySpec,
    pub seed: RngSeed,
    pub metrics: Vec<EpochMetrics>,
    pub tracker: ConfusionTracker,
    /// Normalized confusion matrix after each epoch (CPLS only).
    pub snapshots: Vec<Matrix>,
    pub test_accuracy: f64,
    pub test_ece: f64,
    pub test_probs: Matrix,
    pub test_confusion: Matrix,
    pub test_features: Option<Matrix>,
    pub test_labels: Vec<usize>,
    pub ece_bins: usize,
}

fn train_config_for(config: &ExperimentConfig, spec: &StrategySpec, seed: RngSeed) -> TrainConfig {
    TrainConfig {
        strategy: spec.strategy,
        seed,
        ..config.train.clone()
    }
}

/// Trains one (strategy, seed) pair on prepared data and evaluates the test
/// split once.
pub fn execute_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    spec: &StrategySpec,
    seed: RngSeed,
) -> Result<RunOutcome> {
    let mlp = MlpConfig::new(
        data.train.dimension(),
        &config.hidden,
        data.train.num_classes(),
    );
    let train_config = train_config_for(config, spec, seed);
    let keep_snapshots = matches!(spec.strategy, TargetStrategy::Cpls { .. });
    let mut snapshots = Vec::new();
    let fit = fit_with_observer(&data.train, &data.val, &mlp, &train_config, |_, tracker| {
        if keep_snapshots {
            snapshots.push(tracker.normalized().clone());
        }
    })?;
    let eval = evaluate(&fit.params, &data.test)?;
    let bins = reliability_bins(&eval.probs, data.test.labels(), train_config.ece_bins)?;
    let test_features = (mlp.num_hidden() > 0)
        .then(|| extract_features(&fit.params, &data.test))
        .transpose()?;
    Ok(RunOutcome {
        spec: spec.clone(),
        seed,
        metrics: fit.metrics,
        tracker: fit.tracker,
        snapshots,
        test_accuracy: eval.accuracy,
        test_ece: bins.ece(),
        test_probs: eval.probs,
        test_confusion: eval.confusion,
        test_features,
        test_labels: data.test.labels().to_vec(),
        ece_bins: train_config.ece_bins,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            m.epoch,
            m.phase.as_str(),
            m.train_loss,
            m.val_loss,
            m.val_accuracy,
            m.val_ece
        );
    }
    out
}

/// Headerless CSV of a matrix at 6 decimals.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn counts_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", *v as u64)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn features_csv(features: &Matrix, labels: &[usize]) -> String {
    let mut out = String::new();
    for j in 0..features.cols() {
        let _ = write!(out, "h{j},");
    }
    out.push_str("label\n");
    for (row, y) in features.iter_rows().zip(labels) {
        for v in row {
            let _ = write!(out, "{v:.6},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

/// Writes a run's artifacts and `summary.json` into `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<RunRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = PathBuf::from("metrics.csv");
    write_file(&dir.join(&metrics), &metrics_csv(&outcome.metrics))?;

    let mut confusion_snapshots = Vec::with_capacity(outcome.snapshots.len());
    for (e, m) in outcome.snapshots.iter().enumerate() {
        let name = PathBuf::from(format!("confusion_epoch_{}.csv", e + 1));
        write_file(&dir.join(&name), &matrix_csv(m))?;
        confusion_snapshots.push(name);
    }

    let reliability = PathBuf::from("reliability.csv");
    let bins = reliability_bins(&outcome.test_probs, &outcome.test_labels, outcome.ece_bins)?;
    write_file(&dir.join(&reliability), &bins.to_csv())?;

    let test_confusion = PathBuf::from("test_confusion.csv");
    write_file(
        &dir.join(&test_confusion),
        &counts_csv(&outcome.test_confusion),
    )?;

    let features = match &outcome.test_features {
        Some(f) => {
            let name = PathBuf::from("features.csv");
            write_file(&dir.join(&name), &features_csv(f, &outcome.test_labels))?;
            Some(name)
        }
        None => None,
    };

    let record = RunRecord {
        strategy: outcome.spec.label.clone(),
        strategy_config: outcome.spec.strategy,
        seed: outcome.seed.0,
        test_accuracy: outcome.test_accuracy,
        test_ece: outcome.test_ece,
        epochs: outcome.metrics.clone(),
        artifacts: Artifacts {
            metrics,
            reliability,
            test_confusion,
            features,
            confusion_snapshots,
        },
    };
    write_json(&dir.join("summary.json"), &record)?;
    Ok(record)
}

/// Names the failing (strategy, seed) pair.
fn in_run<T>(spec: &StrategySpec, seed: RngSeed, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Run {
        strategy: spec.label.clone(),
        seed: seed.0,
        source: Box::new(e),
    })
}

pub fn cmd_train(
    config: &ExperimentConfig,
    spec: &StrategySpec,
    seed: RngSeed,
    out: &Path,
) -> Result<RunRecord> {
    let outcome = in_run(
        spec,
        seed,
        prepare_data(config, seed).and_then(|data| execute_run(config, &data, spec, seed)),
    )?;
    write_run(&outcome, out)
}

/// Runs every (strategy × seed) pair, in config order. Data is prepared once
/// per seed and shared by all strategies.
pub fn run_grid(config: &ExperimentConfig, exec: Execution) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let data: Vec<Result<PreparedData>> =
        par::map_coarse(exec, &config.seeds, |&seed| prepare_data(config, seed));
    let mut jobs = Vec::with_capacity(config.strategies.len() * config.seeds.len());
    for spec in &config.strategies {
        for (k, &seed) in config.seeds.iter().enumerate() {
            jobs.push((spec, k, seed));
        }
    }
    let outcomes = par::map_coarse(exec, &jobs, |&(spec, k, seed)| {
        let prepared = data[k].as_ref().map_err(|e| Error::Config(e.to_string()));
        in_run(
            spec,
            seed,
            prepared.and_then(|d| execute_run(config, d, spec, seed)),
        )
    });
    outcomes.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub median_accuracy: f64,
    pub median_ece: f64,
    pub mean_accuracy: f64,
    pub mean_ece: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregates per strategy entry (in config order) across seeds.
pub fn summarize(config: &ExperimentConfig, outcomes: &[RunOutcome]) -> Vec<StrategySummary> {
    let per = config.seeds.len();
    config
        .strategies
        .iter()
        .zip(outcomes.chunks(per))
        .map(|(spec, runs)| {
            let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
            let ece: Vec<f64> = runs.iter().map(|r| r.test_ece).collect();
            StrategySummary {
                strategy: spec.label.clone(),
                median_accuracy: median(&acc),
                median_ece: median(&ece),
                mean_accuracy: mean(&acc),
                mean_ece: mean(&ece),
            }
        })
        .collect()
}

/// `strategy,seed,test_accuracy,test_ece_x100`: one row per run, then a
/// `median` and a `mean` row per strategy.
pub fn comparison_csv(outcomes: &[RunOutcome], summaries: &[StrategySummary]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in outcomes {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.spec.label,
            r.seed.0,
            r.test_accuracy,
            100.0 * r.test_ece
        );
    }
    for s in summaries {
        let _ = writeln!(
            out,
            "{},median,{:.6},{:.6}",
            s.strategy,
            s.median_accuracy,
            100.0 * s.median_ece
        );
        let _ = writeln!(
            out,
            "{},mean,{:.6},{:.6}",
            s.strategy,
            s.mean_accuracy,
            100.0 * s.mean_ece
        );
    }
    out
}

/// Human-readable accuracy / ECE×100 table, one line per strategy.
pub fn comparison_table(summaries: &[StrategySummary]) -> String {
    let width = summaries
        .iter()
        .map(|s| s.strategy.len())
        .max()
        .unwrap_or(0)
        .max("strategy".len());
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "strategy", "acc(median)", "ece(median)", "acc(mean)", "ece(mean)"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.4}  {:>12.2}  {:>12.4}  {:>12.2}",
            s.strategy,
            s.median_accuracy,
            100.0 * s.median_ece,
            s.mean_accuracy,
            100.0 * s.mean_ece
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub outcomes: Vec<RunOutcome>,
    pub records: Vec<RunRecord>,
    pub summaries: Vec<StrategySummary>,
    pub csv_path: PathBuf,
    pub table: String,
}

fn run_dir_name(index: usize, label: &str, seed: RngSeed) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    PathBuf::from(format!("{index:02}_{safe}")).join(format!("seed_{}", seed.0))
}

/// Runs the grid, writes every run under `out/runs/` and the comparison
/// table to `out/comparison.csv`.
pub fn cmd_compare(config: &ExperimentConfig, out: &Path) -> Result<Comparison> {
    cmd_compare_with(config, out, Execution::default())
}

pub fn cmd_compare_with(
    config: &ExperimentConfig,
    out: &Path,
    exec: Execution,
) -> Result<Comparison> {
    if config.strategies.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two strategies".into(),
        ));
    }
    let outcomes = run_grid(config, exec)?;
    let per = config.seeds.len();
    let mut records = Vec::with_capacity(outcomes.len());
    for (i, o) in outcomes.iter().enumerate() {
        let dir = out
            .join("runs")
            .join(run_dir_name(i / per, &o.spec.label, o.seed));
        records.push(write_run(o, &dir)?);
    }
    let summaries = summarize(config, &outcomes);
    let csv_path = out.join("comparison.csv");
    write_file(&csv_path, &comparison_csv(&outcomes, &summaries))?;
    Ok(Comparison {
        table: comparison_table(&summaries),
        outcomes,
        records,
        summaries,
        csv_path,
    })
}

fn collect_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_summaries(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            found.push(p);
        }
    }
    Ok(())
}

/// Consolidates every `summary.json` under `dir` (sorted by path) into a CSV
/// table with the location of each run's metrics file. Nothing is recomputed.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut found = Vec::new();
    collect_summaries(dir, &mut found)?;
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no runs found under {}",
            dir.display()
        )));
    }
    let mut out = format!("{COMPARISON_HEADER},metrics_csv\n");
    for path in found {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Summary {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let run_dir = path.parent().unwrap_or(dir);
        let metrics = run_dir.join(&record.artifacts.metrics);
        let shown = metrics.strip_prefix(dir).unwrap_or(&metrics);
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            record.strategy,
            record.seed,
            record.test_accuracy,
            100.0 * record.test_ece,
            shown.display()
        );
    }
    Ok(out)
}
