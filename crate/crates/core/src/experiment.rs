//! Train/evaluate harness: strategy comparisons, cross-domain tests and the
//! scale-factor sweep.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boosting::{train, StrategyConfig, StrategyKind, TrainLog, TrainOptions};
use crate::datasets::{record_features, to_train_set, Manifest, SampleRecord, Split};
use crate::metrics::{evaluate, ScoredSet, DEFAULT_THRESHOLD};
use crate::par::Execution;
use crate::tensor::{forward, Activation, ClassifierSpec, ParamVector, Tensor};
use crate::{Error, Result};

pub const DEFAULT_SWEEP: [f64; 6] = [1.0, 3.0, 5.0, 7.0, 9.0, 10.0];

/// A named evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub name: String,
    pub manifest: Manifest,
}

impl TestSet {
    pub fn new(name: impl Into<String>, manifest: Manifest) -> Self {
        TestSet {
            name: name.into(),
            manifest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: StrategyConfig,
    pub options: TrainOptions,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Restrict training to these sources (cross-domain protocol). Empty means all.
    pub train_sources: Vec<String>,
    /// Restrict evaluation to these sources. Empty means all.
    pub test_sources: Vec<String>,
    /// Also report each source of a multi-source test set separately.
    pub per_source: bool,
    pub threshold: f64,
    /// Scale factors for the MDB sweep.
    pub sweep: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: StrategyConfig::new(StrategyKind::Mdb),
            options: TrainOptions::default(),
            hidden_dims: vec![16],
            activation: Activation::Relu,
            train_sources: Vec::new(),
            test_sources: Vec::new(),
            per_source: true,
            threshold: DEFAULT_THRESHOLD,
            sweep: DEFAULT_SWEEP.to_vec(),
        }
    }
}

/// One report cell group: a trained model evaluated on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: StrategyKind,
    pub cap_c: f64,
    pub dataset: String,
    pub acc: f64,
    pub eer: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
}

impl ReportRow {
    pub const HEADER: &'static str = "strategy  C      dataset              acc     eer     auc     n";

    pub fn within_bounds(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.acc) && self.eer.is_none_or(unit) && self.auc.is_none_or(unit)
    }
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "{:<9} {:<6} {:<20} {:.4}  {:<7} {:<7} {}",
            self.strategy.as_str(),
            self.cap_c,
            self.dataset,
            self.acc,
            opt(self.eer),
            opt(self.auc),
            self.n
        )
    }
}

/// One trained model together with its evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: StrategyConfig,
    pub log: TrainLog,
    pub rows: Vec<ReportRow>,
}

fn wanted(filter: &[String], source: &str) -> bool {
    filter.is_empty() || filter.iter().any(|s| s == source)
}

/// Training records: the train split, or everything when the manifest is unsplit.
pub fn training_records<'a>(manifest: &'a Manifest, sources: &[String]) -> Vec<&'a SampleRecord> {
    manifest
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Unassigned) && wanted(sources, &r.source))
        .collect()
}

/// Evaluation records: the test split, or everything when the manifest is unsplit.
pub fn evaluation_records<'a>(manifest: &'a Manifest, sources: &[String]) -> Vec<&'a SampleRecord> {
    manifest
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Test | Split::Unassigned) && wanted(sources, &r.source))
        .collect()
}

/// Fake-class probabilities paired with labels.
pub fn score_records(
    spec: &ClassifierSpec,
    params: &ParamVector,
    records: &[&SampleRecord],
    image_root: Option<&Path>,
) -> Result<ScoredSet> {
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let x = Tensor::vector(record_features(r, image_root)?)?;
        scores.push(forward(spec, params, &x)?.fake());
        labels.push(r.label.class());
    }
    ScoredSet::new(scores, labels)
}

/// Everything an experiment run reads besides its config.
pub struct ExperimentData<'a> {
    pub train: &'a Manifest,
    pub tests: &'a [TestSet],
    pub image_root: Option<&'a Path>,
}

fn evaluate_on(
    spec: &ClassifierSpec,
    strategy: &StrategyConfig,
    params: &ParamVector,
    config: &ExperimentConfig,
    data: &ExperimentData<'_>,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for test in data.tests {
        let records = evaluation_records(&test.manifest, &config.test_sources);
        if records.is_empty() {
            return Err(Error::domain(format!("test set '{}' has no evaluation records", test.name)));
        }
        let sources: BTreeSet<&str> = records.iter().map(|r| r.source.as_str()).collect();
        let mut groups: Vec<(String, Vec<&SampleRecord>)> = Vec::new();
        match sources.len() {
            1 if test.name.is_empty() => {
                groups.push((sources.first().unwrap().to_string(), records));
            }
            1 => {
                let only = sources.first().unwrap();
                let name = if *only == test.name { test.name.clone() } else { format!("{}/{only}", test.name) };
                groups.push((name, records));
            }
            _ => {
                if config.per_source {
                    for s in &sources {
                        let part = records.iter().copied().filter(|r| r.source == *s).collect();
                        groups.push((format!("{}/{s}", test.name), part));
                    }
                }
                groups.push((test.name.clone(), records));
            }
        }
        for (dataset, recs) in groups {
            let set = score_records(spec, params, &recs, data.image_root)?;
            let m = evaluate(&set, config.threshold);
            rows.push(ReportRow {
                strategy: strategy.kind,
                cap_c: strategy.cap_c,
                dataset,
                acc: m.acc,
                eer: m.eer,
                auc: m.auc,
                n: set.len(),
            });
        }
    }
    Ok(rows)
}

/// Trains one model per strategy and evaluates each on every test set.
/// Independent runs are scheduled through `exec`; output order follows
/// `strategies`.
pub fn run_strategies(
    config: &ExperimentConfig,
    strategies: &[StrategyConfig],
    data: &ExperimentData<'_>,
    exec: Execution,
) -> Result<Vec<RunResult>> {
    if data.tests.is_empty() {
        return Err(Error::domain("at least one test manifest is required"));
    }
    let train_records = training_records(data.train, &config.train_sources);
    if train_records.is_empty() {
        return Err(Error::domain("no training records after source filtering"));
    }
    let set = to_train_set(train_records, data.image_root)?;
    let input_dim = set.input_dim().expect("non-empty train set");
    let spec = ClassifierSpec::new(input_dim, config.hidden_dims.clone(), config.activation)?;
    exec.try_map(strategies, |strategy| {
        let log = train(&spec, strategy, &set, &config.options)?;
        let rows = evaluate_on(&spec, strategy, &log.final_params, config, data)?;
        Ok(RunResult {
            strategy: strategy.clone(),
            log,
            rows,
        })
    })
}

/// Strategy configs for `kinds`, sharing the base config's hyperparameters.
pub fn strategies_for(base: &StrategyConfig, kinds: &[StrategyKind]) -> Vec<StrategyConfig> {
    kinds
        .iter()
        .map(|&kind| StrategyConfig { kind, ..base.clone() })
        .collect()
}

/// MDB at each scale factor of `config.sweep`.
pub fn run_sweep(config: &ExperimentConfig, data: &ExperimentData<'_>, exec: Execution) -> Result<Vec<RunResult>> {
    if config.sweep.is_empty() {
        return Err(Error::domain("empty scale-factor sweep"));
    }
    let strategies: Vec<StrategyConfig> = config
        .sweep
        .iter()
        .map(|&cap_c| StrategyConfig {
            kind: StrategyKind::Mdb,
            cap_c,
            ..config.strategy.clone()
        })
        .collect();
    for s in &strategies {
        s.validate()?;
    }
    run_strategies(config, &strategies, data, exec)
}

/// Rows of all runs, header first, one line each.
pub fn format_rows(results: &[RunResult]) -> String {
    let mut out = String::from(ReportRow::HEADER);
    out.push('\n');
    for row in results.iter().flat_map(|r| &r.rows) {
        out.push_str(&row.to_string());
        out.push('\n');
    }
    out
}
