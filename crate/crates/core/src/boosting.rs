//! Training strategies for heterogeneous multi-source data.
//!
//! Four strategies share one step skeleton:
//!
//! - **vanilla**: unweighted mean cross-entropy.
//! - **kd**: cross-entropy plus a temperature-softened distillation term
//!   against an EMA teacher.
//! - **dw**: per-sample weights from the student's own cross-entropy.
//! - **mdb**: per-sample weights from the EMA teacher's cross-entropy.
//!
//! Weights are rescaled per mini-batch onto `[1, C]` and the weighted loss is
//! normalised by the batch size, not by the weight sum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{
    self, batch_gradient, cross_entropy, softmax, weighted_ce_logit_grad, ClassProbs, ClassifierSpec, Example,
    OptimizerState, ParamVector,
};
use crate::{Error, Result};

pub const DEFAULT_CAP_C: f64 = 5.0;
pub const DEFAULT_MOMENTUM: f64 = 0.97;
pub const DEFAULT_KD_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_KD_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Vanilla,
    Kd,
    Dw,
    Mdb,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [StrategyKind::Vanilla, StrategyKind::Kd, StrategyKind::Dw, StrategyKind::Mdb];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Kd => "kd",
            StrategyKind::Dw => "dw",
            StrategyKind::Mdb => "mdb",
        }
    }

    /// Whether the strategy keeps an EMA teacher.
    pub fn uses_teacher(self) -> bool {
        matches!(self, StrategyKind::Kd | StrategyKind::Mdb)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(StrategyKind::Vanilla),
            "kd" => Ok(StrategyKind::Kd),
            "dw" => Ok(StrategyKind::Dw),
            "mdb" => Ok(StrategyKind::Mdb),
            other => Err(Error::domain(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub cap_c: f64,
    pub momentum_m: f64,
    pub kd_temperature: f64,
    pub kd_beta: f64,
    pub weight_decay: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            cap_c: DEFAULT_CAP_C,
            momentum_m: DEFAULT_MOMENTUM,
            kd_temperature: DEFAULT_KD_TEMPERATURE,
            kd_beta: DEFAULT_KD_BETA,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap_c >= 1.0 && self.cap_c.is_finite()) {
            return Err(Error::domain(format!("cap C must be >= 1, got {}", self.cap_c)));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return Err(Error::domain(format!("momentum must lie in [0, 1], got {}", self.momentum_m)));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::domain("kd temperature must be > 0"));
        }
        if !(self.kd_beta >= 0.0 && self.kd_beta.is_finite()) {
            return Err(Error::domain("kd beta must be >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::domain("weight decay must be >= 0"));
        }
        Ok(())
    }

    fn expect(&self, kind: StrategyKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::domain(format!("{kind} step called with a {} config", self.kind)));
        }
        self.validate()
    }
}

/// EMA teacher parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub theta_bar: ParamVector,
    pub m: f64,
}

impl MomentumState {
    pub fn new(theta_bar: ParamVector, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::domain(format!("momentum must lie in [0, 1], got {m}")));
        }
        Ok(MomentumState { theta_bar, m })
    }
}

/// `theta_bar <- m * theta_bar + (1 - m) * student`, elementwise.
pub fn momentum_update(state: &mut MomentumState, student: &ParamVector) -> Result<()> {
    if state.theta_bar.len() != student.len() {
        return Err(Error::shape(format!(
            "teacher has {} parameters, student {}",
            state.theta_bar.len(),
            student.len()
        )));
    }
    let m = state.m;
    let bar = state.theta_bar.as_mut_slice();
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        bar.copy_from_slice(student.as_slice());
        return Ok(());
    }
    for (b, s) in bar.iter_mut().zip(student.as_slice()) {
        *b = m * *b + (1.0 - m) * s;
    }
    Ok(())
}

/// Raw difficulty scores and the `[1, C]` weights derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyWeights {
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Cross-entropy of `params`' prediction against each label.
pub fn scores_with(spec: &ClassifierSpec, params: &ParamVector, batch: &[Example]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    batch
        .iter()
        .map(|ex| cross_entropy(tensor::forward(spec, params, &ex.input)?, ex.label))
        .collect()
}

/// Teacher cross-entropy per sample.
pub fn difficulty_scores(spec: &ClassifierSpec, momentum: &MomentumState, batch: &[Example]) -> Result<Vec<f64>> {
    scores_with(spec, &momentum.theta_bar, batch)
}

/// Min-max maps scores onto `[1, cap_c]`. The lowest score gets exactly 1 and
/// the highest exactly `cap_c`; a batch of identical scores gets all ones.
pub fn rescale_weights(raw_scores: &[f64], cap_c: f64) -> Result<Vec<f64>> {
    if !(cap_c >= 1.0 && cap_c.is_finite()) {
        return Err(Error::domain(format!("cap C must be >= 1, got {cap_c}")));
    }
    if raw_scores.is_empty() {
        return Err(Error::domain("no scores to rescale"));
    }
    if raw_scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::domain("scores must be finite and >= 0"));
    }
    let (lo, hi) = raw_scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let spread = hi - lo;
    if spread == 0.0 {
        return Ok(vec![1.0; raw_scores.len()]);
    }
    let span = cap_c - 1.0;
    Ok(raw_scores
        .iter()
        .map(|&g| {
            if g == hi {
                cap_c
            } else if g == lo {
                1.0
            } else {
                (1.0 + span * ((g - lo) / spread)).clamp(1.0, cap_c)
            }
        })
        .collect())
}

/// Per-step summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Mean unweighted student cross-entropy before the update.
    pub loss: f64,
    /// The objective actually differentiated (weighted or distillation loss).
    pub objective: f64,
    /// Correct student predictions before the update.
    pub correct: usize,
    /// Weights applied to each sample (all ones for vanilla and kd).
    pub weights: DifficultyWeights,
}

fn weighted_update(
    spec: &ClassifierSpec,
    params: &mut ParamVector,
    optimizer: &mut OptimizerState,
    weight_decay: f64,
    batch: &[Example],
    weights: DifficultyWeights,
) -> Result<StepOutcome> {
    tensor::check_weights(batch, &weights.weights)?;
    let w = &weights.weights;
    let (grad, probs) = batch_gradient(spec, params, batch, weight_decay, |i, ex, trace| {
        weighted_ce_logit_grad(trace.probs, ex.label, w[i])
    })?;
    let (loss, objective, correct) = summarize(batch, &probs, w)?;
    optimizer.step(params, &grad)?;
    Ok(StepOutcome {
        loss,
        objective,
        correct,
        weights,
    })
}

fn summarize(batch: &[Example], probs: &[ClassProbs], weights: &[f64]) -> Result<(f64, f64, usize)> {
    let mut loss = 0.0;
    let mut objective = 0.0;
    let mut correct = 0;
    for ((ex, p), w) in batch.iter().zip(probs).zip(weights) {
        let ce = cross_entropy(*p, ex.label)?;
        loss += ce;
        objective += w * ce;
        correct += usize::from(p.predicted_class() == ex.label);
    }
    let b = batch.len() as f64;
    Ok((loss / b, objective / b, correct))
}

fn uniform(batch: &[Example]) -> DifficultyWeights {
    DifficultyWeights {
        raw_scores: vec![0.0; batch.len()],
        weights: vec![1.0; batch.len()],
    }
}

/// Unweighted mean cross-entropy step.
pub fn vanilla_step(
    spec: &ClassifierSpec,
    params: &mut ParamVector,
    optimizer: &mut OptimizerState,
    config: &StrategyConfig,
    batch: &[Example],
) -> Result<StepOutcome> {
    config.expect(StrategyKind::Vanilla)?;
    weighted_update(spec, params, optimizer, config.weight_decay, batch, uniform(batch))
}

/// Difficulty weighting scored by the student itself.
pub fn dw_step(
    spec: &ClassifierSpec,
    params: &mut ParamVector,
    optimizer: &mut OptimizerState,
    config: &StrategyConfig,
    batch: &[Example],
) -> Result<StepOutcome> {
    config.expect(StrategyKind::Dw)?;
    let raw_scores = scores_with(spec, params, batch)?;
    let weights = rescale_weights(&raw_scores, config.cap_c)?;
    weighted_update(
        spec,
        params,
        optimizer,
        config.weight_decay,
        batch,
        DifficultyWeights { raw_scores, weights },
    )
}

/// Momentum difficulty boosting: score with the teacher, rescale, take a
/// weighted student step, then move the teacher toward the new student.
pub fn mdb_step(
    spec: &ClassifierSpec,
    params: &mut ParamVector,
    optimizer: &mut OptimizerState,
    momentum: &mut MomentumState,
    config: &StrategyConfig,
    batch: &[Example],
) -> Result<StepOutcome> {
    config.expect(StrategyKind::Mdb)?;
    let raw_scores = difficulty_scores(spec, momentum, batch)?;
    let weights = rescale_weights(&raw_scores, config.cap_c)?;
    let outcome = weighted_update(
        spec,
        params,
        optimizer,
        config.weight_decay,
        batch,
        DifficultyWeights { raw_scores, weights },
    )?;
    momentum_update(momentum, params)?;
    Ok(outcome)
}

/// `T^2 * KL(softmax(teacher/T) || softmax(student/T))`.
pub fn distillation_term(teacher_logits: [f64; 2], student_logits: [f64; 2], temperature: f64) -> f64 {
    let t = temperature;
    let qt = softmax([teacher_logits[0] / t, teacher_logits[1] / t]);
    let qs = softmax([student_logits[0] / t, student_logits[1] / t]);
    let kl: f64 = (0..2)
        .map(|c| {
            let p = qt.of(c);
            if p == 0.0 {
                0.0
            } else {
                p * (p.ln() - qs.of(c).max(tensor::PROB_FLOOR).ln())
            }
        })
        .sum();
    t * t * kl.max(0.0)
}

/// Cross-entropy plus distillation toward the EMA teacher. Only the student
/// receives gradient; the teacher is updated after the step.
pub fn kd_step(
    spec: &ClassifierSpec,
    params: &mut ParamVector,
    optimizer: &mut OptimizerState,
    momentum: &mut MomentumState,
    config: &StrategyConfig,
    batch: &[Example],
) -> Result<StepOutcome> {
    config.expect(StrategyKind::Kd)?;
    let weights = uniform(batch);
    let beta = config.kd_beta;
    let t = config.kd_temperature;
    let teacher_logits: Vec<[f64; 2]> = if beta == 0.0 {
        Vec::new()
    } else {
        batch
            .iter()
            .map(|ex| tensor::logits(spec, &momentum.theta_bar, &ex.input))
            .collect::<Result<_>>()?
    };
    let mut kd_total = 0.0;
    let (grad, probs) = batch_gradient(spec, params, batch, config.weight_decay, |i, ex, trace| {
        let mut d = weighted_ce_logit_grad(trace.probs, ex.label, 1.0)?;
        if beta != 0.0 {
            let tl = teacher_logits[i];
            let qt = softmax([tl[0] / t, tl[1] / t]);
            let qs = softmax([trace.logits[0] / t, trace.logits[1] / t]);
            // d/dz of T^2 * KL(qt || qs) = T * (qs - qt)
            d[0] += beta * t * (qs.of(0) - qt.of(0));
            d[1] += beta * t * (qs.of(1) - qt.of(1));
            kd_total += distillation_term(tl, trace.logits, t);
        }
        Ok(d)
    })?;
    let (loss, _, correct) = summarize(batch, &probs, &weights.weights)?;
    let objective = loss + beta * kd_total / batch.len() as f64;
    optimizer.step(params, &grad)?;
    momentum_update(momentum, params)?;
    Ok(StepOutcome {
        loss,
        objective,
        correct,
        weights,
    })
}

/// Examples tagged with the index of the source dataset they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub examples: Vec<Example>,
    pub sources: Vec<usize>,
    pub source_names: Vec<String>,
}

impl TrainSet {
    pub fn new(examples: Vec<Example>, sources: Vec<usize>, source_names: Vec<String>) -> Result<Self> {
        if examples.len() != sources.len() {
            return Err(Error::shape("one source index per example required"));
        }
        if let Some(bad) = sources.iter().find(|&&s| s >= source_names.len()) {
            return Err(Error::shape(format!("source index {bad} has no name")));
        }
        Ok(TrainSet {
            examples,
            sources,
            source_names,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.input.len())
    }
}

/// Loop settings shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            batch_size: 32,
            seed: 0,
            lr: tensor::DEFAULT_LR,
            beta1: tensor::DEFAULT_BETA1,
            beta2: tensor::DEFAULT_BETA2,
        }
    }
}

/// Number of histogram bins spanning `[1, C]` in per-source weight histograms.
pub const WEIGHT_HIST_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    /// Mean weight assigned to each source's samples this epoch.
    pub source_weights: BTreeMap<String, f64>,
    /// Per-source counts of weights falling in each of
    /// [`WEIGHT_HIST_BINS`] equal bins over `[1, C]`.
    pub source_weight_hist: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: StrategyKind,
    pub cap_c: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_params: ParamVector,
    pub momentum: Option<MomentumState>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

struct SourceTally {
    sum: Vec<f64>,
    count: Vec<usize>,
    hist: Vec<Vec<usize>>,
}

impl SourceTally {
    fn new(n: usize) -> Self {
        SourceTally {
            sum: vec![0.0; n],
            count: vec![0; n],
            hist: vec![vec![0; WEIGHT_HIST_BINS]; n],
        }
    }

    fn add(&mut self, source: usize, weight: f64, cap_c: f64) {
        self.sum[source] += weight;
        self.count[source] += 1;
        let bin = if cap_c > 1.0 {
            (((weight - 1.0) / (cap_c - 1.0)) * WEIGHT_HIST_BINS as f64) as usize
        } else {
            0
        };
        self.hist[source][bin.min(WEIGHT_HIST_BINS - 1)] += 1;
    }
}

/// Trains a freshly initialised classifier with the configured strategy.
///
/// The teacher starts as a copy of the initial student. Sample order is
/// reshuffled each epoch from `options.seed`; runs are bit-reproducible.
pub fn train(
    spec: &ClassifierSpec,
    config: &StrategyConfig,
    data: &TrainSet,
    options: &TrainOptions,
) -> Result<TrainLog> {
    config.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    if options.epochs == 0 {
        return Err(Error::domain("epochs must be >= 1"));
    }
    if options.batch_size == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut params = spec.init_params(rng.random());
    let mut optimizer = OptimizerState::with_hyperparams(
        params.len(),
        options.lr,
        options.beta1,
        options.beta2,
        tensor::DEFAULT_EPSILON,
    )?;
    let mut momentum = if config.kind.uses_teacher() {
        Some(MomentumState::new(params.clone(), config.momentum_m)?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(options.epochs);
    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut tally = SourceTally::new(data.source_names.len());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.examples[i].clone()).collect();
            let outcome = match (config.kind, momentum.as_mut()) {
                (StrategyKind::Vanilla, _) => vanilla_step(spec, &mut params, &mut optimizer, config, &batch)?,
                (StrategyKind::Dw, _) => dw_step(spec, &mut params, &mut optimizer, config, &batch)?,
                (StrategyKind::Mdb, Some(m)) => mdb_step(spec, &mut params, &mut optimizer, m, config, &batch)?,
                (StrategyKind::Kd, Some(m)) => kd_step(spec, &mut params, &mut optimizer, m, config, &batch)?,
                (kind, None) => unreachable!("{kind} always has a teacher"),
            };
            loss_sum += outcome.loss * batch.len() as f64;
            correct += outcome.correct;
            for (&i, &w) in chunk.iter().zip(&outcome.weights.weights) {
                tally.add(data.sources[i], w, config.cap_c);
            }
        }
        let n = data.len() as f64;
        let mut source_weights = BTreeMap::new();
        let mut source_weight_hist = BTreeMap::new();
        for (s, name) in data.source_names.iter().enumerate() {
            if tally.count[s] > 0 {
                source_weights.insert(name.clone(), tally.sum[s] / tally.count[s] as f64);
                source_weight_hist.insert(name.clone(), tally.hist[s].clone());
            }
        }
        epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            acc: correct as f64 / n,
            source_weights,
            source_weight_hist,
        });
    }
    Ok(TrainLog {
        strategy: config.kind,
        cap_c: config.cap_c,
        epochs,
        final_params: params,
        momentum,
    })
}
